//! Multi-scale spatial L1 plus frequency-domain L1 restoration loss.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the frequency term.
    pub lambda: f64,
    /// Number of pyramid scales; scale `s` is pooled by `2^(s-1)`.
    pub scales: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            scales: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::contract(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.scales == 0 {
            return Err(Error::contract("loss needs at least one scale"));
        }
        Ok(())
    }
}

/// `Σ_s (1/E_s)‖Ŷ_s − Y_s‖₁ + λ·Σ_s (1/E_s)‖F(Ŷ_s) − F(Y_s)‖₁` with `E_s` the
/// pixel count at scale `s` and the spectral norm taken on complex moduli.
///
/// `pred` and `target` are single-channel images of equal shape.
pub fn loss(tape: &mut Tape, pred: NodeId, target: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    let (ps, ts) = (tape.value(pred).shape().to_vec(), tape.value(target).shape().to_vec());
    if ps != ts {
        return Err(Error::Shape {
            op: "loss",
            lhs: ps,
            rhs: ts,
        });
    }
    let (h, w) = match ps[..] {
        [h, w] | [h, w, 1] => (h, w),
        _ => return Err(Error::contract(format!("loss expects [H, W] or [H, W, 1], got {ps:?}"))),
    };
    let mut p = tape.reshape(pred, [h, w])?;
    let mut t = tape.reshape(target, [h, w])?;
    let mut total: Option<NodeId> = None;
    for s in 0..cfg.scales {
        if s > 0 {
            p = tape.avg_pool2(p)?;
            t = tape.avg_pool2(t)?;
        }
        let inv_e = 1.0 / tape.value(p).len() as f64;
        let diff = tape.sub(p, t)?;
        let a = tape.abs(diff);
        let spatial = tape.sum(a);
        let mut term = tape.scale(spatial, inv_e);
        if cfg.lambda > 0.0 {
            let spec = tape.fft2(diff)?;
            let m = tape.complex_abs(spec)?;
            let freq = tape.sum(m);
            let freq = tape.scale(freq, cfg.lambda * inv_e);
            term = tape.add(term, freq)?;
        }
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one scale"))
}

/// Loss value for plain tensors.
pub fn loss_value(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    let l = loss(&mut tape, p, t, cfg)?;
    Ok(tape.value(l).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_images_give_zero() {
        let x = Tensor::new([4, 4], (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let cfg = LossConfig {
            lambda: 0.1,
            scales: 2,
        };
        assert_eq!(loss_value(&x, &x, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_spatial_only() {
        let t = Tensor::zeros([6, 6, 1]);
        let p = Tensor::full([6, 6, 1], 0.5);
        let cfg = LossConfig {
            lambda: 0.0,
            scales: 1,
        };
        assert_eq!(loss_value(&p, &t, &cfg).unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let err = loss_value(&Tensor::zeros([4, 4]), &Tensor::zeros([4, 5]), &LossConfig::default());
        assert!(matches!(err, Err(Error::Shape { .. })));
    }
}

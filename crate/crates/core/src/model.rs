//! End-to-end restoration network: lift, a stack of operator layers, and a
//! pointwise projection with a global residual to the blurred input.

use std::sync::Arc;

use crate::dg::{dg_layer, init_layer, FluxConfig, FluxKind, LayerConfig, LayerParams, OperatorVariant, Penalty};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::partition::{BoundaryCondition, ElementPartition};
use crate::synth::{reflect, rng_for};
use crate::tape::{Activation, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub element_size: usize,
    pub layers: usize,
    pub variant: OperatorVariant,
    pub flux: FluxConfig,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_variant(OperatorVariant::Face)
    }
}

impl ModelConfig {
    /// Defaults for `variant`: face pairs with the averaged-jump flux under
    /// Dirichlet, cell with the jump flux under Neumann.
    pub fn for_variant(variant: OperatorVariant) -> Self {
        let (kind, bc) = match variant {
            OperatorVariant::Cell => (FluxKind::Jump, BoundaryCondition::Neumann),
            _ => (FluxKind::AvgJump, BoundaryCondition::Dirichlet),
        };
        Self {
            channels: 16,
            heads: 4,
            element_size: 8,
            layers: 2,
            variant,
            flux: FluxConfig {
                kind,
                penalty: Penalty::Learnable(0.5),
                bc,
            },
            activation: Activation::Gelu,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.channels == 0 {
            problems.push("channels must be positive".to_string());
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            problems.push(format!("heads={} must divide channels={}", self.heads, self.channels));
        }
        if self.layers == 0 {
            problems.push("layers must be at least 1".to_string());
        }
        if self.element_size == 0 {
            problems.push("element_size must be positive".to_string());
        }
        if !self.flux.penalty.initial().is_finite() {
            problems.push("tau must be finite".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(problems.join("; ")))
        }
    }

    pub fn layer_config(&self) -> LayerConfig {
        LayerConfig {
            heads: self.heads,
            variant: self.variant,
            flux: self.flux,
            activation: self.activation,
        }
    }

    /// Architecture fields as `key=value` pairs; two configs with equal pairs
    /// accept each other's checkpoints.
    pub fn architecture(&self) -> Vec<(&'static str, String)> {
        let (penalty, tau) = match self.flux.penalty {
            Penalty::Learnable(v) => ("learnable", v),
            Penalty::Fixed(v) => ("fixed", v),
        };
        vec![
            ("channels", self.channels.to_string()),
            ("heads", self.heads.to_string()),
            ("element_size", self.element_size.to_string()),
            ("layers", self.layers.to_string()),
            ("variant", self.variant.name().to_string()),
            ("flux", self.flux.kind.name().to_string()),
            ("bc", self.flux.bc.name().to_string()),
            ("penalty", penalty.to_string()),
            ("tau", tau.to_string()),
            ("activation", self.activation.name().to_string()),
        ]
    }

    /// Extents the latent grid is padded to.
    pub fn padded_extents(&self, h: usize, w: usize) -> (usize, usize) {
        if self.variant == OperatorVariant::Global {
            (h, w)
        } else {
            let p = self.element_size;
            (h.div_ceil(p) * p, w.div_ceil(p) * p)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LiftParams {
    pub pointwise: ParamId,
    pub pointwise_bias: ParamId,
    pub conv: ParamId,
    pub conv_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct ProjParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub lift: LiftParams,
    pub layers: Vec<LayerParams>,
    pub proj: ProjParams,
}

fn uniform(rng: &mut impl rand::Rng, shape: [usize; 2], bound: f64) -> Tensor {
    let data = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Registers all parameters for `cfg`, drawing weights from `cfg.seed`.
pub fn init_model(store: &mut ParamStore, cfg: &ModelConfig) -> ModelParams {
    let c = cfg.channels;
    let mut rng = rng_for(cfg.seed);
    let lift = LiftParams {
        pointwise: store.add("lift.p", uniform(&mut rng, [1, c], 1.0)),
        pointwise_bias: store.add("lift.pb", Tensor::zeros([c])),
        conv: store.add("lift.conv", uniform(&mut rng, [9 * c, c], 1.0 / ((9 * c) as f64).sqrt())),
        conv_bias: store.add("lift.cb", Tensor::zeros([c])),
    };
    let layer_cfg = cfg.layer_config();
    let layers = (0..cfg.layers)
        .map(|i| init_layer(store, &format!("layer{i}"), c, &layer_cfg, &mut rng))
        .collect();
    let proj = ProjParams {
        weight: store.add("proj.w", uniform(&mut rng, [c, 1], 1.0 / (c as f64).sqrt())),
        bias: store.add("proj.b", Tensor::zeros([1])),
    };
    ModelParams { lift, layers, proj }
}

#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// Restored image, `[H, W, 1]`.
    pub prediction: NodeId,
    /// Latent field after the lift, `[Hp, Wp, C]`.
    pub lifted: NodeId,
    /// Latent field after each layer, `[Hp, Wp, C]`.
    pub latents: Vec<NodeId>,
}

/// Reflect-pads `[H, W, C]` on the bottom and right to `[hp, wp, C]`.
pub fn reflect_pad(x: &Tensor, hp: usize, wp: usize) -> Result<Tensor> {
    let (h, w, c) = match x.shape() {
        &[h, w, c] if hp >= h && wp >= w => (h, w, c),
        s => return Err(Error::contract(format!("cannot pad {s:?} to {hp}×{wp}"))),
    };
    let src = x.data();
    let mut out = Vec::with_capacity(hp * wp * c);
    for y in 0..hp {
        let sy = reflect(y as isize, h);
        for xx in 0..wp {
            let sx = reflect(xx as isize, w);
            out.extend_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    Ok(Tensor::from_parts(vec![hp, wp, c], out))
}

/// Gather map for a 3×3 reflect-padded convolution: `[H·W, 9·C]` columns,
/// tap-major then channel.
fn im2col_index(h: usize, w: usize, c: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(h * w * 9 * c);
    for y in 0..h {
        for x in 0..w {
            for dy in -1..=1isize {
                let sy = reflect(y as isize + dy, h);
                for dx in -1..=1isize {
                    let sx = reflect(x as isize + dx, w);
                    idx.extend((0..c).map(|ch| (sy * w + sx) * c + ch));
                }
            }
        }
    }
    idx.into()
}

/// Pointwise 1→C map, then a 3×3 C→C convolution and the nonlinearity.
/// `x` is a `[H·W, 1]` node; returns `[H·W, C]`.
pub fn lift(
    tape: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    h: usize,
    w: usize,
    params: &LiftParams,
    activation: Activation,
) -> Result<NodeId> {
    let p = tape.param(store, params.pointwise);
    let pb = tape.param(store, params.pointwise_bias);
    let c = tape.value(p).shape()[1];
    let a = tape.matmul(x, p)?;
    let a = tape.add_bias(a, pb)?;
    let cols = tape.gather(a, im2col_index(h, w, c), [h * w, 9 * c])?;
    let k = tape.param(store, params.conv);
    let kb = tape.param(store, params.conv_bias);
    let conv = tape.matmul(cols, k)?;
    let conv = tape.add_bias(conv, kb)?;
    Ok(tape.pointwise(conv, activation))
}

/// Pointwise C→1 map plus the residual `x`; both `[N, ·]`.
pub fn project(tape: &mut Tape, store: &ParamStore, z: NodeId, x: NodeId, params: &ProjParams) -> Result<NodeId> {
    let wgt = tape.param(store, params.weight);
    let b = tape.param(store, params.bias);
    let y = tape.matmul(z, wgt)?;
    let y = tape.add_bias(y, b)?;
    tape.add(y, x)
}

/// Full forward pass on a blurred `[H, W, 1]` image.
pub fn forward_model(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    x: &Tensor,
) -> Result<ForwardNodes> {
    let (h, w) = match x.shape() {
        &[h, w, 1] => (h, w),
        s => return Err(Error::contract(format!("model input must be [H, W, 1], got {s:?}"))),
    };
    let (hp, wp) = cfg.padded_extents(h, w);
    let n = hp * wp;
    let padded = reflect_pad(x, hp, wp)?;
    let xin = tape.constant(padded.reshape([n, 1])?);

    let z0 = lift(tape, store, xin, hp, wp, &params.lift, cfg.activation)?;
    let c = tape.value(z0).shape()[1];
    let mut z = tape.reshape(z0, [hp, wp, c])?;
    let lifted = z;

    let partition = match cfg.variant {
        OperatorVariant::Global => ElementPartition::new(hp, wp, 1)?,
        _ => ElementPartition::new(hp, wp, cfg.element_size)?,
    };
    let layer_cfg = cfg.layer_config();
    let mut latents = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        z = dg_layer(tape, store, z, lp, &layer_cfg, &partition)?.output;
        latents.push(z);
    }

    let flat = tape.reshape(z, [n, c])?;
    let out = project(tape, store, flat, xin, &params.proj)?;
    let prediction = if (hp, wp) == (h, w) {
        tape.reshape(out, [h, w, 1])?
    } else {
        let crop: Vec<usize> = (0..h).flat_map(|y| (0..w).map(move |xx| y * wp + xx)).collect();
        tape.gather(out, crop.into(), [h, w, 1])?
    };
    Ok(ForwardNodes {
        prediction,
        lifted,
        latents,
    })
}

/// A configured network with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub handles: ModelParams,
}

impl Model {
    /// Builds and initialises a model. `layers = 0` is accepted here so the
    /// lift/project path can be exercised on its own; [`ModelConfig::validate`]
    /// rejects it for training.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut check = config;
        check.layers = check.layers.max(1);
        check.validate()?;
        let mut params = ParamStore::new();
        let handles = init_model(&mut params, &config);
        Ok(Self {
            config,
            params,
            handles,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<ForwardNodes> {
        forward_model(tape, &self.params, &self.handles, &self.config, x)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let nodes = self.forward(&mut tape, x)?;
        Ok(tape.value(nodes.prediction).clone())
    }

    /// Prediction together with the per-layer latent fields.
    pub fn predict_with_latents(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let nodes = self.forward(&mut tape, x)?;
        let latents = nodes.latents.iter().map(|&id| tape.value(id).clone()).collect();
        Ok((tape.value(nodes.prediction).clone(), latents))
    }

    /// Latent fields by operator step: index 0 is the lifted field, index
    /// `t` the output of layer `t`. Each is `[Hp·Wp, C]`.
    pub fn latent_trajectory(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let nodes = self.forward(&mut tape, x)?;
        std::iter::once(nodes.lifted)
            .chain(nodes.latents.iter().copied())
            .map(|id| {
                let v = tape.value(id);
                let c = v.shape()[2];
                v.clone().reshape([v.len() / c, c])
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.len()).sum()
    }
}

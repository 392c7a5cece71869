//! Image quality metrics and effective rank of latent fields.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for a zero-error pair.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// The error was zero (or below the cap's resolution) and `db` is the cap.
    pub capped: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape("mse", pred, target)?;
    let n = pred.len().max(1) as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> Psnr {
    let db = 10.0 * (peak * peak / mse).log10();
    if mse == 0.0 || db > PSNR_CAP {
        Psnr {
            db: PSNR_CAP,
            capped: true,
        }
    } else {
        Psnr { db, capped: false }
    }
}

pub fn psnr(pred: &Tensor, target: &Tensor, peak: f64) -> Result<Psnr> {
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::contract(format!("peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(mse(pred, target)?, peak))
}

pub const SSIM_WINDOW: usize = 8;

/// Mean SSIM over all 8×8 windows (stride 1) with uniform weights and
/// `C1 = (0.01·peak)²`, `C2 = (0.03·peak)²`, peak 1. Images smaller than the
/// window use a single window of the largest square that fits.
pub fn ssim(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape("ssim", pred, target)?;
    let (h, w) = match pred.shape() {
        &[h, w] | &[h, w, 1] => (h, w),
        s => return Err(Error::contract(format!("ssim expects one channel, got {s:?}"))),
    };
    let win = SSIM_WINDOW.min(h).min(w);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (x, y) = (pred.data(), target.data());
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=h - win {
        for left in 0..=w - win {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in top..top + win {
                for c in left..left + win {
                    let (a, b) = (x[r * w + c], y[r * w + c]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeBandParams {
    /// Gradient-magnitude quantile; non-zero pixels at or above it seed the band.
    pub quantile: f64,
    /// Chebyshev dilation radius in pixels.
    pub radius: usize,
}

impl Default for EdgeBandParams {
    fn default() -> Self {
        Self {
            quantile: 0.9,
            radius: 2,
        }
    }
}

/// Edge band of a sharp single-channel image, row-major.
pub fn edge_mask(target: &Tensor, params: &EdgeBandParams) -> Result<Vec<bool>> {
    let (h, w) = match target.shape() {
        &[h, w] | &[h, w, 1] => (h, w),
        s => return Err(Error::contract(format!("edge mask expects one channel, got {s:?}"))),
    };
    if !(0.0..=1.0).contains(&params.quantile) {
        return Err(Error::contract(format!("quantile {} outside [0, 1]", params.quantile)));
    }
    let t = target.data();
    let at = |r: usize, c: usize| t[r * w + c];
    let mut mag = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let gx = (at(r, (c + 1).min(w - 1)) - at(r, c.saturating_sub(1))) / 2.0;
            let gy = (at((r + 1).min(h - 1), c) - at(r.saturating_sub(1), c)) / 2.0;
            mag.push(gx.hypot(gy));
        }
    }
    let mut sorted = mag.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = ((params.quantile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let threshold = sorted[rank - 1];
    // ties at the quantile join the band so piecewise-constant targets keep their edges
    let seed: Vec<bool> = mag.iter().map(|&m| m > 0.0 && m >= threshold).collect();

    let rad = params.radius;
    let mut band = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if !seed[r * w + c] {
                continue;
            }
            for rr in r.saturating_sub(rad)..=(r + rad).min(h - 1) {
                for cc in c.saturating_sub(rad)..=(c + rad).min(w - 1) {
                    band[rr * w + cc] = true;
                }
            }
        }
    }
    Ok(band)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeBandReport {
    /// `None` when the band is empty (e.g. a constant target).
    pub edge: Option<Psnr>,
    /// `None` when the band covers the whole image.
    pub interior: Option<Psnr>,
    pub edge_mse: Option<f64>,
    pub interior_mse: Option<f64>,
    pub mask: Vec<bool>,
}

impl EdgeBandReport {
    pub fn empty_band(&self) -> bool {
        self.edge.is_none()
    }

    pub fn band_pixels(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

pub fn edge_band_psnr(pred: &Tensor, target: &Tensor, params: &EdgeBandParams) -> Result<EdgeBandReport> {
    same_shape("edge_band_psnr", pred, target)?;
    let mask = edge_mask(target, params)?;
    let (mut se, mut ne, mut si, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for ((a, b), &m) in pred.data().iter().zip(target.data()).zip(&mask) {
        let d = (a - b) * (a - b);
        if m {
            se += d;
            ne += 1;
        } else {
            si += d;
            ni += 1;
        }
    }
    let edge_mse = (ne > 0).then(|| se / ne as f64);
    let interior_mse = (ni > 0).then(|| si / ni as f64);
    Ok(EdgeBandReport {
        edge: edge_mse.map(|m| psnr_from_mse(m, 1.0)),
        interior: interior_mse.map(|m| psnr_from_mse(m, 1.0)),
        edge_mse,
        interior_mse,
        mask,
    })
}

/// Per-image metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: Psnr,
    pub ssim: f64,
    pub edge: Option<Psnr>,
    pub interior: Option<Psnr>,
}

/// All image metrics for a prediction, after clamping it to `[0, 1]`.
pub fn image_metrics(pred: &Tensor, target: &Tensor, params: &EdgeBandParams) -> Result<MetricReport> {
    let pred = pred.map(|v| v.clamp(0.0, 1.0));
    let band = edge_band_psnr(&pred, target, params)?;
    Ok(MetricReport {
        psnr: psnr(&pred, target, 1.0)?,
        ssim: ssim(&pred, target)?,
        edge: band.edge,
        interior: band.interior,
    })
}

/// Jacobi sweep tolerance on the normalised column inner products.
pub const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;

/// Singular values of a row-major `n×d` matrix by one-sided Jacobi
/// rotations, in descending order.
pub fn singular_values(a: &[f64], n: usize, d: usize) -> Result<Vec<f64>> {
    if a.len() != n * d {
        return Err(Error::Shape {
            op: "singular_values",
            lhs: vec![n, d],
            rhs: vec![a.len()],
        });
    }
    // column-major copy so column pairs are contiguous
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| a[i * d + j]).collect()).collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut s = (0.0, 0.0, 0.0);
                    for (x, y) in cp.iter().zip(cq) {
                        s.0 += x * x;
                        s.1 += y * y;
                        s.2 += x * y;
                    }
                    s
                };
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.truncate(n.min(d));
    Ok(sv)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveRank {
    pub value: f64,
    /// The matrix was all zeros and `value` is the conventional 1.
    pub degenerate: bool,
}

/// Spectral-entropy effective rank `exp(−Σ pᵢ ln pᵢ)`, `pᵢ = σᵢ/Σσ`, of an
/// `[n, d]` matrix; zero singular values are skipped.
pub fn effective_rank(z: &Tensor) -> Result<EffectiveRank> {
    let (n, d) = match z.shape() {
        &[n, d] if n >= 1 && d >= 1 => (n, d),
        s => return Err(Error::contract(format!("effective rank needs [n, d] with n, d >= 1, got {s:?}"))),
    };
    let sv = singular_values(z.data(), n, d)?;
    Ok(rank_from_singular_values(&sv))
}

pub fn rank_from_singular_values(sv: &[f64]) -> EffectiveRank {
    let total: f64 = sv.iter().sum();
    if total == 0.0 {
        return EffectiveRank {
            value: 1.0,
            degenerate: true,
        };
    }
    let entropy: f64 = sv
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    EffectiveRank {
        value: entropy.exp(),
        degenerate: false,
    }
}

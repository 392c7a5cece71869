//! Synthetic sharp patterns, sigma maps and spatially varying Gaussian blur.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_CANVAS: usize = 16;

/// Below this standard deviation the blur is an exact copy.
pub const IDENTITY_SIGMA: f64 = 0.3;

/// Deterministic, platform-independent generator for a given seed.
pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finaliser, used to derive per-item seeds from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PatternKind {
    FilledSquare,
    HollowBox,
    ThinLine,
}

impl PatternKind {
    pub const ALL: [PatternKind; 3] = [
        PatternKind::FilledSquare,
        PatternKind::HollowBox,
        PatternKind::ThinLine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PatternKind::FilledSquare => "filled_square",
            PatternKind::HollowBox => "hollow_box",
            PatternKind::ThinLine => "thin_line",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    FilledSquare {
        top: usize,
        left: usize,
        side: usize,
    },
    HollowBox {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
        thickness: usize,
    },
    ThinLine {
        top: usize,
        left: usize,
        length: usize,
        width: usize,
        horizontal: bool,
    },
}

impl Shape {
    pub fn kind(&self) -> PatternKind {
        match self {
            Shape::FilledSquare { .. } => PatternKind::FilledSquare,
            Shape::HollowBox { .. } => PatternKind::HollowBox,
            Shape::ThinLine { .. } => PatternKind::ThinLine,
        }
    }

    /// Bounding box as (top, left, height, width).
    fn bounds(&self) -> (usize, usize, usize, usize) {
        match *self {
            Shape::FilledSquare { top, left, side } => (top, left, side, side),
            Shape::HollowBox {
                top,
                left,
                height,
                width,
                ..
            } => (top, left, height, width),
            Shape::ThinLine {
                top,
                left,
                length,
                width,
                horizontal,
            } => {
                if horizontal {
                    (top, left, width, length)
                } else {
                    (top, left, length, width)
                }
            }
        }
    }

    fn covers(&self, y: usize, x: usize) -> bool {
        let (top, left, h, w) = self.bounds();
        if y < top || x < left || y >= top + h || x >= left + w {
            return false;
        }
        match *self {
            Shape::HollowBox { thickness, .. } => {
                let (dy, dx) = (y - top, x - left);
                dy < thickness || dx < thickness || dy >= h - thickness || dx >= w - thickness
            }
            _ => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatternSpec {
    pub shape: Shape,
    pub intensity: f64,
}

impl PatternSpec {
    /// Draws a random shape of `kind` that fits inside an `h×w` canvas.
    pub fn sample(kind: PatternKind, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let small = h.min(w);
        let intensity = rng.gen_range(0.5..=1.0);
        let shape = match kind {
            PatternKind::FilledSquare => {
                let side = rng.gen_range(small / 8..=small / 3).max(2);
                Shape::FilledSquare {
                    top: rng.gen_range(0..=h - side),
                    left: rng.gen_range(0..=w - side),
                    side,
                }
            }
            PatternKind::HollowBox => {
                let height = rng.gen_range(small / 5..=small / 2).max(5);
                let width = rng.gen_range(small / 5..=small / 2).max(5);
                let thickness = rng.gen_range(1..=2);
                Shape::HollowBox {
                    top: rng.gen_range(0..=h - height),
                    left: rng.gen_range(0..=w - width),
                    height,
                    width,
                    thickness,
                }
            }
            PatternKind::ThinLine => {
                let horizontal = rng.gen_bool(0.5);
                let along = if horizontal { w } else { h };
                let length = rng.gen_range(along / 4..=along * 3 / 4).max(2);
                let width = rng.gen_range(1..=2);
                let (bh, bw) = if horizontal { (width, length) } else { (length, width) };
                Shape::ThinLine {
                    top: rng.gen_range(0..=h - bh),
                    left: rng.gen_range(0..=w - bw),
                    length,
                    width,
                    horizontal,
                }
            }
        };
        Self { shape, intensity }
    }
}

fn check_canvas(h: usize, w: usize) -> Result<()> {
    if h < MIN_CANVAS || w < MIN_CANVAS {
        return Err(Error::contract(format!(
            "canvas {h}×{w} smaller than {MIN_CANVAS}×{MIN_CANVAS}"
        )));
    }
    Ok(())
}

/// Renders one pattern on a zero background as `[H, W, 1]`.
pub fn gen_pattern(spec: &PatternSpec, h: usize, w: usize) -> Result<Tensor> {
    let mut canvas = Tensor::zeros([h, w, 1]);
    draw_pattern(&mut canvas, spec)?;
    Ok(canvas)
}

/// Draws `spec` onto an existing `[H, W, 1]` canvas, keeping the brighter value.
pub fn draw_pattern(canvas: &mut Tensor, spec: &PatternSpec) -> Result<()> {
    let (h, w) = (canvas.shape()[0], canvas.shape()[1]);
    check_canvas(h, w)?;
    if !(0.0..=1.0).contains(&spec.intensity) {
        return Err(Error::contract(format!("intensity {} outside [0, 1]", spec.intensity)));
    }
    let (top, left, bh, bw) = spec.shape.bounds();
    let degenerate = match spec.shape {
        Shape::HollowBox { thickness, .. } => thickness == 0 || 2 * thickness > bh.min(bw),
        _ => false,
    };
    if bh == 0 || bw == 0 || top + bh > h || left + bw > w || degenerate {
        return Err(Error::contract(format!(
            "{} at ({top}, {left}) size {bh}×{bw} does not fit a {h}×{w} canvas",
            spec.shape.kind().name()
        )));
    }
    let data = canvas.data_mut();
    for y in top..top + bh {
        for x in left..left + bw {
            if spec.shape.covers(y, x) {
                let px = &mut data[y * w + x];
                *px = px.max(spec.intensity);
            }
        }
    }
    Ok(())
}

/// A scene of `count` random shapes drawn from `kinds`.
pub fn gen_scene(kinds: &[PatternKind], count: usize, h: usize, w: usize, seed: u64) -> Result<Tensor> {
    check_canvas(h, w)?;
    if kinds.is_empty() {
        return Err(Error::contract("pattern mix is empty"));
    }
    let mut rng = rng_for(seed);
    let mut canvas = Tensor::zeros([h, w, 1]);
    for _ in 0..count {
        let kind = kinds[rng.gen_range(0..kinds.len())];
        let spec = PatternSpec::sample(kind, h, w, &mut rng);
        draw_pattern(&mut canvas, &spec)?;
    }
    Ok(canvas)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SigmaMode {
    Constant,
    Ramp,
    SmoothRandom,
}

impl SigmaMode {
    pub const ALL: [SigmaMode; 3] = [SigmaMode::Constant, SigmaMode::Ramp, SigmaMode::SmoothRandom];

    pub fn name(self) -> &'static str {
        match self {
            SigmaMode::Constant => "constant",
            SigmaMode::Ramp => "ramp",
            SigmaMode::SmoothRandom => "smooth_random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Per-pixel Gaussian standard deviations, in pixels, stored as `[H, W, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaMap {
    pub values: Tensor,
    pub min: f64,
    pub max: f64,
}

impl SigmaMap {
    pub fn constant(h: usize, w: usize, sigma: f64) -> Result<Self> {
        gen_sigma_map(SigmaMode::Constant, sigma, sigma, h, w, 0)
    }

    pub fn from_values(values: Tensor) -> Result<Self> {
        let min = values.data().iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.rank() != 3 || values.shape()[2] != 1 || min < 0.0 {
            return Err(Error::contract("sigma map must be [H, W, 1] with non-negative entries"));
        }
        Ok(Self { values, min, max })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values.data()[y * self.values.shape()[1] + x]
    }
}

pub fn gen_sigma_map(mode: SigmaMode, min: f64, max: f64, h: usize, w: usize, seed: u64) -> Result<SigmaMap> {
    if !(0.0 <= min && min <= max) || !max.is_finite() {
        return Err(Error::contract(format!(
            "sigma range requires 0 <= sigma_min <= sigma_max, got [{min}, {max}]"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::contract("sigma map needs a non-empty grid"));
    }
    let data = match mode {
        SigmaMode::Constant => vec![min; h * w],
        SigmaMode::Ramp => {
            let row: Vec<f64> = (0..w)
                .map(|j| {
                    if w == 1 {
                        min
                    } else {
                        min + (max - min) * j as f64 / (w - 1) as f64
                    }
                })
                .collect();
            (0..h).flat_map(|_| row.iter().copied()).collect()
        }
        SigmaMode::SmoothRandom => {
            let mut rng = rng_for(seed);
            let noise: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
            let smooth = separable_gaussian(&noise, h, w, h.max(w) as f64 / 6.0);
            let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                smooth
                    .iter()
                    .map(|v| {
                        let t = (v - lo) / (hi - lo);
                        if t >= 1.0 {
                            max
                        } else {
                            min + (max - min) * t
                        }
                    })
                    .collect()
            } else {
                vec![min; h * w]
            }
        }
    };
    Ok(SigmaMap {
        values: Tensor::new([h, w, 1], data)?,
        min,
        max,
    })
}

/// Mirror index into `0..n` without repeating the edge sample, for any offset.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn separable_gaussian(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .zip(&k)
                .map(|(t, kv)| kv * src[y * w + reflect(x as isize + t, w)])
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .zip(&k)
                .map(|(t, kv)| kv * tmp[reflect(y as isize + t, h) * w + x])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlurConfig {
    /// Kernel support radius in units of σ.
    pub truncation: f64,
    /// Normalise each gathered kernel to unit mass.
    pub normalize: bool,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self {
            truncation: 3.0,
            normalize: true,
        }
    }
}

/// Spatially varying Gaussian blur of a `[H, W, C]` image.
///
/// Every output pixel gathers a window of radius `⌈truncation·σ⌉` around
/// itself with isotropic Gaussian weights at its own σ; the input is
/// reflect-padded so the window never loses mass.
pub fn blur(sharp: &Tensor, sigma: &SigmaMap, cfg: &BlurConfig) -> Result<Tensor> {
    let (h, w, c) = match sharp.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::contract(format!("image must be [H, W, C], got {s:?}"))),
    };
    if sigma.values.shape() != [h, w, 1] {
        return Err(Error::Shape {
            op: "blur",
            lhs: sharp.shape().to_vec(),
            rhs: sigma.values.shape().to_vec(),
        });
    }
    if cfg.truncation < 2.0 {
        return Err(Error::contract(format!("truncation {} < 2", cfg.truncation)));
    }
    let src = sharp.data();
    let mut out = vec![0.0; src.len()];
    let mut acc = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let s = sigma.at(y, x);
            let dst = &mut out[(y * w + x) * c..(y * w + x + 1) * c];
            if s < IDENTITY_SIGMA {
                dst.copy_from_slice(&src[(y * w + x) * c..(y * w + x + 1) * c]);
                continue;
            }
            let r = (cfg.truncation * s).ceil() as isize;
            let inv = 1.0 / (2.0 * s * s);
            acc.fill(0.0);
            let mut mass = 0.0;
            for dy in -r..=r {
                let sy = reflect(y as isize + dy, h);
                for dx in -r..=r {
                    let wgt = (-((dy * dy + dx * dx) as f64) * inv).exp();
                    mass += wgt;
                    let sx = reflect(x as isize + dx, w);
                    let px = &src[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                    for (a, v) in acc.iter_mut().zip(px) {
                        *a += wgt * v;
                    }
                }
            }
            let norm = if cfg.normalize {
                1.0 / mass
            } else {
                1.0 / (2.0 * std::f64::consts::PI * s * s)
            };
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = a * norm;
            }
        }
    }
    Tensor::new([h, w, c], out)
}

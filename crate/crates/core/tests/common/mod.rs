#![allow(dead_code)]

use dgno::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_unit(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

/// Direct O(N²) 2-D DFT of a real `h×w` image: (re, im) per bin.
pub fn naive_dft(x: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for a in 0..h {
                for b in 0..w {
                    let ang = -2.0
                        * std::f64::consts::PI
                        * ((u * a) as f64 / h as f64 + (v * b) as f64 / w as f64);
                    re += x[a * w + b] * ang.cos();
                    im += x[a * w + b] * ang.sin();
                }
            }
            out.push((re, im));
        }
    }
    out
}

/// Layernorm of one row, written out from the formula.
pub fn layernorm_row(row: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    row.iter().map(|v| (v - mu) / (var + eps).sqrt()).collect()
}

//! Unnormalised 2D discrete Fourier transforms over row-major grids.
//!
//! Spectra are stored as `[H, W, 2]` tensors holding (re, im) pairs.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place 2D transform of a row-major `h×w` complex grid. `inverse` selects
/// the `e^{+iθ}` kernel; neither direction is scaled.
pub(crate) fn fft2_in_place(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let (row, col) = if inverse {
            (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
        } else {
            (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
        };
        // rows are contiguous
        row.process(buf);
        let mut column = vec![Complex::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                column[i] = buf[i * w + j];
            }
            col.process(&mut column);
            for i in 0..h {
                buf[i * w + j] = column[i];
            }
        }
    });
}

pub(crate) fn real_to_complex(data: &[f64]) -> Vec<Complex<f64>> {
    data.iter().map(|&v| Complex::new(v, 0.0)).collect()
}

pub(crate) fn interleave(buf: &[Complex<f64>]) -> Vec<f64> {
    buf.iter().flat_map(|c| [c.re, c.im]).collect()
}

pub(crate) fn deinterleave(data: &[f64]) -> Vec<Complex<f64>> {
    data.chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect()
}

/// Forward DFT of a real `[H, W]` image, returned as `[H, W, 2]`.
pub fn fft2(x: &Tensor) -> Result<Tensor> {
    let [h, w] = grid_extents(x)?;
    let mut buf = real_to_complex(x.data());
    fft2_in_place(&mut buf, h, w, false);
    Ok(Tensor::from_parts(vec![h, w, 2], interleave(&buf)))
}

/// Inverse DFT of an `[H, W, 2]` spectrum, scaled by `1/(H·W)` so that it
/// undoes [`fft2`]. Returns the complex result as `[H, W, 2]`.
pub fn ifft2(spectrum: &Tensor) -> Result<Tensor> {
    let shape = spectrum.shape();
    if shape.len() != 3 || shape[2] != 2 {
        return Err(Error::Shape {
            op: "ifft2",
            lhs: shape.to_vec(),
            rhs: vec![0, 0, 2],
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let mut buf = deinterleave(spectrum.data());
    fft2_in_place(&mut buf, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    for c in &mut buf {
        *c *= scale;
    }
    Ok(Tensor::from_parts(vec![h, w, 2], interleave(&buf)))
}

fn grid_extents(x: &Tensor) -> Result<[usize; 2]> {
    match x.shape() {
        &[h, w] if h >= 1 && w >= 1 => Ok([h, w]),
        s => Err(Error::Shape {
            op: "fft2",
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

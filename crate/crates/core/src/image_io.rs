//! `F32G` raw image files and 8-bit PGM previews.
//!
//! An `F32G` file is the ASCII header `F32G H W C\n` followed by `H·W·C`
//! little-endian `f64` values, row-major with the channel index fastest.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode_f32g(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = hwc(image)?;
    let mut out = format!("F32G {h} {w} {c}\n").into_bytes();
    out.reserve(image.len() * 8);
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_f32g(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not ASCII"))?;
    let mut parts = header.split(' ');
    if parts.next() != Some("F32G") {
        return Err(bad("magic is not F32G"));
    }
    let dims: Vec<usize> = parts
        .map(|p| p.parse().map_err(|_| bad("bad extent in header")))
        .collect::<Result<_>>()?;
    let [h, w, c] = dims[..] else {
        return Err(bad("header needs H W C"));
    };
    let payload = &bytes[nl + 1..];
    if payload.len() != h * w * c * 8 {
        return Err(bad(&format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            h * w * c * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new([h, w, c], data).map_err(|e| bad(&e.to_string()))
}

pub fn write_f32g(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_f32g(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32g(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32g(&bytes, path)
}

/// Writes channel 0 as a binary PGM, mapping `[lo, hi]` to `0..=255`.
pub fn write_pgm(path: &Path, image: &Tensor, lo: f64, hi: f64) -> Result<()> {
    let (h, w, c) = hwc(image)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    for px in image.data().chunks_exact(c) {
        let v = ((px[0] - lo) / span).clamp(0.0, 1.0);
        out.push((v * 255.0).round() as u8);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn hwc(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[h, w, c] => Ok((h, w, c)),
        &[h, w] => Ok((h, w, 1)),
        s => Err(Error::contract(format!("image must be [H, W, C], got {s:?}"))),
    }
}

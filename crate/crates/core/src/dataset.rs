//! Persisted (sharp, blurred, σ-map) triples with a CSV manifest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image_io::{read_f32g, write_f32g};
use crate::synth::{blur, derive_seed, gen_scene, gen_sigma_map, BlurConfig, PatternKind, SigmaMap, SigmaMode};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "id,sharp_path,blur_path,sigma_path,seed,sigma_min,sigma_max";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub kinds: Vec<PatternKind>,
    pub shapes_per_image: usize,
    pub sigma_mode: SigmaMode,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub blur: BlurConfig,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 50,
            height: 64,
            width: 64,
            kinds: PatternKind::ALL.to_vec(),
            shapes_per_image: 4,
            sigma_mode: SigmaMode::SmoothRandom,
            sigma_min: 1.0,
            sigma_max: 4.0,
            blur: BlurConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub sharp: Tensor,
    pub blurred: Tensor,
    pub sigma: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: usize,
    pub sharp_path: String,
    pub blur_path: String,
    pub sigma_path: String,
    pub seed: u64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Builds sample `index` of `spec` in memory; identical to what
/// [`gen_dataset`] writes.
pub fn gen_sample(spec: &DatasetSpec, index: usize) -> Result<(Sample, u64)> {
    let seed = derive_seed(spec.seed, index as u64);
    let sharp = gen_scene(&spec.kinds, spec.shapes_per_image, spec.height, spec.width, seed)?;
    let sigma: SigmaMap = gen_sigma_map(
        spec.sigma_mode,
        spec.sigma_min,
        spec.sigma_max,
        spec.height,
        spec.width,
        derive_seed(seed, 0x5167_6d61),
    )?;
    let blurred = blur(&sharp, &sigma, &spec.blur)?;
    Ok((
        Sample {
            id: index,
            sharp,
            blurred,
            sigma: sigma.values,
        },
        seed,
    ))
}

pub fn gen_dataset(dir: &Path, spec: &DatasetSpec) -> Result<Vec<ManifestRow>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let (sample, seed) = gen_sample(spec, i)?;
        let row = ManifestRow {
            id: i,
            sharp_path: format!("sharp_{i:04}.f32g"),
            blur_path: format!("blur_{i:04}.f32g"),
            sigma_path: format!("sigma_{i:04}.f32g"),
            seed,
            sigma_min: spec.sigma_min,
            sigma_max: spec.sigma_max,
        };
        write_f32g(&dir.join(&row.sharp_path), &sample.sharp)?;
        write_f32g(&dir.join(&row.blur_path), &sample.blurred)?;
        write_f32g(&dir.join(&row.sigma_path), &sample.sigma)?;
        rows.push(row);
    }
    write_manifest(&dir.join(MANIFEST_NAME), &rows)?;
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.id, r.sharp_path, r.blur_path, r.sigma_path, r.seed, r.sigma_min, r.sigma_max
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(bad(1, "unexpected manifest header"));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().map(|(i, l)| (i + 2, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(n, "expected 7 fields"));
        }
        rows.push(ManifestRow {
            id: f[0].parse().map_err(|_| bad(n, "bad id"))?,
            sharp_path: f[1].to_string(),
            blur_path: f[2].to_string(),
            sigma_path: f[3].to_string(),
            seed: f[4].parse().map_err(|_| bad(n, "bad seed"))?,
            sigma_min: f[5].parse().map_err(|_| bad(n, "bad sigma_min"))?,
            sigma_max: f[6].parse().map_err(|_| bad(n, "bad sigma_max"))?,
        });
    }
    Ok(rows)
}

/// Loads every triple listed in `dir/manifest.csv`.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let rows = read_manifest(&dir.join(MANIFEST_NAME))?;
    let resolve = |p: &str| -> PathBuf { dir.join(p) };
    rows.iter()
        .map(|r| {
            let sample = Sample {
                id: r.id,
                sharp: read_f32g(&resolve(&r.sharp_path))?,
                blurred: read_f32g(&resolve(&r.blur_path))?,
                sigma: read_f32g(&resolve(&r.sigma_path))?,
            };
            if sample.sharp.shape() != sample.blurred.shape() {
                return Err(Error::Format {
                    path: resolve(&r.blur_path),
                    msg: format!(
                        "shape {:?} differs from sharp image {:?}",
                        sample.blurred.shape(),
                        sample.sharp.shape()
                    ),
                });
            }
            Ok(sample)
        })
        .collect()
}

//! Mini-batch training with flip augmentation, and dataset evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::save_checkpoint;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::loss::{loss, LossConfig};
use crate::metrics::{image_metrics, EdgeBandParams, MetricReport};
use crate::model::Model;
use crate::optim::{adamw_step, cosine_lr, AdamWConfig, LrSchedule, OptimizerState};
use crate::synth::{derive_seed, rng_for};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "epoch,step,lr,train_loss,val_psnr";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    /// `total_steps` is replaced by `epochs · ⌈n/batch⌉` when training starts.
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Random horizontal and vertical flips of each training pair.
    pub augment: bool,
    /// Where to keep the latest good checkpoint, rewritten after each epoch.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            schedule: LrSchedule::default(),
            optimizer: AdamWConfig::default(),
            epochs: 40,
            batch: 4,
            seed: 0,
            augment: true,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch.max(1))
    }

    pub fn total_steps(&self, samples: usize) -> u64 {
        (self.epochs * self.steps_per_epoch(samples)) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    /// Optimizer steps completed by the end of the epoch.
    pub step: u64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    /// Mean PSNR on the validation set, when one was given.
    pub val_psnr: Option<f64>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let val = r.val_psnr.map_or(String::from("nan"), |v| v.to_string());
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.step, r.lr, r.train_loss, val);
    }
    s
}

pub fn flip_horizontal(x: &Tensor) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for xx in (0..w).rev() {
            out.extend_from_slice(&src[(y * w + xx) * c..(y * w + xx + 1) * c]);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn flip_vertical(x: &Tensor) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let row = w * c;
    let src = x.data();
    let out = (0..h).rev().flat_map(|y| src[y * row..(y + 1) * row].iter().copied()).collect();
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Loss of one pair; gradients are accumulated into the model with `weight`.
pub fn accumulate_sample(model: &mut Model, blurred: &Tensor, sharp: &Tensor, cfg: &LossConfig, weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes = model.forward(&mut tape, blurred)?;
    let target = tape.constant(sharp.clone());
    let l = loss(&mut tape, nodes.prediction, target, cfg)?;
    let value = tape.value(l).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss ({value})")));
    }
    let grads = tape.backward(l)?;
    model.params.accumulate(&grads, weight);
    Ok(value)
}

/// Trains `model` in place and returns one log row per epoch.
///
/// On a non-finite loss or gradient the parameters are rolled back to the end
/// of the last completed epoch, written to the checkpoint path if one is set,
/// and the error is returned.
pub fn train(
    model: &mut Model,
    data: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if cfg.batch == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    model.config.validate()?;
    cfg.loss.validate()?;
    let schedule = LrSchedule {
        total_steps: cfg.total_steps(data.len()),
        ..cfg.schedule
    };
    schedule.validate()?;

    let mut state = OptimizerState::new(&model.params, cfg.optimizer);
    let mut last_good = model.params.clone();
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut lr = schedule.lr0;
        for chunk in order.chunks(cfg.batch) {
            lr = cosine_lr(state.step, &schedule);
            model.params.zero_grad();
            let weight = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            let outcome: Result<()> = (|| {
                for &i in chunk {
                    let (mut x, mut y) = (data[i].blurred.clone(), data[i].sharp.clone());
                    if cfg.augment {
                        if rng.gen_bool(0.5) {
                            x = flip_horizontal(&x);
                            y = flip_horizontal(&y);
                        }
                        if rng.gen_bool(0.5) {
                            x = flip_vertical(&x);
                            y = flip_vertical(&y);
                        }
                    }
                    batch_loss += weight * accumulate_sample(model, &x, &y, &cfg.loss, weight)?;
                }
                adamw_step(&mut model.params, &mut state, lr)
            })();
            if let Err(e) = outcome {
                model.params = last_good;
                if let Some(path) = &cfg.checkpoint {
                    save_checkpoint(path, model)?;
                }
                return Err(Error::NonFinite(format!(
                    "{e}; training aborted in epoch {epoch}, parameters restored to the end of epoch {}",
                    epoch as isize - 1
                )));
            }
            loss_sum += batch_loss;
            batches += 1;
        }
        let val_psnr = if validation.is_empty() {
            None
        } else {
            Some(evaluate(model, validation, &EdgeBandParams::default())?.mean.psnr)
        };
        let row = LogRow {
            epoch,
            step: state.step,
            lr,
            train_loss: loss_sum / batches as f64,
            val_psnr,
        };
        observer(&row);
        rows.push(row);
        last_good = model.params.clone();
        if let Some(path) = &cfg.checkpoint {
            save_checkpoint(path, model)?;
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRow {
    pub id: usize,
    pub metrics: MetricReport,
}

/// Arithmetic means over the per-image rows; edge and interior means skip
/// images where the region is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub edge_psnr: Option<f64>,
    pub interior_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ImageRow>,
    pub mean: Aggregate,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ImageRow>) -> Self {
        let mean = Aggregate {
            psnr: mean_of(rows.iter().map(|r| r.metrics.psnr.db)).unwrap_or(f64::NAN),
            ssim: mean_of(rows.iter().map(|r| r.metrics.ssim)).unwrap_or(f64::NAN),
            edge_psnr: mean_of(rows.iter().filter_map(|r| r.metrics.edge.map(|p| p.db))),
            interior_psnr: mean_of(rows.iter().filter_map(|r| r.metrics.interior.map(|p| p.db))),
        };
        Self { rows, mean }
    }

    /// Per-image CSV with a trailing `mean` row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::from("nan"), |v| v.to_string());
        let mut s = String::from("image_id,psnr,ssim,edge_psnr,interior_psnr\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.id,
                m.psnr.db,
                m.ssim,
                opt(m.edge.map(|p| p.db)),
                opt(m.interior.map(|p| p.db))
            );
        }
        let _ = writeln!(
            s,
            "mean,{},{},{},{}",
            self.mean.psnr,
            self.mean.ssim,
            opt(self.mean.edge_psnr),
            opt(self.mean.interior_psnr)
        );
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores arbitrary predictions against the sharp images of `samples`.
pub fn evaluate_predictions(predictions: &[Tensor], samples: &[Sample], band: &EdgeBandParams) -> Result<EvalReport> {
    if predictions.len() != samples.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let rows = predictions
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            Ok(ImageRow {
                id: s.id,
                metrics: image_metrics(p, &s.sharp, band)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows))
}

pub fn evaluate(model: &Model, samples: &[Sample], band: &EdgeBandParams) -> Result<EvalReport> {
    let preds = samples.iter().map(|s| model.predict(&s.blurred)).collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&preds, samples, band)
}

/// Scores the blurred inputs themselves: the identity-restoration baseline.
pub fn evaluate_blurred(samples: &[Sample], band: &EdgeBandParams) -> Result<EvalReport> {
    let preds: Vec<Tensor> = samples.iter().map(|s| s.blurred.clone()).collect();
    evaluate_predictions(&preds, samples, band)
}

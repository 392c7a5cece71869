//! Subcommand implementations. Each writes its outputs under the configured
//! output directory and returns a short human-readable summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dgno::checkpoint::{load_model, save_checkpoint};
use dgno::dataset::{gen_dataset, load_dataset, Sample};
use dgno::dg::{FluxKind, OperatorVariant};
use dgno::gradcheck::grad_check;
use dgno::image_io::{write_f32g, write_pgm};
use dgno::loss::loss;
use dgno::metrics::effective_rank;
use dgno::model::{forward_model, Model, ModelConfig};
use dgno::synth::{derive_seed, rng_for};
use dgno::tape::Tape;
use dgno::train::{evaluate, evaluate_blurred, log_csv, train, EvalReport, LogRow};
use dgno::{BoundaryCondition, Tensor};
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::CliError;

pub const TRAIN_DIR: &str = "train";
pub const TEST_DIR: &str = "test";
pub const RANK_HEADER: &str = "scale,step,variant,r_eff,d,utilization";
pub const ABLATION_HEADER: &str = "setting,status,psnr,ssim,edge_psnr,interior_psnr";
pub const COMPARE_HEADER: &str =
    "row,variant,image_id,psnr,ssim,edge_psnr,interior_psnr,psnr_delta_vs_gg,edge_delta_vs_gg";

/// Seeds of the training and test splits derived from the dataset seed.
pub fn split_seeds(seed: u64) -> (u64, u64) {
    (derive_seed(seed, 0), derive_seed(seed, 1))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or("nan".to_string(), |v| v.to_string())
}

/// Quotes a CSV field when it contains a separator or quote.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_string()
    }
}

pub struct Splits {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn load_splits(data: &Path) -> Result<Splits, CliError> {
    Ok(Splits {
        train: load_dataset(&data.join(TRAIN_DIR))?,
        test: load_dataset(&data.join(TEST_DIR))?,
    })
}

pub fn gen(cfg: &ExperimentConfig, data: &Path) -> Result<String, CliError> {
    let d = &cfg.dataset;
    let (train_seed, test_seed) = split_seeds(d.seed);
    gen_dataset(&data.join(TRAIN_DIR), &d.spec(d.train_count, train_seed))?;
    gen_dataset(&data.join(TEST_DIR), &d.spec(d.test_count, test_seed))?;
    Ok(format!(
        "wrote {} training and {} test images to {}",
        d.train_count,
        d.test_count,
        data.display()
    ))
}

fn progress(label: String) -> impl FnMut(&LogRow) {
    move |r| {
        let val = r.val_psnr.map_or(String::new(), |v| format!(" val_psnr {v:.3}"));
        eprintln!(
            "[{label}] epoch {} step {} lr {:.3e} loss {:.5}{val}",
            r.epoch, r.step, r.lr, r.train_loss
        );
    }
}

/// Trains one model and returns it with its log.
fn fit(
    cfg: &ExperimentConfig,
    model_cfg: ModelConfig,
    splits: &Splits,
    validate: bool,
    checkpoint: Option<PathBuf>,
    label: &str,
) -> Result<(Model, Vec<LogRow>), CliError> {
    let mut model = Model::new(model_cfg)?;
    let train_cfg = cfg.training.train_config(checkpoint);
    let val: &[Sample] = if validate { &splits.test } else { &[] };
    let log = train(&mut model, &splits.train, val, &train_cfg, progress(label.to_string()))?;
    Ok((model, log))
}

pub fn train_cmd(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<String, CliError> {
    let splits = load_splits(data)?;
    let dir = out.join("train");
    create_dir(&dir)?;
    let ckpt = dir.join("model.ckpt");
    let model_cfg = cfg.model.model_config();
    let (_, log) = fit(cfg, model_cfg, &splits, true, Some(ckpt.clone()), model_cfg.variant.name())?;
    write(&dir.join("log.csv"), &log_csv(&log))?;
    let last = log.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
    Ok(format!("final train loss {last:.5}; checkpoint {}", ckpt.display()))
}

fn save_image(path: &Path, image: &Tensor, pgm: bool) -> Result<(), CliError> {
    write_f32g(path, image)?;
    if pgm {
        write_pgm(&path.with_extension("pgm"), image, 0.0, 1.0)?;
    }
    Ok(())
}

pub fn eval_cmd(cfg: &ExperimentConfig, data: &Path, out: &Path, checkpoint: &Path) -> Result<String, CliError> {
    let model = load_model(checkpoint, cfg.model.model_config())?;
    let test = load_dataset(&data.join(TEST_DIR))?;
    let dir = out.join("eval");
    create_dir(&dir)?;
    let report = evaluate(&model, &test, &cfg.metrics)?;
    let baseline = evaluate_blurred(&test, &cfg.metrics)?;
    report.write_csv(&dir.join("metrics.csv"))?;
    baseline.write_csv(&dir.join("baseline.csv"))?;
    for s in &test {
        let pred = model.predict(&s.blurred)?;
        save_image(&dir.join(format!("restored_{:04}.f32g", s.id)), &pred, cfg.outputs.pgm)?;
    }
    Ok(format!(
        "mean PSNR {:.3} dB (blurred input {:.3} dB), SSIM {:.4}",
        report.mean.psnr, baseline.mean.psnr, report.mean.ssim
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationAxis {
    /// Every flux kind under every boundary condition.
    FluxBc,
    /// The four operator variants.
    Variant,
    /// Element sizes 4, 8, 16, 32 against 1 to 4 layers.
    ElementSize,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::FluxBc => "flux_bc",
            AblationAxis::Variant => "variant",
            AblationAxis::ElementSize => "element_size",
        }
    }

    /// Grid cells in report order.
    pub fn cells(self, cfg: &ExperimentConfig) -> Vec<(String, ModelConfig)> {
        let m = &cfg.model;
        match self {
            AblationAxis::FluxBc => FluxKind::ALL
                .iter()
                .flat_map(|&kind| {
                    BoundaryCondition::ALL.iter().map(move |&bc| {
                        let mut mc = m.model_config();
                        mc.flux.kind = kind;
                        mc.flux.bc = bc;
                        (format!("flux={};bc={}", kind.name(), bc.name()), mc)
                    })
                })
                .collect(),
            AblationAxis::Variant => OperatorVariant::ALL
                .iter()
                .map(|&v| (format!("variant={}", v.name()), m.config_for(v)))
                .collect(),
            AblationAxis::ElementSize => [4, 8, 16, 32]
                .iter()
                .flat_map(|&p| {
                    (1..=4).map(move |t| {
                        let mc = ModelConfig {
                            element_size: p,
                            layers: t,
                            ..m.model_config()
                        };
                        (format!("element_size={p};layers={t}"), mc)
                    })
                })
                .collect(),
        }
    }
}

/// Trains and evaluates every cell of `axis`; a failing cell becomes an
/// error row and the grid continues.
pub fn ablate(cfg: &ExperimentConfig, data: &Path, out: &Path, axis: AblationAxis) -> Result<String, CliError> {
    let splits = load_splits(data)?;
    let dir = out.join("ablate");
    create_dir(&dir)?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut failures = 0;
    for (setting, mc) in axis.cells(cfg) {
        let outcome = fit(cfg, mc, &splits, false, None, &setting)
            .and_then(|(model, _)| Ok(evaluate(&model, &splits.test, &cfg.metrics)?));
        match outcome {
            Ok(r) => {
                let _ = writeln!(
                    csv,
                    "{},ok,{},{},{},{}",
                    csv_field(&setting),
                    r.mean.psnr,
                    r.mean.ssim,
                    opt(r.mean.edge_psnr),
                    opt(r.mean.interior_psnr)
                );
            }
            Err(e) => {
                failures += 1;
                let _ = writeln!(csv, "{},{},nan,nan,nan,nan", csv_field(&setting), csv_field(&format!("error: {e}")));
            }
        }
    }
    let path = dir.join(format!("{}.csv", axis.name()));
    write(&path, &csv)?;
    Ok(format!("{} ablation written to {} ({failures} failed cells)", axis.name(), path.display()))
}

/// Mean effective rank of each operator step's latent matrix over `samples`.
pub fn rank_rows(model: &Model, samples: &[Sample]) -> Result<Vec<(usize, f64, usize)>, CliError> {
    let mut sums: Vec<f64> = Vec::new();
    let mut d = 0;
    for s in samples {
        let traj = model.latent_trajectory(&s.blurred)?;
        sums.resize(traj.len(), 0.0);
        for (t, z) in traj.iter().enumerate() {
            d = z.shape()[1];
            sums[t] += effective_rank(z)?.value;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(sums.into_iter().enumerate().map(|(t, s)| (t, s / n, d)).collect())
}

fn rank_csv_rows(csv: &mut String, variant: &str, rows: &[(usize, f64, usize)]) {
    for &(step, r, d) in rows {
        let _ = writeln!(csv, "0,{step},{variant},{r},{d},{}", r / d as f64);
    }
}

pub fn rank_cmd(cfg: &ExperimentConfig, data: &Path, out: &Path, checkpoint: &Path) -> Result<String, CliError> {
    let model = load_model(checkpoint, cfg.model.model_config())?;
    let test = load_dataset(&data.join(TEST_DIR))?;
    let dir = out.join("rank");
    create_dir(&dir)?;
    let rows = rank_rows(&model, &test)?;
    let mut csv = format!("{RANK_HEADER}\n");
    rank_csv_rows(&mut csv, model.config.variant.name(), &rows);
    let path = dir.join("rank.csv");
    write(&path, &csv)?;
    Ok(format!("effective rank for {} steps written to {}", rows.len(), path.display()))
}

pub const COMPARED: [OperatorVariant; 3] = [OperatorVariant::Global, OperatorVariant::Face, OperatorVariant::Cell];

/// Trains the global baseline and both DG variants under one budget and
/// seed, then reports PSNR deltas, effective ranks and residual differences
/// `|e_GG| − |e_DG|`.
pub fn compare(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<String, CliError> {
    let splits = load_splits(data)?;
    let dir = out.join("compare");
    create_dir(&dir)?;
    let mut reports: Vec<(OperatorVariant, EvalReport, Vec<Tensor>)> = Vec::new();
    let mut rank = format!("{RANK_HEADER}\n");
    for v in COMPARED {
        let (model, log) = fit(cfg, cfg.model.config_for(v), &splits, false, None, v.name())?;
        write(&dir.join(format!("log_{}.csv", v.name())), &log_csv(&log))?;
        save_checkpoint(&dir.join(format!("{}.ckpt", v.name())), &model)?;
        let report = evaluate(&model, &splits.test, &cfg.metrics)?;
        let preds = splits.test.iter().map(|s| model.predict(&s.blurred)).collect::<Result<Vec<_>, _>>()?;
        rank_csv_rows(&mut rank, v.name(), &rank_rows(&model, &splits.test)?);
        reports.push((v, report, preds));
    }
    write(&dir.join("rank.csv"), &rank)?;

    let (gg, dg) = reports.split_first().expect("three variants");
    let mut csv = format!("{COMPARE_HEADER}\n");
    for (v, r, _) in &reports {
        let _ = writeln!(
            csv,
            "aggregate,{},mean,{},{},{},{},{},{}",
            v.name(),
            r.mean.psnr,
            r.mean.ssim,
            opt(r.mean.edge_psnr),
            opt(r.mean.interior_psnr),
            r.mean.psnr - gg.1.mean.psnr,
            opt(r.mean.edge_psnr.zip(gg.1.mean.edge_psnr).map(|(a, b)| a - b)),
        );
    }
    for (v, r, _) in &reports {
        for (row, base) in r.rows.iter().zip(&gg.1.rows) {
            let m = &row.metrics;
            let _ = writeln!(
                csv,
                "image,{},{},{},{},{},{},{},{}",
                v.name(),
                row.id,
                m.psnr.db,
                m.ssim,
                opt(m.edge.map(|p| p.db)),
                opt(m.interior.map(|p| p.db)),
                m.psnr.db - base.metrics.psnr.db,
                opt(m.edge.zip(base.metrics.edge).map(|(a, b)| a.db - b.db)),
            );
        }
    }
    write(&dir.join("summary.csv"), &csv)?;

    for (v, _, preds) in dg {
        for ((s, p_dg), p_gg) in splits.test.iter().zip(preds).zip(&gg.2) {
            let diff = residual_difference(p_gg, p_dg, &s.sharp)?;
            save_image(
                &dir.join(format!("resdiff_{}_{:04}.f32g", v.name(), s.id)),
                &diff,
                false,
            )?;
        }
    }

    let mut summary = String::new();
    for (v, r, _) in &reports {
        let _ = write!(summary, "{} {:.3} dB  ", v.name(), r.mean.psnr);
    }
    Ok(summary.trim_end().to_string())
}

/// `|gg − sharp| − |dg − sharp|` per pixel; positive where the DG model is
/// closer to the sharp image.
pub fn residual_difference(gg: &Tensor, dg: &Tensor, sharp: &Tensor) -> Result<Tensor, CliError> {
    if gg.shape() != sharp.shape() || dg.shape() != sharp.shape() {
        return Err(CliError::Runtime(dgno::Error::Shape {
            op: "residual_difference",
            lhs: dg.shape().to_vec(),
            rhs: sharp.shape().to_vec(),
        }));
    }
    let data = gg
        .data()
        .iter()
        .zip(dg.data())
        .zip(sharp.data())
        .map(|((a, b), t)| (a - t).abs() - (b - t).abs())
        .collect();
    Ok(Tensor::new(sharp.shape().to_vec(), data)?)
}

pub const GRADCHECK_HEADER: &str = "flux,bc,param,max_rel_error,passed";

/// End-to-end finite-difference check of the configured variant on a small
/// model (16×16, C=8, two heads, p=8, one layer) for every flux and boundary
/// condition.
pub fn gradcheck_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<(String, bool), CliError> {
    let mut rng = rng_for(cfg.model.seed);
    let x = Tensor::new([16, 16, 1], (0..256).map(|_| rng.gen::<f64>()).collect())?;
    let t = Tensor::new([16, 16, 1], (0..256).map(|_| rng.gen::<f64>()).collect())?;
    let loss_cfg = cfg.training.train_config(None).loss;
    let mut csv = format!("{GRADCHECK_HEADER}\n");
    let mut all = true;
    let mut worst: f64 = 0.0;
    for kind in FluxKind::ALL {
        for bc in BoundaryCondition::ALL {
            let mut mc = ModelConfig {
                channels: 8,
                heads: 2,
                element_size: 8,
                layers: 1,
                ..cfg.model.model_config()
            };
            mc.flux.kind = kind;
            mc.flux.bc = bc;
            let mut model = Model::new(mc)?;
            let handles = model.handles.clone();
            let report = grad_check(
                &mut model.params,
                |tape: &mut Tape, s| {
                    let nodes = forward_model(tape, s, &handles, &mc, &x)?;
                    let target = tape.constant(t.clone());
                    loss(tape, nodes.prediction, target, &loss_cfg)
                },
                1e-5,
                5e-4,
            )?;
            for e in &report.entries {
                let _ = writeln!(csv, "{},{},{},{},{}", kind.name(), bc.name(), e.name, e.max_rel_error, e.passed);
            }
            all &= report.passed();
            worst = worst.max(report.max_rel_error());
        }
    }
    let dir = out.join("gradcheck");
    create_dir(&dir)?;
    write(&dir.join("report.csv"), &csv)?;
    let verdict = if all { "passed" } else { "FAILED" };
    Ok((format!("gradient check {verdict}; worst relative error {worst:.3e}"), all))
}

//! Experiment configuration: a strict, flat INI format.
//!
//! ```text
//! # comment
//! [model]
//! variant = face
//! flux = jump
//! ```
//!
//! Every key has a default, unknown sections and keys are rejected, and a key
//! may appear at most once per section.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dgno::dataset::DatasetSpec;
use dgno::dg::{FluxConfig, FluxKind, OperatorVariant, Penalty};
use dgno::loss::LossConfig;
use dgno::metrics::EdgeBandParams;
use dgno::model::ModelConfig;
use dgno::optim::{AdamWConfig, LrSchedule};
use dgno::synth::{BlurConfig, PatternKind, SigmaMode};
use dgno::train::TrainConfig;
use dgno::{Activation, BoundaryCondition};

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSection {
    pub train_count: usize,
    pub test_count: usize,
    pub height: usize,
    pub width: usize,
    pub patterns: Vec<PatternKind>,
    pub shapes_per_image: usize,
    pub sigma_mode: SigmaMode,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub truncation: f64,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        Self {
            train_count: 200,
            test_count: 20,
            height: spec.height,
            width: spec.width,
            patterns: spec.kinds,
            shapes_per_image: spec.shapes_per_image,
            sigma_mode: spec.sigma_mode,
            sigma_min: spec.sigma_min,
            sigma_max: spec.sigma_max,
            truncation: spec.blur.truncation,
            normalize: spec.blur.normalize,
            seed: 0,
        }
    }
}

impl DatasetSection {
    pub fn spec(&self, count: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            count,
            height: self.height,
            width: self.width,
            kinds: self.patterns.clone(),
            shapes_per_image: self.shapes_per_image,
            sigma_mode: self.sigma_mode,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            blur: BlurConfig {
                truncation: self.truncation,
                normalize: self.normalize,
            },
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSection {
    pub variant: OperatorVariant,
    pub channels: usize,
    pub heads: usize,
    pub element_size: usize,
    pub layers: usize,
    /// `None` picks the variant's default flux.
    pub flux: Option<FluxKind>,
    /// `None` picks the variant's default boundary condition.
    pub bc: Option<BoundaryCondition>,
    pub learnable_penalty: bool,
    pub tau: f64,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            variant: m.variant,
            channels: m.channels,
            heads: m.heads,
            element_size: m.element_size,
            layers: m.layers,
            flux: None,
            bc: None,
            learnable_penalty: true,
            tau: m.flux.penalty.initial(),
            activation: m.activation,
            seed: m.seed,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        self.config_for(self.variant)
    }

    /// The configured model with its variant replaced. Unset flux settings
    /// follow the new variant's defaults.
    pub fn config_for(&self, variant: OperatorVariant) -> ModelConfig {
        let base = ModelConfig::for_variant(variant);
        ModelConfig {
            channels: self.channels,
            heads: self.heads,
            element_size: self.element_size,
            layers: self.layers,
            variant,
            flux: FluxConfig {
                kind: self.flux.unwrap_or(base.flux.kind),
                bc: self.bc.unwrap_or(base.flux.bc),
                penalty: if self.learnable_penalty {
                    Penalty::Learnable(self.tau)
                } else {
                    Penalty::Fixed(self.tau)
                },
            },
            activation: self.activation,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub lambda: f64,
    pub scales: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch: t.batch,
            lr0: t.schedule.lr0,
            lr_min: t.schedule.lr_min,
            lambda: t.loss.lambda,
            scales: t.loss.scales,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            weight_decay: t.optimizer.weight_decay,
            eps: t.optimizer.eps,
            augment: t.augment,
            seed: t.seed,
        }
    }
}

impl TrainingSection {
    pub fn train_config(&self, checkpoint: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            loss: LossConfig {
                lambda: self.lambda,
                scales: self.scales,
            },
            schedule: LrSchedule {
                lr0: self.lr0,
                lr_min: self.lr_min,
                total_steps: 0,
            },
            optimizer: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                weight_decay: self.weight_decay,
                eps: self.eps,
            },
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
            augment: self.augment,
            checkpoint,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputsSection {
    pub dir: PathBuf,
    /// Also write 8-bit PGM previews next to F32G images.
    pub pgm: bool,
}

impl Default for OutputsSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            pgm: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub outputs: OutputsSection,
    pub metrics: EdgeBandParams,
}

fn auto<T>(v: Option<T>, name: impl Fn(T) -> &'static str) -> String {
    v.map_or("auto".to_string(), |v| name(v).to_string())
}

impl ExperimentConfig {
    /// Sections with their keys and current values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, Vec<(&'static str, String)>)> {
        let d = &self.dataset;
        let m = &self.model;
        let t = &self.training;
        let patterns: Vec<&str> = d.patterns.iter().map(|k| k.name()).collect();
        vec![
            (
                "dataset",
                vec![
                    ("train_count", d.train_count.to_string()),
                    ("test_count", d.test_count.to_string()),
                    ("height", d.height.to_string()),
                    ("width", d.width.to_string()),
                    ("patterns", patterns.join(",")),
                    ("shapes_per_image", d.shapes_per_image.to_string()),
                    ("sigma_mode", d.sigma_mode.name().to_string()),
                    ("sigma_min", d.sigma_min.to_string()),
                    ("sigma_max", d.sigma_max.to_string()),
                    ("truncation", d.truncation.to_string()),
                    ("normalize", d.normalize.to_string()),
                    ("seed", d.seed.to_string()),
                ],
            ),
            (
                "model",
                vec![
                    ("variant", m.variant.name().to_string()),
                    ("channels", m.channels.to_string()),
                    ("heads", m.heads.to_string()),
                    ("element_size", m.element_size.to_string()),
                    ("layers", m.layers.to_string()),
                    ("flux", auto(m.flux, FluxKind::name)),
                    ("bc", auto(m.bc, BoundaryCondition::name)),
                    ("penalty", if m.learnable_penalty { "learnable" } else { "fixed" }.to_string()),
                    ("tau", m.tau.to_string()),
                    ("activation", m.activation.name().to_string()),
                    ("seed", m.seed.to_string()),
                ],
            ),
            (
                "training",
                vec![
                    ("epochs", t.epochs.to_string()),
                    ("batch", t.batch.to_string()),
                    ("lr0", t.lr0.to_string()),
                    ("lr_min", t.lr_min.to_string()),
                    ("lambda", t.lambda.to_string()),
                    ("scales", t.scales.to_string()),
                    ("beta1", t.beta1.to_string()),
                    ("beta2", t.beta2.to_string()),
                    ("weight_decay", t.weight_decay.to_string()),
                    ("eps", t.eps.to_string()),
                    ("augment", t.augment.to_string()),
                    ("seed", t.seed.to_string()),
                ],
            ),
            (
                "outputs",
                vec![
                    ("dir", self.outputs.dir.display().to_string()),
                    ("pgm", self.outputs.pgm.to_string()),
                ],
            ),
            (
                "metrics",
                vec![
                    ("edge_quantile", self.metrics.quantile.to_string()),
                    ("edge_radius", self.metrics.radius.to_string()),
                ],
            ),
        ]
    }

    /// The configuration as a file that parses back to `self`.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        for (i, (section, keys)) in self.entries().into_iter().enumerate() {
            if i > 0 {
                s.push('\n');
            }
            let _ = writeln!(s, "[{section}]");
            for (k, v) in keys {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        let d = &mut self.dataset;
        let m = &mut self.model;
        let t = &mut self.training;
        match (section, key) {
            ("dataset", "train_count") => d.train_count = num(value)?,
            ("dataset", "test_count") => d.test_count = num(value)?,
            ("dataset", "height") => d.height = num(value)?,
            ("dataset", "width") => d.width = num(value)?,
            ("dataset", "patterns") => {
                d.patterns = value
                    .split(',')
                    .map(|p| {
                        let p = p.trim();
                        PatternKind::parse(p).ok_or_else(|| one_of(p, PatternKind::ALL.map(PatternKind::name)))
                    })
                    .collect::<Result<_, _>>()?
            }
            ("dataset", "shapes_per_image") => d.shapes_per_image = num(value)?,
            ("dataset", "sigma_mode") => {
                d.sigma_mode = SigmaMode::parse(value).ok_or_else(|| one_of(value, SigmaMode::ALL.map(SigmaMode::name)))?
            }
            ("dataset", "sigma_min") => d.sigma_min = num(value)?,
            ("dataset", "sigma_max") => d.sigma_max = num(value)?,
            ("dataset", "truncation") => d.truncation = num(value)?,
            ("dataset", "normalize") => d.normalize = num(value)?,
            ("dataset", "seed") => d.seed = num(value)?,

            ("model", "variant") => {
                m.variant = OperatorVariant::parse(value)
                    .ok_or_else(|| one_of(value, OperatorVariant::ALL.map(OperatorVariant::name)))?
            }
            ("model", "channels") => m.channels = num(value)?,
            ("model", "heads") => m.heads = num(value)?,
            ("model", "element_size") => m.element_size = num(value)?,
            ("model", "layers") => m.layers = num(value)?,
            ("model", "flux") => {
                m.flux = match value {
                    "auto" => None,
                    v => Some(FluxKind::parse(v).ok_or_else(|| one_of(v, FluxKind::ALL.map(FluxKind::name)))?),
                }
            }
            ("model", "bc") => {
                m.bc = match value {
                    "auto" => None,
                    v => Some(
                        BoundaryCondition::parse(v)
                            .ok_or_else(|| one_of(v, BoundaryCondition::ALL.map(BoundaryCondition::name)))?,
                    ),
                }
            }
            ("model", "penalty") => {
                m.learnable_penalty = match value {
                    "learnable" => true,
                    "fixed" => false,
                    v => return Err(one_of(v, ["learnable", "fixed"])),
                }
            }
            ("model", "tau") => m.tau = num(value)?,
            ("model", "activation") => {
                m.activation =
                    Activation::parse(value).ok_or_else(|| one_of(value, Activation::ALL.map(Activation::name)))?
            }
            ("model", "seed") => m.seed = num(value)?,

            ("training", "epochs") => t.epochs = num(value)?,
            ("training", "batch") => t.batch = num(value)?,
            ("training", "lr0") => t.lr0 = num(value)?,
            ("training", "lr_min") => t.lr_min = num(value)?,
            ("training", "lambda") => t.lambda = num(value)?,
            ("training", "scales") => t.scales = num(value)?,
            ("training", "beta1") => t.beta1 = num(value)?,
            ("training", "beta2") => t.beta2 = num(value)?,
            ("training", "weight_decay") => t.weight_decay = num(value)?,
            ("training", "eps") => t.eps = num(value)?,
            ("training", "augment") => t.augment = num(value)?,
            ("training", "seed") => t.seed = num(value)?,

            ("outputs", "dir") => {
                if value.is_empty() {
                    return Err("empty output directory".to_string());
                }
                self.outputs.dir = PathBuf::from(value)
            }
            ("outputs", "pgm") => self.outputs.pgm = num(value)?,

            ("metrics", "edge_quantile") => self.metrics.quantile = num(value)?,
            ("metrics", "edge_radius") => self.metrics.radius = num(value)?,

            _ => return Err(format!("unknown key `{key}` in [{section}]")),
        }
        Ok(())
    }

    /// Cross-field checks that a single key cannot catch.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        let d = &self.dataset;
        if d.train_count == 0 {
            problems.push("dataset.train_count must be positive".to_string());
        }
        if d.patterns.is_empty() {
            problems.push("dataset.patterns is empty".to_string());
        }
        if !(d.sigma_min >= 0.0 && d.sigma_max >= d.sigma_min && d.sigma_max.is_finite()) {
            problems.push(format!(
                "dataset sigma range [{}, {}] is invalid",
                d.sigma_min, d.sigma_max
            ));
        }
        if !(d.truncation >= 2.0 && d.truncation.is_finite()) {
            problems.push(format!("dataset.truncation must be at least 2, got {}", d.truncation));
        }
        if let Err(e) = self.model.model_config().validate() {
            problems.push(format!("model: {e}"));
        }
        let t = &self.training;
        if t.batch == 0 {
            problems.push("training.batch must be positive".to_string());
        }
        if !(t.lr0 >= t.lr_min && t.lr_min >= 0.0 && t.lr0.is_finite()) {
            problems.push(format!("training learning rates lr0={} lr_min={} are invalid", t.lr0, t.lr_min));
        }
        if let Err(e) = self.training.train_config(None).loss.validate() {
            problems.push(format!("training: {e}"));
        }
        if !(0.0..=1.0).contains(&self.metrics.quantile) {
            problems.push(format!("metrics.edge_quantile {} outside [0, 1]", self.metrics.quantile));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems.join("; ")))
        }
    }
}

fn num<T: std::str::FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

fn one_of<const N: usize>(value: &str, names: [&str; N]) -> String {
    format!("`{value}` is not one of {}", names.join(", "))
}

/// Parses config text; `origin` names the source in diagnostics.
pub fn parse_config_str(text: &str, origin: &str) -> Result<ExperimentConfig, CliError> {
    const SECTIONS: [&str; 5] = ["dataset", "model", "training", "outputs", "metrics"];
    let mut cfg = ExperimentConfig::default();
    let mut section: Option<&str> = None;
    let mut seen: Vec<(&str, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let err = |msg: String| CliError::Config(format!("{origin}:{lineno}: {msg}"));
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(format!("malformed section header `{line}`")))?
                .trim();
            section = Some(
                SECTIONS
                    .into_iter()
                    .find(|s| *s == name)
                    .ok_or_else(|| err(format!("unknown section [{name}]")))?,
            );
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let sec = section.ok_or_else(|| err(format!("key `{key}` before any section header")))?;
        if seen.iter().any(|(s, k)| *s == sec && k == key) {
            return Err(err(format!("duplicate key `{key}` in [{sec}]")));
        }
        seen.push((sec, key.to_string()));
        cfg.set(sec, key, value).map_err(err)?;
    }
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: cannot read config: {e}", path.display())))?;
    parse_config_str(&text, &path.display().to_string())
}

//! TOML experiment configuration.
//!
//! ```toml
//! output_dir = "runs/erk-w64"
//! mask_seed = 1
//! init_seed = 1
//!
//! [network]
//! family = "mlp"        # mlp | convnet | file
//! width = 64
//! depth = 2
//!
//! [dataset]
//! kind = "image_grid"
//! samples = 2000
//! seed = 0
//!
//! [sparsity]
//! method = "erk"
//! level = 0.8
//! ```
//!
//! Relative paths inside the file resolve against the file's directory,
//! except `output_dir`, which resolves against the output root.

use std::path::{Path, PathBuf};

use randprune::arch::{self, NetworkSpec, Shape3};
use randprune::engine::{PruneTail, TrainConfig};
use randprune::eval::{AttackConfig, DEFAULT_ECE_BINS, DEFAULT_FGSM_EPSILON};
use randprune::{Method, MaskMode};
use serde::{Deserialize, Serialize};

use crate::data::DatasetSource;
use crate::error::RunnerError;

/// Environment variable that overrides the directory relative output paths
/// resolve against (default: the working directory).
pub const OUTPUT_ROOT_ENV: &str = "RANDPRUNE_OUTPUT_ROOT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

pub fn resolve_output(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        output_root().join(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSource {
    Mlp { width: usize, depth: usize },
    Convnet { width: usize, depth: usize },
    File { path: PathBuf },
}

impl NetworkSource {
    pub fn width(&self) -> Option<usize> {
        match self {
            NetworkSource::Mlp { width, .. } | NetworkSource::Convnet { width, .. } => Some(*width),
            NetworkSource::File { .. } => None,
        }
    }

    pub fn depth(&self) -> Option<usize> {
        match self {
            NetworkSource::Mlp { depth, .. } | NetworkSource::Convnet { depth, .. } => Some(*depth),
            NetworkSource::File { .. } => None,
        }
    }

    /// Builds the network for a dataset of the given input shape and class
    /// count. Documents loaded from file must agree with both.
    pub fn build(&self, input: Shape3, classes: usize) -> Result<NetworkSpec, RunnerError> {
        let net = match self {
            NetworkSource::Mlp { width, depth } => arch::mlp(input.0 * input.1 * input.2, *width, *depth, classes)?,
            NetworkSource::Convnet { width, depth } => arch::convnet(input, *width, *depth, classes)?,
            NetworkSource::File { path } => {
                let text = std::fs::read_to_string(path).map_err(RunnerError::io(path))?;
                let net = arch::parse_network(&text)?;
                let (c, h, w) = net.input_shape();
                if c * h * w != input.0 * input.1 * input.2 || (net.layers()[0].kind == randprune::LayerKind::Conv && net.input_shape() != input) {
                    return Err(RunnerError::Validation(format!(
                        "network input {c}x{h}x{w} does not match dataset samples {}x{}x{}",
                        input.0, input.1, input.2
                    )));
                }
                if net.class_count() != classes {
                    return Err(RunnerError::Validation(format!("network has {} classes, dataset has {classes}", net.class_count())));
                }
                net
            }
        };
        Ok(net)
    }
}

/// How layer densities are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMethod {
    Uniform,
    UniformPlus,
    Er,
    Erk,
    ErkPlus,
    Snip,
    Grasp,
    /// Densities read from a plan document (`ratio_file`).
    File,
    /// S = 0 uniform plan, tagged as the dense baseline.
    Dense,
}

impl RatioMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            RatioMethod::Uniform => "uniform",
            RatioMethod::UniformPlus => "uniform_plus",
            RatioMethod::Er => "er",
            RatioMethod::Erk => "erk",
            RatioMethod::ErkPlus => "erk_plus",
            RatioMethod::Snip => "snip",
            RatioMethod::Grasp => "grasp",
            RatioMethod::File => "file",
            RatioMethod::Dense => "dense",
        }
    }

    pub fn predefined(&self) -> Option<Method> {
        match self {
            RatioMethod::Uniform => Some(Method::Uniform),
            RatioMethod::UniformPlus => Some(Method::UniformPlus),
            RatioMethod::Er => Some(Method::Er),
            RatioMethod::Erk => Some(Method::Erk),
            RatioMethod::ErkPlus => Some(Method::ErkPlus),
            _ => None,
        }
    }
}

impl std::fmt::Display for RatioMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RatioMethod {
    type Err = RunnerError;

    fn from_str(s: &str) -> Result<Self, RunnerError> {
        let normalized = s.trim().to_ascii_lowercase().replace('+', "_plus").replace('-', "_");
        serde_json::from_value(serde_json::Value::String(normalized)).map_err(|_| RunnerError::Validation(format!("unknown ratio method `{s}`")))
    }
}

fn default_score_samples() -> usize {
    256
}

fn default_grasp_tail() -> PruneTail {
    PruneTail::Highest
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityConfig {
    pub method: RatioMethod,
    /// Target global sparsity S; ignored by `dense` and `file`.
    #[serde(default)]
    pub level: f64,
    #[serde(default)]
    pub ratio_file: Option<PathBuf>,
    /// Tail GraSP prunes; `highest` removes the largest `−w ⊙ Hg`.
    #[serde(default = "default_grasp_tail")]
    pub grasp_tail: PruneTail,
    /// Training samples used for the SNIP/GraSP score pass.
    #[serde(default = "default_score_samples")]
    pub score_samples: usize,
}

/// Overrides on top of the desk training recipe.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub lr_decay_factor: Option<f64>,
    pub decay_milestones: Option<Vec<usize>>,
    pub weight_decay: Option<f64>,
}

impl TrainSection {
    pub fn resolve(&self) -> TrainConfig {
        let d = TrainConfig::desk();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            momentum: self.momentum.unwrap_or(d.momentum),
            lr_decay_factor: self.lr_decay_factor.unwrap_or(d.lr_decay_factor),
            decay_milestones: self.decay_milestones.clone().unwrap_or(d.decay_milestones),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
        }
    }

    pub fn from_config(c: &TrainConfig) -> TrainSection {
        TrainSection {
            epochs: Some(c.epochs),
            batch_size: Some(c.batch_size),
            learning_rate: Some(c.learning_rate),
            momentum: Some(c.momentum),
            lr_decay_factor: Some(c.lr_decay_factor),
            decay_milestones: Some(c.decay_milestones.clone()),
            weight_decay: Some(c.weight_decay),
        }
    }
}

fn yes() -> bool {
    true
}
fn default_bins() -> usize {
    DEFAULT_ECE_BINS
}
fn default_epsilon() -> f64 {
    DEFAULT_FGSM_EPSILON
}
fn default_every() -> usize {
    1
}
fn default_flow_samples() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "yes")]
    pub ece: bool,
    #[serde(default = "yes")]
    pub nll: bool,
    #[serde(default = "yes")]
    pub fgsm: bool,
    #[serde(default = "yes")]
    pub ood: bool,
    #[serde(default = "yes")]
    pub grad_flow: bool,
    #[serde(default = "default_bins")]
    pub ece_bins: usize,
    #[serde(default = "default_epsilon")]
    pub fgsm_epsilon: f64,
    /// Evaluate every this many epochs; the final epoch is always evaluated.
    #[serde(default = "default_every")]
    pub every: usize,
    /// Training samples in the gradient-flow batch.
    #[serde(default = "default_flow_samples")]
    pub grad_flow_samples: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            ece: true,
            nll: true,
            fgsm: true,
            ood: true,
            grad_flow: true,
            ece_bins: DEFAULT_ECE_BINS,
            fgsm_epsilon: DEFAULT_FGSM_EPSILON,
            every: 1,
            grad_flow_samples: 256,
        }
    }
}

impl MetricsConfig {
    /// Only clean accuracy, evaluated once at the end.
    pub fn accuracy_only() -> MetricsConfig {
        MetricsConfig { ece: false, nll: false, fgsm: false, ood: false, grad_flow: false, every: usize::MAX, ..Default::default() }
    }

    pub fn attack(&self) -> AttackConfig {
        AttackConfig { epsilon: self.fgsm_epsilon, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run identifier; derived from method, sparsity, shape and seeds if absent.
    #[serde(default)]
    pub name: Option<String>,
    pub output_dir: PathBuf,
    pub mask_seed: u64,
    pub init_seed: u64,
    #[serde(default)]
    pub mask_mode: MaskMode,
    pub network: NetworkSource,
    pub dataset: DatasetSource,
    pub sparsity: SparsityConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig, RunnerError> {
        toml::from_str(text).map_err(|e| RunnerError::Validation(e.to_string()))
    }

    /// Reads a config file and resolves its relative input paths.
    pub fn load(path: &Path) -> Result<ExperimentConfig, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(RunnerError::io(path))?;
        let mut cfg = ExperimentConfig::from_toml(&text)?;
        cfg.resolve_inputs(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_inputs(&mut self, base: &Path) {
        if let NetworkSource::File { path } = &mut self.network {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if let Some(p) = &mut self.sparsity.ratio_file {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self.dataset.resolve(base);
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.resolve()
    }

    /// Target sparsity as recorded in outputs (0 for the dense baseline).
    pub fn target_sparsity(&self) -> f64 {
        match self.sparsity.method {
            RatioMethod::Dense => 0.0,
            _ => self.sparsity.level,
        }
    }

    pub fn run_id(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let mut id = format!("{}-s{}", self.sparsity.method, self.target_sparsity());
        if let Some(w) = self.network.width() {
            id.push_str(&format!("-w{w}"));
        }
        if let Some(d) = self.network.depth() {
            id.push_str(&format!("-d{d}"));
        }
        id.push_str(&format!("-m{}-i{}", self.mask_seed, self.init_seed));
        id
    }

    /// Checks everything that can be checked without reading datasets:
    /// ranges, toggles, and the existence of every referenced file.
    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: String| Err(RunnerError::Validation(m));
        if self.output_dir.as_os_str().is_empty() {
            return bad("output_dir is empty".into());
        }
        if let Some(name) = &self.name {
            if name.is_empty() || name.contains(['/', '\\']) {
                return bad(format!("run name `{name}` must be non-empty and contain no path separators"));
            }
        }
        match &self.network {
            NetworkSource::Mlp { width, .. } | NetworkSource::Convnet { width, .. } if *width == 0 => return bad("network width must be positive".into()),
            NetworkSource::Convnet { depth: 0, .. } => return bad("convnet depth must be positive".into()),
            NetworkSource::File { path } if !path.is_file() => return bad(format!("network file {} does not exist", path.display())),
            _ => {}
        }
        self.dataset.validate()?;
        let sp = &self.sparsity;
        match sp.method {
            RatioMethod::File => match &sp.ratio_file {
                None => return bad("method `file` needs ratio_file".into()),
                Some(p) if !p.is_file() => return bad(format!("ratio file {} does not exist", p.display())),
                _ => {}
            },
            RatioMethod::Dense => {}
            _ => {
                if !(0.0..1.0).contains(&sp.level) {
                    return bad(format!("sparsity level {} outside [0, 1)", sp.level));
                }
            }
        }
        if matches!(sp.method, RatioMethod::Snip | RatioMethod::Grasp) && sp.score_samples == 0 {
            return bad("score_samples must be positive".into());
        }
        self.train_config().validate()?;
        let m = &self.metrics;
        if m.ece_bins == 0 {
            return bad("ece_bins must be at least 1".into());
        }
        if m.every == 0 {
            return bad("metrics.every must be at least 1".into());
        }
        if m.grad_flow && m.grad_flow_samples == 0 {
            return bad("grad_flow_samples must be positive".into());
        }
        m.attack().validate()?;
        Ok(())
    }
}

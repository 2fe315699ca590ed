//! Grid sweeps over depth, width, sparsity or ratio method.
//!
//! A sweep file names a base experiment and one axis:
//!
//! ```toml
//! base = "base.toml"
//! axis = "width"
//! values = [16, 64, 256]
//! methods = ["uniform", "erk"]
//! sparsity = 0.8
//! repeats = 3
//! ```
//!
//! Each `(axis value, method)` pair is a cell, run `repeats` times with mask
//! and init seeds both offset by the repeat index. Dense baselines are extra
//! cells (one per width/depth value, or a single one for the other axes).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{resolve_output, ExperimentConfig, NetworkSource, RatioMethod};
use crate::error::RunnerError;
use crate::experiment::{self, RunRecord, NA};

/// Default grid for a sparsity sweep.
pub const DEFAULT_SPARSITY_GRID: [f64; 3] = [0.7, 0.5, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Depth,
    Width,
    Sparsity,
    Method,
}

impl Axis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Axis::Depth => "depth",
            Axis::Width => "width",
            Axis::Sparsity => "sparsity",
            Axis::Method => "method",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisValue {
    Size(usize),
    Level(f64),
    Method(RatioMethod),
}

impl std::fmt::Display for AxisValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AxisValue::Size(n) => write!(f, "{n}"),
            AxisValue::Level(s) => write!(f, "{s}"),
            AxisValue::Method(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<AxisValue>,
    /// Methods crossed with every axis value; empty means the base method.
    pub methods: Vec<RatioMethod>,
    /// Overrides the base sparsity level for depth/width/method sweeps.
    pub sparsity: Option<f64>,
    pub repeats: usize,
    pub dense_baseline: bool,
    /// Sweep output root; defaults to the base config's `output_dir`.
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    base: PathBuf,
    axis: Axis,
    #[serde(default)]
    values: Option<Vec<toml::Value>>,
    #[serde(default)]
    methods: Vec<String>,
    #[serde(default)]
    sparsity: Option<f64>,
    #[serde(default = "one")]
    repeats: usize,
    #[serde(default = "yes")]
    dense_baseline: bool,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

fn parse_value(axis: Axis, v: &toml::Value) -> Result<AxisValue, RunnerError> {
    let bad = || RunnerError::Validation(format!("bad {} grid value {v}", axis.as_str()));
    Ok(match axis {
        Axis::Depth | Axis::Width => AxisValue::Size(v.as_integer().filter(|&n| n >= 0).ok_or_else(bad)? as usize),
        Axis::Sparsity => AxisValue::Level(v.as_float().or_else(|| v.as_integer().map(|n| n as f64)).ok_or_else(bad)?),
        Axis::Method => AxisValue::Method(v.as_str().ok_or_else(bad)?.parse()?),
    })
}

impl SweepSpec {
    /// Parses a sweep file and loads its base config (resolved relative to
    /// the sweep file).
    pub fn load(path: &Path) -> Result<(SweepSpec, ExperimentConfig), RunnerError> {
        let text = fs::read_to_string(path).map_err(RunnerError::io(path))?;
        let file: SweepFile = toml::from_str(&text).map_err(|e| RunnerError::Validation(e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let base_path = dir.join(&file.base);
        let base = ExperimentConfig::load(&base_path)?;
        let values = match (&file.values, file.axis) {
            (Some(vs), axis) => vs.iter().map(|v| parse_value(axis, v)).collect::<Result<_, _>>()?,
            (None, Axis::Sparsity) => DEFAULT_SPARSITY_GRID.iter().map(|&s| AxisValue::Level(s)).collect(),
            (None, axis) => return Err(RunnerError::Validation(format!("{} sweep needs `values`", axis.as_str()))),
        };
        let methods = file.methods.iter().map(|m| m.parse()).collect::<Result<_, _>>()?;
        let spec = SweepSpec {
            axis: file.axis,
            values,
            methods,
            sparsity: file.sparsity,
            repeats: file.repeats,
            dense_baseline: file.dense_baseline,
            output_dir: file.output_dir,
        };
        spec.validate()?;
        Ok((spec, base))
    }

    /// A sparsity sweep over the default grid.
    pub fn sparsity_default(methods: Vec<RatioMethod>, repeats: usize) -> SweepSpec {
        SweepSpec {
            axis: Axis::Sparsity,
            values: DEFAULT_SPARSITY_GRID.iter().map(|&s| AxisValue::Level(s)).collect(),
            methods,
            sparsity: None,
            repeats,
            dense_baseline: true,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: String| Err(RunnerError::Validation(m));
        if self.values.is_empty() {
            return bad("sweep grid is empty".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        for v in &self.values {
            let ok = matches!((self.axis, v), (Axis::Depth | Axis::Width, AxisValue::Size(_)) | (Axis::Sparsity, AxisValue::Level(_)) | (Axis::Method, AxisValue::Method(_)));
            if !ok {
                return bad(format!("grid value {v} does not fit a {} sweep", self.axis.as_str()));
            }
        }
        if self.axis == Axis::Method && !self.methods.is_empty() {
            return bad("a method sweep takes its methods from `values`".into());
        }
        Ok(())
    }
}

/// One grid point; its repeats share everything except the seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub axis_value: String,
    pub method: RatioMethod,
    /// Cells in one group share a dense baseline.
    pub group: String,
    pub config: ExperimentConfig,
}

fn set_shape(cfg: &mut ExperimentConfig, axis: Axis, n: usize) -> Result<(), RunnerError> {
    match (&mut cfg.network, axis) {
        (NetworkSource::Mlp { width, .. } | NetworkSource::Convnet { width, .. }, Axis::Width) => *width = n,
        (NetworkSource::Mlp { depth, .. } | NetworkSource::Convnet { depth, .. }, Axis::Depth) => *depth = n,
        _ => return Err(RunnerError::Validation(format!("a {} sweep needs an mlp or convnet base network", axis.as_str()))),
    }
    Ok(())
}

/// Expands the grid into cells, sparse cells first in grid order.
pub fn cells(spec: &SweepSpec, base: &ExperimentConfig) -> Result<Vec<Cell>, RunnerError> {
    spec.validate()?;
    let methods = if spec.methods.is_empty() { vec![base.sparsity.method] } else { spec.methods.clone() };
    let axis = spec.axis;
    let per_value_dense = matches!(axis, Axis::Depth | Axis::Width);
    let mut out = Vec::new();
    let mut dense = Vec::new();
    for v in &spec.values {
        let mut cfg = base.clone();
        if let Some(s) = spec.sparsity {
            cfg.sparsity.level = s;
        }
        match *v {
            AxisValue::Size(n) => set_shape(&mut cfg, axis, n)?,
            AxisValue::Level(s) => cfg.sparsity.level = s,
            AxisValue::Method(_) => {}
        }
        let group = if per_value_dense { v.to_string() } else { "all".to_string() };
        let ms = match v {
            AxisValue::Method(m) => vec![*m],
            _ => methods.clone(),
        };
        for m in ms {
            let mut c = cfg.clone();
            c.sparsity.method = m;
            let id = if axis == Axis::Method { format!("method={m}") } else { format!("{}={v}/{m}", axis.as_str()) };
            out.push(Cell { id, axis_value: v.to_string(), method: m, group: group.clone(), config: c });
        }
        if spec.dense_baseline && (per_value_dense || dense.is_empty()) {
            let mut c = cfg.clone();
            c.sparsity.method = RatioMethod::Dense;
            let (id, axis_value) = if per_value_dense { (format!("{}={v}/dense", axis.as_str()), v.to_string()) } else { ("dense".to_string(), NA.to_string()) };
            dense.push(Cell { id, axis_value, method: RatioMethod::Dense, group, config: c });
        }
    }
    out.extend(dense);
    Ok(out)
}

/// Filesystem-safe form of a cell id.
pub fn cell_slug(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '=' { c } else { '_' }).collect()
}

/// Config for repeat `r` of a cell: both seeds shift by `r`.
pub fn repeat_config(cell: &Cell, r: usize, sweep_dir: &Path) -> ExperimentConfig {
    let mut c = cell.config.clone();
    c.mask_seed = c.mask_seed.wrapping_add(r as u64);
    c.init_seed = c.init_seed.wrapping_add(r as u64);
    c.name = Some(format!("{}-r{r}", cell_slug(&cell.id)));
    c.output_dir = sweep_dir.join("cells").join(cell_slug(&cell.id)).join(format!("r{r}"));
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// One line of `runs.jsonl`: the final record of a run, or its error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub cell_id: String,
    pub axis_value: String,
    pub group: String,
    pub repeat: usize,
    pub status: RunStatus,
    pub error: Option<String>,
    pub record: Option<RunRecord>,
}

/// Metrics summarized per cell, in `summary.csv` column order.
pub const SUMMARY_METRICS: [&str; 11] =
    ["clean_accuracy", "ece", "nll", "fgsm_accuracy", "ood_auc", "noise_auc", "grad_flow_norm", "train_loss", "params", "flops", "sparsity"];

pub fn metric_value(r: &RunRecord, name: &str) -> Option<f64> {
    let m = &r.metrics;
    match name {
        "clean_accuracy" => Some(m.clean_accuracy),
        "ece" => m.ece,
        "nll" => m.nll,
        "fgsm_accuracy" => m.fgsm_accuracy,
        "ood_auc" => m.ood_auc,
        "noise_auc" => m.noise_auc,
        "grad_flow_norm" => m.grad_flow_norm,
        "train_loss" => m.train_loss,
        "params" => Some(m.params as f64),
        "flops" => Some(m.flops as f64),
        "sparsity" => Some(m.sparsity),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; `None` for a single run.
    pub std: Option<f64>,
}

pub fn mean_std(xs: &[f64]) -> Option<Stat> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some(Stat { mean, std })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell_id: String,
    pub axis_value: String,
    pub method: String,
    pub group: String,
    pub target_sparsity: f64,
    pub width: Option<usize>,
    pub depth: Option<usize>,
    pub runs: usize,
    pub failed: usize,
    /// Parallel to `SUMMARY_METRICS`; `None` when any run lacks the metric.
    pub stats: Vec<Option<Stat>>,
    /// Dense-baseline mean accuracy minus this cell's; `None` for dense cells.
    pub dense_gap: Option<f64>,
}

impl CellSummary {
    pub fn stat(&self, metric: &str) -> Option<Stat> {
        SUMMARY_METRICS.iter().position(|&m| m == metric).and_then(|i| self.stats[i])
    }
}

/// Aggregates runs by cell id, keeping first-appearance order of cells.
pub fn summarize(runs: &[SweepRun]) -> Vec<CellSummary> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_cell: BTreeMap<&str, Vec<&SweepRun>> = BTreeMap::new();
    for r in runs {
        by_cell.entry(&r.cell_id).or_insert_with(|| {
            order.push(&r.cell_id);
            Vec::new()
        });
        by_cell.get_mut(r.cell_id.as_str()).unwrap().push(r);
    }
    let mut out: Vec<CellSummary> = order
        .iter()
        .map(|id| {
            let rs = &by_cell[id];
            let ok: Vec<&RunRecord> = rs.iter().filter_map(|r| r.record.as_ref()).collect();
            let stats = SUMMARY_METRICS
                .iter()
                .map(|m| {
                    let xs: Option<Vec<f64>> = ok.iter().map(|r| metric_value(r, m)).collect();
                    xs.and_then(|xs| mean_std(&xs))
                })
                .collect();
            let tag = ok.first().map(|r| &r.tag);
            CellSummary {
                cell_id: id.to_string(),
                axis_value: rs[0].axis_value.clone(),
                method: tag.map_or_else(|| NA.to_string(), |t| t.method.clone()),
                group: rs[0].group.clone(),
                target_sparsity: tag.map_or(f64::NAN, |t| t.target_sparsity),
                width: tag.and_then(|t| t.width),
                depth: tag.and_then(|t| t.depth),
                runs: ok.len(),
                failed: rs.len() - ok.len(),
                stats,
                dense_gap: None,
            }
        })
        .collect();
    let dense_acc: BTreeMap<String, f64> = out
        .iter()
        .filter(|c| c.method == RatioMethod::Dense.as_str())
        .filter_map(|c| c.stat("clean_accuracy").map(|s| (c.group.clone(), s.mean)))
        .collect();
    for c in &mut out {
        if c.method != RatioMethod::Dense.as_str() {
            c.dense_gap = match (dense_acc.get(&c.group), c.stat("clean_accuracy")) {
                (Some(d), Some(s)) => Some(d - s.mean),
                _ => None,
            };
        }
    }
    out
}

pub fn summary_header() -> Vec<String> {
    let mut h: Vec<String> =
        ["cell_id", "axis", "axis_value", "method", "target_sparsity", "width", "depth", "runs", "failed"].iter().map(|s| s.to_string()).collect();
    for m in SUMMARY_METRICS {
        h.push(format!("{m}_mean"));
        h.push(format!("{m}_std"));
    }
    h.push("dense_gap".into());
    h
}

pub fn summary_csv(axis: Axis, cells: &[CellSummary]) -> Result<String, RunnerError> {
    let na = || NA.to_string();
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| RunnerError::Output(e.to_string());
    w.write_record(summary_header()).map_err(err)?;
    for c in cells {
        let mut row = vec![
            c.cell_id.clone(),
            axis.as_str().to_string(),
            c.axis_value.clone(),
            c.method.clone(),
            if c.runs > 0 { c.target_sparsity.to_string() } else { na() },
            c.width.map_or_else(na, |v| v.to_string()),
            c.depth.map_or_else(na, |v| v.to_string()),
            c.runs.to_string(),
            c.failed.to_string(),
        ];
        for s in &c.stats {
            row.push(s.map_or_else(na, |s| s.mean.to_string()));
            row.push(s.and_then(|s| s.std).map_or_else(na, |v| v.to_string()));
        }
        row.push(c.dense_gap.map_or_else(na, |g| g.to_string()));
        w.write_record(row).map_err(err)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| RunnerError::Output(e.to_string()))?).expect("utf-8 csv"))
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub runs: Vec<SweepRun>,
    pub summary: Vec<CellSummary>,
}

/// Runs every `(cell, repeat)` job, then writes `runs.jsonl` and
/// `summary.csv` under the sweep directory. `threads = Some(1)` gives the
/// single-threaded mode; results are ordered by job regardless.
pub fn run_sweep(spec: &SweepSpec, base: &ExperimentConfig, threads: Option<usize>) -> Result<SweepOutcome, RunnerError> {
    base.validate()?;
    let grid = cells(spec, base)?;
    let dir = resolve_output(spec.output_dir.as_deref().unwrap_or(&base.output_dir));
    let jobs: Vec<(&Cell, usize)> = grid.iter().flat_map(|c| (0..spec.repeats).map(move |r| (c, r))).collect();
    let run_one = |&(cell, r): &(&Cell, usize)| -> SweepRun {
        let cfg = repeat_config(cell, r, &dir);
        let result = experiment::prepare(&cfg).and_then(|p| {
            let out = experiment::execute(&p)?;
            experiment::persist(&p, &out, &cfg.output_dir)?;
            Ok(out.last().clone())
        });
        let (status, error, record) = match result {
            Ok(rec) => (RunStatus::Ok, None, Some(rec)),
            Err(e) => (RunStatus::Failed, Some(e.to_string()), None),
        };
        SweepRun { cell_id: cell.id.clone(), axis_value: cell.axis_value.clone(), group: cell.group.clone(), repeat: r, status, error, record }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| RunnerError::Output(e.to_string()))?;
    let runs: Vec<SweepRun> = pool.install(|| jobs.par_iter().map(run_one).collect());
    let summary = summarize(&runs);
    fs::create_dir_all(&dir).map_err(RunnerError::io(&dir))?;
    let lines: String = runs.iter().map(|r| serde_json::to_string(r).expect("runs serialize") + "\n").collect();
    fs::write(dir.join("runs.jsonl"), lines).map_err(RunnerError::io(dir.join("runs.jsonl")))?;
    fs::write(dir.join("summary.csv"), summary_csv(spec.axis, &summary)?).map_err(RunnerError::io(dir.join("summary.csv")))?;
    Ok(SweepOutcome { dir, runs, summary })
}

pub fn read_runs(path: &Path) -> Result<Vec<SweepRun>, RunnerError> {
    let text = fs::read_to_string(path).map_err(RunnerError::io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| RunnerError::Validation(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::from_toml(
            r#"
output_dir = "sweep"
mask_seed = 0
init_seed = 0
[network]
family = "mlp"
width = 8
depth = 1
[dataset]
kind = "gaussian_mixture"
classes = 3
samples = 90
dim = 4
seed = 1
[sparsity]
method = "uniform"
level = 0.8
[train]
epochs = 2
decay_milestones = [1]
"#,
        )
        .unwrap()
    }

    fn width_spec(methods: Vec<RatioMethod>) -> SweepSpec {
        SweepSpec {
            axis: Axis::Width,
            values: [16, 64, 256].map(AxisValue::Size).to_vec(),
            methods,
            sparsity: Some(0.8),
            repeats: 3,
            dense_baseline: true,
            output_dir: None,
        }
    }

    #[test]
    fn width_grid_cell_count() {
        let grid = cells(&width_spec(vec![]), &base()).unwrap();
        let sparse: Vec<_> = grid.iter().filter(|c| c.method != RatioMethod::Dense).collect();
        let dense: Vec<_> = grid.iter().filter(|c| c.method == RatioMethod::Dense).collect();
        assert_eq!(sparse.len() * 3, 9);
        assert_eq!(dense.len(), 3);
        assert_eq!(dense[0].group, "16");
        assert_eq!(summary_header().iter().filter(|h| h.contains("gap")).count(), 1);
    }

    #[test]
    fn sparsity_sweep_defaults_and_single_dense_cell() {
        let spec = SweepSpec::sparsity_default(vec![RatioMethod::Erk], 1);
        let grid = cells(&spec, &base()).unwrap();
        let levels: Vec<f64> = grid.iter().filter(|c| c.method == RatioMethod::Erk).map(|c| c.config.sparsity.level).collect();
        assert_eq!(levels, vec![0.7, 0.5, 0.3]);
        assert_eq!(grid.iter().filter(|c| c.method == RatioMethod::Dense).count(), 1);
    }

    #[test]
    fn repeats_shift_both_seeds() {
        let grid = cells(&width_spec(vec![RatioMethod::Erk]), &base()).unwrap();
        let c = repeat_config(&grid[0], 2, Path::new("/tmp/x"));
        assert_eq!((c.mask_seed, c.init_seed), (2, 2));
        assert!(c.output_dir.starts_with("/tmp/x/cells"));
    }

    #[test]
    fn invalid_specs() {
        let mut s = width_spec(vec![]);
        s.repeats = 0;
        assert!(s.validate().is_err());
        let mut s = width_spec(vec![]);
        s.values.clear();
        assert!(s.validate().is_err());
        let mut s = width_spec(vec![]);
        s.values = vec![AxisValue::Level(0.5)];
        assert!(s.validate().is_err());
    }

    #[test]
    fn single_repeat_std_is_absent() {
        assert_eq!(mean_std(&[0.5]), Some(Stat { mean: 0.5, std: None }));
        let s = mean_std(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std), (2.0, Some(1.0)));
    }
}

//! One experiment: plan → mask → init → static sparse training with metric
//! snapshots, persisted under the run's output directory.
//!
//! Files written (no timestamps, so reruns are byte-identical):
//! `config.toml`, `plan.txt`, `mask.bin`, `mask.txt`, `metrics.jsonl`,
//! `final.csv` and `checkpoint.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use randprune::alloc::{self, parse_plan};
use randprune::arch::NetworkSpec;
use randprune::engine::{self, init_params, train_epoch, Checkpoint, ParamState, TrainConfig};
use randprune::eval::{self, auc_from_scores, MetricsRecord};
use randprune::mask::{sample_mask, sparse_flops, sparse_param_count};
use randprune::{Mask, SparsityPlan};
use serde::{Deserialize, Serialize};

use crate::config::{resolve_output, ExperimentConfig, RatioMethod};
use crate::data::{load_dataset, Splits};
use crate::error::RunnerError;

/// Identifies a run in every emitted record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTag {
    pub run_id: String,
    pub method: String,
    pub target_sparsity: f64,
    pub width: Option<usize>,
    pub depth: Option<usize>,
    pub mask_seed: u64,
    pub init_seed: u64,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub tag: RunTag,
    #[serde(flatten)]
    pub metrics: MetricsRecord,
}

/// Column order of `final.csv`, fixed across runs.
pub const FINAL_COLUMNS: [&str; 19] = [
    "run_id",
    "method",
    "target_sparsity",
    "width",
    "depth",
    "mask_seed",
    "init_seed",
    "epoch",
    "train_loss",
    "clean_accuracy",
    "ece",
    "nll",
    "fgsm_accuracy",
    "ood_auc",
    "noise_auc",
    "grad_flow_norm",
    "params",
    "flops",
    "sparsity",
];

/// Marker for an absent value in CSV outputs.
pub const NA: &str = "NA";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

impl RunRecord {
    pub fn csv_row(&self) -> Vec<String> {
        let t = &self.tag;
        let m = &self.metrics;
        vec![
            t.run_id.clone(),
            t.method.clone(),
            t.target_sparsity.to_string(),
            opt(t.width),
            opt(t.depth),
            t.mask_seed.to_string(),
            t.init_seed.to_string(),
            m.epoch.to_string(),
            opt(m.train_loss),
            m.clean_accuracy.to_string(),
            opt(m.ece),
            opt(m.nll),
            opt(m.fgsm_accuracy),
            opt(m.ood_auc),
            opt(m.noise_auc),
            opt(m.grad_flow_norm),
            m.params.to_string(),
            m.flops.to_string(),
            m.sparsity.to_string(),
        ]
    }
}

/// Everything derived from a config before training starts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub net: NetworkSpec,
    pub data: Splits,
    pub plan: SparsityPlan,
    pub mask: Mask,
    pub train: TrainConfig,
    pub tag: RunTag,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub params: ParamState,
    pub output_dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn last(&self) -> &RunRecord {
        self.records.last().expect("every run evaluates its final epoch")
    }
}

/// Layer densities for the configured ratio method.
pub fn compute_plan(cfg: &ExperimentConfig, net: &NetworkSpec, data: &Splits) -> Result<SparsityPlan, RunnerError> {
    let sp = &cfg.sparsity;
    let plan = match sp.method {
        RatioMethod::Dense => alloc::plan_uniform(net, 0.0)?,
        RatioMethod::Snip | RatioMethod::Grasp => {
            let batch = data.train.head(sp.score_samples);
            let ratios = if sp.method == RatioMethod::Snip {
                engine::snip_ratios(net, cfg.init_seed, &batch, sp.level)?
            } else {
                engine::grasp_ratios(net, cfg.init_seed, &batch, sp.level, sp.grasp_tail)?
            };
            let mut plan = alloc::plan_from_ratios(net, &ratios)?;
            plan.source = Some(sp.method.to_string());
            plan
        }
        RatioMethod::File => {
            let path = sp.ratio_file.as_ref().ok_or_else(|| RunnerError::Validation("method `file` needs ratio_file".into()))?;
            let text = fs::read_to_string(path).map_err(|e| RunnerError::Validation(format!("ratio file {}: {e}", path.display())))?;
            alloc::plan_from_document(net, &parse_plan(&text)?)?
        }
        m => alloc::plan(net, m.predefined().expect("remaining methods are predefined"), sp.level)?,
    };
    Ok(plan)
}

/// Validates the config, loads data, builds the network and samples the
/// mask. Nothing is written.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, RunnerError> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    let net = cfg.network.build(data.shape, data.classes)?;
    let plan = compute_plan(cfg, &net, &data)?;
    let mask = sample_mask(&plan, &net, cfg.mask_seed, cfg.mask_mode)?;
    let tag = RunTag {
        run_id: cfg.run_id(),
        method: cfg.sparsity.method.to_string(),
        target_sparsity: cfg.target_sparsity(),
        width: cfg.network.width(),
        depth: cfg.network.depth(),
        mask_seed: cfg.mask_seed,
        init_seed: cfg.init_seed,
    };
    Ok(Prepared { config: cfg.clone(), train: cfg.train_config(), net, data, plan, mask, tag })
}

fn evaluate(p: &Prepared, params: &ParamState, epoch: usize, train_loss: Option<f64>) -> Result<MetricsRecord, RunnerError> {
    let m = &p.config.metrics;
    let (net, mask, test) = (&p.net, &p.mask, &p.data.test);
    let logits = engine::logits(net, params, mask, test)?;
    let confidence = eval::max_softmax(&logits);
    let auc_against = |out: &randprune::Batch| -> Result<f64, RunnerError> {
        let out_conf = eval::max_softmax(&engine::logits(net, params, mask, out)?);
        Ok(auc_from_scores(&confidence, &out_conf)?)
    };
    let kept = sparse_param_count(mask);
    let total: usize = mask.layers.iter().filter(|l| l.prunable).map(|l| l.len()).sum();
    Ok(MetricsRecord {
        epoch,
        train_loss,
        clean_accuracy: eval::accuracy_from_logits(&logits, &test.labels)?,
        ece: m.ece.then(|| eval::ece_from_logits(&logits, &test.labels, m.ece_bins)).transpose()?,
        nll: m.nll.then(|| eval::nll_from_logits(&logits, &test.labels)).transpose()?,
        fgsm_accuracy: m.fgsm.then(|| eval::fgsm_accuracy(net, params, mask, test, &m.attack())).transpose()?,
        ood_auc: match (&p.data.ood, m.ood) {
            (Some(ood), true) => Some(auc_against(ood)?),
            _ => None,
        },
        noise_auc: m.ood.then(|| auc_against(&p.data.noise)).transpose()?,
        grad_flow_norm: m
            .grad_flow
            .then(|| eval::grad_flow_norm(net, params, mask, &p.data.train.head(m.grad_flow_samples)))
            .transpose()?,
        params: kept,
        flops: sparse_flops(mask, net),
        sparsity: 1.0 - kept as f64 / total as f64,
    })
}

/// Trains from the prepared state and returns the metric snapshots.
pub fn execute(p: &Prepared) -> Result<RunOutput, RunnerError> {
    let mut params = init_params(&p.net, p.config.init_seed);
    params.apply_mask(&p.mask);
    let every = p.config.metrics.every;
    let mut records = Vec::new();
    for epoch in 0..p.train.epochs {
        let loss = train_epoch(&p.net, &mut params, &p.mask, &p.data.train, &p.train, epoch, p.config.init_seed)?;
        let done = epoch + 1;
        if done % every == 0 || done == p.train.epochs {
            records.push(RunRecord { tag: p.tag.clone(), metrics: evaluate(p, &params, done, Some(loss))? });
        }
    }
    Ok(RunOutput { records, params, output_dir: None })
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), RunnerError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(RunnerError::io(path))
}

pub fn jsonl(records: &[RunRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
}

pub fn final_csv(records: &[&RunRecord]) -> Result<String, RunnerError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(FINAL_COLUMNS).map_err(|e| RunnerError::Output(e.to_string()))?;
    for r in records {
        w.write_record(r.csv_row()).map_err(|e| RunnerError::Output(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| RunnerError::Output(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Writes the run's artifacts into `dir`, creating it if needed.
pub fn persist(p: &Prepared, out: &RunOutput, dir: &Path) -> Result<(), RunnerError> {
    fs::create_dir_all(dir).map_err(RunnerError::io(dir))?;
    write(dir, "config.toml", p.config.to_toml())?;
    write(dir, "plan.txt", p.plan.to_document())?;
    write(dir, "mask.bin", p.mask.to_bytes())?;
    write(dir, "mask.txt", p.mask.summary())?;
    write(dir, "metrics.jsonl", jsonl(&out.records))?;
    write(dir, "final.csv", final_csv(&[out.last()])?)?;
    let ckpt = Checkpoint { epoch: p.train.epochs as u64, order_seed: p.config.init_seed, params: out.params.clone(), mask: p.mask.clone() };
    write(dir, "checkpoint.bin", ckpt.to_bytes())
}

/// Full pipeline for one config; output goes to `output_dir` under the
/// output root. All validation happens before the directory is created.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, RunnerError> {
    let prepared = prepare(cfg)?;
    let dir = resolve_output(&cfg.output_dir);
    let mut out = execute(&prepared)?;
    persist(&prepared, &out, &dir)?;
    out.output_dir = Some(dir);
    Ok(out)
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use randprune::alloc::{self, parse_plan};
use randprune::arch::{parse_network, NetworkSpec};
use randprune::mask::sample_mask;
use randprune::{MaskMode, SparsityPlan};
use randprune_runner::config::resolve_output;
use randprune_runner::data::load_dataset;
use randprune_runner::experiment::compute_plan;
use randprune_runner::sweep::read_runs;
use randprune_runner::{plot, run_experiment, run_sweep, ExperimentConfig, RatioMethod, RunnerError, SweepSpec};

/// Random pruning at initialization: sparsity plans, masks, training and sweeps.
#[derive(Parser)]
#[command(name = "randprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the sparsity plan for a network document.
    Plan {
        network: PathBuf,
        #[arg(long, default_value = "erk")]
        method: String,
        #[arg(long, default_value_t = 0.0)]
        sparsity: f64,
        /// Take densities from a plan document instead of a method.
        #[arg(long)]
        ratio_file: Option<PathBuf>,
    },
    /// Sample a mask and write it in binary form.
    Mask {
        network: PathBuf,
        #[arg(long, default_value = "erk")]
        method: String,
        #[arg(long, default_value_t = 0.0)]
        sparsity: f64,
        /// Plan document to sample from (overrides --method/--sparsity).
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "exact")]
        mode: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Extract SNIP or GraSP layer densities into a ratio file.
    Ratios {
        config: PathBuf,
        #[arg(long, default_value = "snip")]
        method: String,
        /// Defaults to the config's sparsity level.
        #[arg(long)]
        sparsity: Option<f64>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run one experiment.
    Train { config: PathBuf },
    /// Run a sweep file.
    Sweep {
        sweep: PathBuf,
        /// Worker threads for independent cells (1 = single-threaded).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Turn a sweep's runs.jsonl into plot tables.
    Plotdata {
        runs: PathBuf,
        /// Defaults to `plots/` next to the runs file.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

fn read_network(path: &Path) -> Result<NetworkSpec, RunnerError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunnerError::Validation(format!("{}: {e}", path.display())))?;
    Ok(parse_network(&text)?)
}

fn read_plan(net: &NetworkSpec, path: &Path) -> Result<SparsityPlan, RunnerError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunnerError::Validation(format!("{}: {e}", path.display())))?;
    Ok(alloc::plan_from_document(net, &parse_plan(&text)?)?)
}

fn static_plan(net: &NetworkSpec, method: &str, s: f64) -> Result<SparsityPlan, RunnerError> {
    let m: RatioMethod = method.parse()?;
    match m {
        RatioMethod::Dense => Ok(alloc::plan_uniform(net, 0.0)?),
        other => match other.predefined() {
            Some(p) => Ok(alloc::plan(net, p, s)?),
            None => Err(RunnerError::Validation(format!("method `{other}` needs data; use `randprune ratios` or --ratio-file"))),
        },
    }
}

fn write_output(path: &Path, bytes: impl AsRef<[u8]>) -> Result<PathBuf, RunnerError> {
    let path = resolve_output(path);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| RunnerError::Io { path: dir.to_path_buf(), source: e })?;
    }
    std::fs::write(&path, bytes).map_err(|e| RunnerError::Io { path: path.clone(), source: e })?;
    Ok(path)
}

fn run(cli: Cli) -> Result<(), RunnerError> {
    match cli.command {
        Command::Plan { network, method, sparsity, ratio_file } => {
            let net = read_network(&network)?;
            let plan = match ratio_file {
                Some(f) => read_plan(&net, &f)?,
                None => static_plan(&net, &method, sparsity)?,
            };
            print!("{}", plan.to_document());
        }
        Command::Mask { network, method, sparsity, plan, seed, mode, output } => {
            let net = read_network(&network)?;
            let mode: MaskMode = mode.parse().map_err(RunnerError::Validation)?;
            let plan = match plan {
                Some(f) => read_plan(&net, &f)?,
                None => static_plan(&net, &method, sparsity)?,
            };
            let mask = sample_mask(&plan, &net, seed, mode)?;
            let path = write_output(&output, mask.to_bytes())?;
            print!("{}", mask.summary());
            eprintln!("wrote {}", path.display());
        }
        Command::Ratios { config, method, sparsity, output } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.sparsity.method = method.parse()?;
            if !matches!(cfg.sparsity.method, RatioMethod::Snip | RatioMethod::Grasp) {
                return Err(RunnerError::Validation("ratios supports snip and grasp".into()));
            }
            if let Some(s) = sparsity {
                cfg.sparsity.level = s;
            }
            cfg.validate()?;
            let data = load_dataset(&cfg.dataset)?;
            let net = cfg.network.build(data.shape, data.classes)?;
            let plan = compute_plan(&cfg, &net, &data)?;
            let path = write_output(&output, plan.to_document())?;
            print!("{}", plan.to_document());
            eprintln!("wrote {}", path.display());
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = run_experiment(&cfg)?;
            let last = out.last();
            println!(
                "{} epoch {} accuracy {:.4} sparsity {:.4} params {}",
                last.tag.run_id, last.metrics.epoch, last.metrics.clean_accuracy, last.metrics.sparsity, last.metrics.params
            );
            if let Some(dir) = out.output_dir {
                eprintln!("wrote {}", dir.display());
            }
        }
        Command::Sweep { sweep, threads } => {
            let (spec, base) = SweepSpec::load(&sweep)?;
            let out = run_sweep(&spec, &base, threads)?;
            for c in &out.summary {
                let acc = c.stat("clean_accuracy").map_or_else(|| "NA".to_string(), |s| format!("{:.4}", s.mean));
                let gap = c.dense_gap.map_or_else(|| "NA".to_string(), |g| format!("{g:.4}"));
                println!("{:<32} runs {} failed {} accuracy {acc} gap {gap}", c.cell_id, c.runs, c.failed);
            }
            eprintln!("wrote {}", out.dir.display());
        }
        Command::Plotdata { runs, output } => {
            let records = read_runs(&runs)?;
            if records.iter().all(|r| r.record.is_none()) {
                return Err(RunnerError::Validation(format!("{} holds no successful runs", runs.display())));
            }
            let dir = match output {
                Some(o) => resolve_output(&o),
                None => runs.parent().unwrap_or(Path::new(".")).join("plots"),
            };
            let tables = plot::emit_plot_data(&records);
            plot::write_tables(&tables, &dir)?;
            eprintln!("wrote {} tables to {}", tables.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

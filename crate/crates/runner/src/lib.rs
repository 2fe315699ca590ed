//! Operational shell around `randprune`: TOML experiment configs, dataset
//! ingestion, single runs, grid sweeps and plot-data emission.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod plot;
pub mod sweep;

pub use config::{ExperimentConfig, RatioMethod};
pub use error::RunnerError;
pub use experiment::{run_experiment, RunRecord};
pub use sweep::{run_sweep, SweepSpec};

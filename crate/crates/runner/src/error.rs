use std::path::PathBuf;

use randprune::alloc::AllocError;
use randprune::arch::ArchError;
use randprune::engine::EngineError;
use randprune::eval::EvalError;
use randprune::mask::MaskError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("output: {0}")]
    Output(String),
}

impl RunnerError {
    /// Process exit code: 2 for anything wrong with the inputs, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Validation(_) | RunnerError::Data(_) | RunnerError::Arch(_) | RunnerError::Alloc(_) | RunnerError::Mask(_) => 2,
            RunnerError::Io { .. } | RunnerError::Engine(_) | RunnerError::Eval(_) | RunnerError::Output(_) => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> RunnerError {
        let path = path.into();
        move |source| RunnerError::Io { path, source }
    }
}

//! Configuration, drivers and output for hyflux runs.

pub mod config;
pub mod driver;
pub mod output;

use thiserror::Error;

pub use config::RunConfig;
pub use driver::{convergence_study, dtmax_bisection, l2_error, run, ConvergenceRow, DtMaxResult, RunSummary, Simulation, TimingReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure at step {step} (t = {time}): {msg}")]
    Numerical { step: usize, time: f64, msg: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl HarnessError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numerical { .. } => 3,
            HarnessError::Io(_) => 4,
        }
    }
}

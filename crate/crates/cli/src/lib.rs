//! Experiment driver: data generation, discovery runs and their reports.

pub mod config;
pub mod metrics;
pub mod run;

use pdediscover::data::DataError;
use pdediscover::deriv::DerivError;
use pdediscover::network::NetworkError;
use pdediscover::trainer::TrainError;
use std::path::PathBuf;
use thiserror::Error;

pub use config::ExperimentConfig;
pub use metrics::{compute_metrics, full_field_l2, CoefficientMetrics, Equation};
pub use run::{cmd_discover, cmd_generate, cmd_report, DiscoveryResult, GenerateArgs, ModelArg};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const EMPTY_MODEL: i32 = 3;
    pub const DIVERGED: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Deriv(#[from] DerivError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Train(TrainError::Config(_)) => exit::CONFIG,
            CliError::Train(TrainError::Diverged { .. }) => exit::DIVERGED,
            _ => exit::FAILURE,
        }
    }
}

/// Caps the global worker pool from `PDEDISCOVER_THREADS` (0 or unset means
/// one worker per core).
pub fn init_threads() -> Result<(), CliError> {
    let n = match std::env::var("PDEDISCOVER_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Config(format!("PDEDISCOVER_THREADS: not a count: {v:?}")))?,
        Err(_) => 0,
    };
    if n > 0 {
        // fails only when a pool already exists, which keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

//! Dataset and record I/O, baselines, metrics, benchmark runs and offline
//! replay.

pub mod baselines;
pub mod benchmark;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod record;
pub mod simulate;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::agents::AgentError;
use crate::belief::BeliefError;
use crate::calibration::CalibrationError;
use crate::coordination::CoordinationError;
use crate::disclosure::DisclosureError;

pub use baselines::{compare_methods, majority_vote, weighted_vote, MethodAccuracy};
pub use benchmark::{
    calibration_records, replay_decision, run_benchmark, sweep_thresholds, token_report, BenchmarkOptions, CalibrationMode, SweepRow,
    TokenReport,
};
pub use dataset::{load_dataset, DatasetExample};
pub use metrics::{availability_upper_bound, compute_metrics, Metrics};
pub use record::{read_records, RunRecord};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Json { path: PathBuf, line: usize, message: String },
    #[error("{}: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("example {0:?} has no gold answer")]
    MissingGold(String),
    #[error(transparent)]
    Coordination(#[from] CoordinationError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Disclosure(#[from] DisclosureError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path, line: usize, err: serde_json::Error) -> Self {
        HarnessError::Json {
            path: path.to_path_buf(),
            line,
            message: err.to_string(),
        }
    }
}

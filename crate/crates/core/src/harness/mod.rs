//! Experiment runner, metrics, sweeps and report files.

pub mod config;
pub mod metrics;
pub mod sim;
pub mod sweep;

use thiserror::Error;

pub use config::{BackendKind, ExperimentConfig, Sampling, TraceSpec};
pub use metrics::{
    conservation_violations, jain_index, summarize, summarize_window, write_outputs, Calibration, FairnessReport,
    MetricsBundle, SummaryReport,
};
pub use sim::{apply_calibration, calibrate, run_experiment};
pub use sweep::{sweep, SweepRow};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown sweep parameter `{0}`")]
    UnknownParameter(String),
    #[error("all-zero input to the Jain index")]
    DegenerateInput,
    #[error(transparent)]
    Net(#[from] crate::netsim::NetError),
    #[error(transparent)]
    Trigger(#[from] crate::trigger::TriggerError),
    #[error(transparent)]
    Client(#[from] crate::llmclient::ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

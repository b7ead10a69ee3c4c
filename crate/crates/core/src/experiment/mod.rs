//! Run orchestration: configuration, data setup, the round loop, metrics
//! output and accuracy summaries.

mod config;
mod metrics;
mod runner;

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::nn::NnError;
use crate::protocol::ProtocolError;

pub use config::{default_z0, DatasetSource, RunConfig};
pub use metrics::{
    accuracy_curve, average_ua, client_ua, emit_metrics, fairness_histogram, load_metrics, Bucket, MetricsFormat,
    MetricsLog, CSV_COLUMNS,
};
pub use runner::{build_federation, run_training, run_training_on, Federation};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

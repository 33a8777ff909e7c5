//! Optimization, the training loop, evaluation metrics, and
//! cross-validation.

mod adam;
mod cv;
mod metrics;
mod trainer;

use thiserror::Error;

use crate::data::DataError;
use crate::nn::ModelError;
use crate::objectives::LossError;
use crate::tensor::TensorError;

pub use adam::{Adam, AdamConfig};
pub use cv::{cross_validate, fold_seed, CvOutcome, FoldOutcome};
pub use metrics::{aggregate, auc_rank, AggregateReport, Confusion, MetricsReport, Summary};
pub use trainer::{evaluate, predict_scores, train, EpochLoss, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {which} loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        which: &'static str,
        epoch: usize,
        batch: usize,
        value: f64,
    },
    #[error("no gradient for registered parameter `{0}`")]
    MissingGradient(String),
    #[error("parameter `{name}` gradient has {found} entries, expected {expected}")]
    GradientShape {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("evaluation needs at least one sample")]
    EmptyEvaluation,
    #[error("index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    /// The error with any fold wrappers removed.
    pub fn root(&self) -> &TrainError {
        match self {
            TrainError::Fold { source, .. } => source.root(),
            other => other,
        }
    }
}

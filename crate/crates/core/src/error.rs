use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::data::DataError;
use crate::experiment::ConfigError;
use crate::nn::ModelError;
use crate::objectives::LossError;
use crate::tensor::TensorError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("output directory {0} does not exist")]
    OutputDir(PathBuf),
    #[error("json encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("gradient check failed: {}", failed.join(", "))]
    GradCheckFailed { failed: Vec<String> },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, mapped to the process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Io,
    Data,
    Model,
    Numeric,
    Verification,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Io => 3,
            Category::Data => 4,
            Category::Model => 5,
            Category::Numeric => 6,
            Category::Verification => 7,
        }
    }
}

fn data_category(e: &DataError) -> Category {
    match e {
        DataError::Io { .. } => Category::Io,
        DataError::InvalidSpec(_) | DataError::InvalidFolds(_) => Category::Config,
        _ => Category::Data,
    }
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config(_) => Category::Config,
            Error::Data(e) => data_category(e),
            Error::Model(_) => Category::Model,
            Error::Loss(_) | Error::Tensor(_) => Category::Numeric,
            Error::Train(e) => match e.root() {
                TrainError::InvalidConfig(_) => Category::Config,
                TrainError::Data(d) => data_category(d),
                TrainError::Model(_) => Category::Model,
                TrainError::Pool(_) => Category::Io,
                _ => Category::Numeric,
            },
            Error::Checkpoint(CheckpointError::Io { .. }) | Error::OutputDir(_) | Error::Json(_) => Category::Io,
            Error::Checkpoint(_) => Category::Data,
            Error::GradCheckFailed { .. } => Category::Verification,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.category().exit_code()
    }
}

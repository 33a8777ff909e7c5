//! Parameters, layers, attention blocks, and the fusion network.

pub mod attention;
pub mod fusion;
pub mod layers;
pub mod params;

use thiserror::Error;

use crate::data::Modality;
use crate::tensor::TensorError;

pub use attention::{AttentionOutput, AttentionSpec, MultiHeadAttention};
pub use fusion::{
    cyclic_partner, Architecture, CrossAttention, FusionConfig, FusionKind, FusionNet, ForwardOutput,
    ModalityEmbedding,
};
pub use layers::{LayerNorm, Linear, Mlp};
pub use params::{Initializer, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("width mismatch for {what}: expected {expected}, found {found}")]
    WidthMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("modality index {0} out of range (expected 1, 2 or 3)")]
    ModalityIndex(usize),
    #[error("modality {modality} must attend to modality {expected}, not {partner}")]
    PartnerMismatch {
        modality: usize,
        partner: usize,
        expected: usize,
    },
    #[error("modality `{0}` is not part of this architecture")]
    MissingModality(Modality),
    #[error("modality `{0}` supplied more than once")]
    DuplicateModality(Modality),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

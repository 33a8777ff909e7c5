//! Triple-modal fusion network with cyclic cross-attention and
//! similarity-distribution-matching alignment, built on a small
//! reverse-mode autodiff engine.
//!
//! Layout:
//! - [`tensor`], [`autodiff`]: dense `f64` tensors and the gradient tape.
//! - [`nn`]: parameters, layers, attention, and the fusion network.
//! - [`objectives`]: cross-entropy, SDM, the three-way alignment loss.
//! - [`data`]: synthetic triple-modality data, dataset files, folds.
//! - [`train`]: Adam, the training loop, metrics, cross-validation.
//! - [`experiment`]: run configuration and the command implementations the
//!   CLI drives (generate, train, evaluate, ablate, gradcheck).

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorError};

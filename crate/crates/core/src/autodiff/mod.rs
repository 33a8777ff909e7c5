//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are methods on [`Graph`] returning [`Var`] handles. A call to
//! [`Graph::backward`] sweeps the tape once in reverse id order, which is a
//! valid topological order because inputs are always recorded before the
//! nodes that consume them.
//!
//! [`Tensor`]: crate::tensor::Tensor

mod gradcheck;
mod graph;
mod ops;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var, LOG_FLOOR};
pub use ops::{OpKind, NORM_FLOOR, VARIANCE_FLOOR};

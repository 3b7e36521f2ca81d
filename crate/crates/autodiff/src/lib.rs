//! Dense-tensor reverse-mode differentiation with exactly the operations a
//! CNN–BiLSTM sleep stager needs: 1-D convolution, batch normalization,
//! pooling, dropout, LSTM, linear layers, softmax and class-weighted
//! cross-entropy, plus Adam, gradient clipping and plateau scheduling.
//!
//! A [`Graph`] records one forward pass. Parameters live in a [`ParamStore`]
//! and are copied onto the graph with [`Graph::param`]; [`Graph::backward`]
//! adds gradients into the store. Everything is single-threaded and
//! deterministic for a given seed.

mod conv;
mod graph;
mod loss;
mod lstm;
mod norm;
mod optim;
mod schedule;
mod store;
mod tensor;

#[cfg(feature = "gradcheck")]
pub mod gradcheck;

pub use graph::{Graph, Var};
pub use lstm::LstmWeights;
pub use norm::{BatchNormConfig, RunningStats};
pub use optim::{adam_step, clip_gradients, OptimConfig};
pub use schedule::{EarlyStopping, PlateauScheduler, StopDecision};
pub use store::{ParamId, ParamKind, ParamStore};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("empty batch")]
    EmptyBatch,
    #[error("uninitialized statistics: {0}")]
    Uninitialized(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

/// Whether layers behave as during training (batch statistics, dropout) or inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

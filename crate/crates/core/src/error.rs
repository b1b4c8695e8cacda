// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    #[error("shape mismatch in `{op}`: {shapes:?}")]
    Shape {
        /// Operation that rejected its inputs.
        op: &'static str,
        /// Shapes of the offending operands.
        shapes: Vec<Vec<usize>>,
    },

    /// `backward` was called on a tensor with more than one element.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// An optimizer step was requested for a parameter without a gradient.
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),

    /// Invalid model configuration.
    #[error("invalid model config: {0}")]
    Config(String),

    /// A token id outside the vocabulary or a sequence longer than `max_seq`.
    #[error("invalid input: {0}")]
    Input(String),

    /// A circuit or cache that does not belong to the model it is used with.
    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    /// Dataset-level precondition violated (empty dataset, ragged pair, ...).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// The pruning loss became non-finite.
    #[error("loss diverged at step {step}; last good checkpoint: {last_checkpoint:?}")]
    Diverged {
        /// Step at which a NaN/inf loss was observed.
        step: usize,
        /// Most recent checkpoint written before the failure, if any.
        last_checkpoint: Option<PathBuf>,
    },

    /// Toy-model training finished without reaching the accuracy bar.
    #[error("training stopped at best validation accuracy {best_accuracy:.3} (bar {bar:.3})")]
    TrainingBar {
        /// Best validation accuracy observed.
        best_accuracy: f32,
        /// Requested accuracy bar.
        bar: f32,
    },

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, shapes: &[&[usize]]) -> Result<T> {
    Err(Error::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    })
}

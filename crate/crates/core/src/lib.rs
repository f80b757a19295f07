//! Boosted contrastive pretraining on long-tailed image data.
//!
//! The crate tracks a per-sample momentum loss across epochs, normalizes it
//! into a memorization score in `[0, 1]`, and uses that score to drive the
//! occurrence and strength of per-sample augmentation during contrastive
//! training. Slowly-learned (typically tail) samples receive heavier view
//! augmentation; well-memorized (typically head) samples keep highly
//! correlated views.
//!
//! Modules:
//! - [`tensor`]: dense tensors with reverse-mode autodiff, optimizers, and
//!   the checkpoint format.
//! - [`dataio`]: dataset binary format, long-tailed subset construction,
//!   class partitions, and batch iteration.
//! - [`augment`]: the base contrastive view pipeline and the score-driven
//!   stochastic augmentation over sixteen image operations.
//! - [`memtrack`]: per-sample loss history, momentum loss, normalized
//!   scores, and tail-discovery diagnostics.
//! - [`model`]: encoder + projector, the contrastive loss family, and the
//!   pruned-branch mechanism.
//! - [`trainer`]: the pretraining loop, checkpoint/resume, and ablation
//!   grids.
//! - [`eval`]: frozen-feature linear probing and group accuracy reports.
//! - [`cli`]: the `bcl` command-line entry point.

pub mod augment;
pub mod cli;
pub mod dataio;
pub mod eval;
pub mod memtrack;
pub mod model;
pub mod seeds;
pub mod tensor;
pub mod trainer;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {msg}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward called on a detached tensor (nothing on the tape requires grad)")]
    Detached,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("augmentation error: {0}")]
    Augment(String),
    #[error("loss tracking error: {0}")]
    MemTrack(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to: 1 for validation
    /// problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            _ => 2,
        }
    }
}

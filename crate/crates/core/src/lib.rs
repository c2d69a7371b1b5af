//! Continuous sign-gesture recognition on video streams.
//!
//! The crate implements the full desk-scale stack:
//!
//! * [`backbone`] — separable-3D MobileNet-V3 feature extractor built from a
//!   declarative layer table, with per-frame squeeze-excite gating and
//!   temporal average pooling.
//! * [`attention`] — residual spatio-temporal attention with Gumbel-sigmoid
//!   mask sampling and a hard total-variation auxiliary loss.
//! * [`metric`] — embedding head, AM-Softmax with a max-entropy clamp,
//!   push/center-push losses, PR-Product and the combined objective.
//! * [`data`] / [`synth`] — clip sampling, cropping, augmentations, and a
//!   deterministic synthetic motion-gesture dataset generator.
//! * [`train`] — SGD loop with warm-up, LR drop, early stopping and
//!   checkpointing ([`ckpt`]).
//! * [`stream`] / [`eval`] — sliding-window live inference and the
//!   continuous-recognition evaluation protocol (class-mean top-1, mAP).
//!
//! Everything is plain `f64` on the CPU and bit-deterministic under a fixed
//! seed.

pub mod attention;
pub mod backbone;
pub mod ckpt;
pub mod config;
pub mod data;
pub mod eval;
pub mod metric;
pub mod model;
pub mod nn;
pub mod stream;
pub mod synth;
pub mod train;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::Shape {
            context: context.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Rotation-equivariant oriented keypoint detection.
//!
//! A self-contained CPU implementation: a small cyclic-group-equivariant
//! CNN with manually derived backward passes, self-supervised training on
//! synthetic rotation pairs, multi-scale keypoint detection with
//! orientation assignment, descriptor matching with orientation-consensus
//! outlier filtering, and the matching/repeatability evaluation harness.

pub mod datagen;
pub mod equivariant;
pub mod evalkit;
pub mod losses;
pub mod matching;
pub mod inference;
pub mod io;
pub mod model;
pub mod train;
pub mod geometry;
pub mod par;
pub mod selftest;
pub mod tensor;

pub use geometry::{RotTransform, ValidityMask};
pub use inference::Keypoint;
pub use model::{Model, ModelOutput, RekdConfig};
pub use tensor::{Scalar, Tensor};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("no valid region: {0}")]
    NoValidRegion(String),
    #[error("bad magic in checkpoint file")]
    BadMagic,
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("checkpoint does not match config: {0}")]
    ConfigMismatch(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

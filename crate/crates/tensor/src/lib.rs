//! Minimal dense-tensor engine: 64-bit floats, reverse-mode tape, a handful
//! of NN layers, an Adam optimizer, and a bit-exact checkpoint format.

pub mod ckpt;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tape;

pub use tape::{Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("io error on {0}: {1}")]
    Io(String, String),
    #[error("parse error: {0}")]
    Parse(String),
}

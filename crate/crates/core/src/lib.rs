//! Language-instructed 3D point-cloud object segmentation, end to end:
//! procedural scene corpus, frozen proposal encoder, object-centric token
//! fusion, a small autoregressive LM with a reserved segmentation token, a
//! query-based mask decoder, distractor-supervised Hungarian matching, and
//! the task evaluation harness.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod grd;
pub mod lm;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod ocdr;
pub mod scene;
pub mod taxonomy;
pub mod trainer;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {0}: {1}")]
    Io(String, String),
    #[error("training divergence: {0}")]
    Divergence(String),
    #[error(transparent)]
    Tensor(#[from] plm_tensor::TensorError),
}

impl CoreError {
    /// Process exit code for the operator CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Config(_) => 2,
            CoreError::Data(_) | CoreError::Io(_, _) => 3,
            CoreError::Divergence(_) => 4,
            CoreError::Tensor(_) => 4,
        }
    }
}

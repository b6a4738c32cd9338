//! Dense CPU tensors with a small reverse-mode autodiff tape, parameter
//! storage, Adam, and a binary tensor archive.

mod archive;
mod check;
pub mod kernels;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use archive::{Archive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use check::{gradient_check, GradCheck};
pub use params::{accumulate_grads, Adam, BoundParams, ParamStore};
pub use scalar::Scalar;
pub use tape::{Conv2dCfg, Grads, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("decode error: {0}")]
    Decode(String),
}

//! Sparse-clip video-and-language learning at toy scale.
//!
//! The crate is built around a small define-by-run tape autodiff engine
//! ([`graph::Graph`]) that is generic over the scalar type. The cross-modal
//! model, clip sampling, cross-clip aggregation, the synthetic moving-shapes
//! corpus, the trainer and the step profiler all sit on top of it. Training
//! defaults to `f64`; `f32` exists for profiling.

pub mod aggregation;
pub mod checkpoint;
pub mod data;
pub mod graph;
pub mod model;
pub mod optim;
pub mod profile;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use rng::Rng;
pub use scalar::Scalar;

/// Concrete aliases for the two supported scalar types.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Params32 = model::Params<f32>;
pub type Params64 = model::Params<f64>;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),
    /// Bad argument that is not a pure shape problem (out-of-range id, empty input, ...).
    #[error("input error: {0}")]
    Input(String),
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    /// API contract violated (non-scalar loss, backward re-entry, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// Non-finite value produced by a forward op.
    #[error("non-finite value after op `{0}`")]
    NonFinite(&'static str),
    /// Corrupt on-disk record.
    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },
    /// Training left the stable regime.
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Minimal tensor and reverse-mode autodiff engine used by the try-on
//! networks. Everything is generic over [`Scalar`] (`f32` for training,
//! `f64` for gradient checks and metrics).

pub mod archive;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use nn::{Bound, Conv2d, Linear, ParamId, ParamStore};
pub use optim::{Adam, AdamConfig};
pub use scalar::{lit, to_f64, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} elements")]
    Size { shape: Vec<usize>, len: usize },
    #[error("expected shape {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("empty input")]
    Empty,
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("archive format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

//! Minimal deterministic reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a define-by-run tape rebuilt for every optimization step.
//! Parameters live in a [`ParamSet`] keyed by path; reading one into a graph
//! with [`Binding::Trainable`] makes [`Graph::backward`] accumulate its
//! gradient, [`Binding::Frozen`] reads it as a constant.

mod graph;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{gelu, mish, Binding, Grads, Graph, Var, LAYER_NORM_EPS};
pub use layers::{Activation, Dense, LayerNorm, Mlp};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use params::{ema_update, Param, ParamSet, CHECKPOINT_VERSION};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidDropout(f64),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on a tape that was already consumed")]
    TapeConsumed,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

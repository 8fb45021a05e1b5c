//! Minimal reverse-mode automatic differentiation over dense matrices,
//! with the layers and optimizers used by the flowgen models.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{forward_backward, Graph, Var};
pub use layers::{Activation, Embedding, Init, LayerNorm, Linear, Mlp};
pub use optim::{polyak_update, OptimizerHyper, OptimizerKind, OptimizerState};
pub use params::ParamSet;
pub use tensor::{Scalar, Tensor};

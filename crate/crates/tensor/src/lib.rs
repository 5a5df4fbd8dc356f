//! Minimal dense numerics for desk-scale training: `f64` tensors, a
//! reverse-mode tape, the layers a small transformer needs, AdamW, gradient
//! checking and JSON checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use gradcheck::{grad_check, param_grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, NodeId};
pub use nn::{Activation, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use optim::AdamW;
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{Result, Tensor, TensorError};

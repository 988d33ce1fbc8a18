//! Minimal dense compute engine with reverse-mode differentiation.

pub mod convnet;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod tensor;

pub use convnet::{forward_convnet, ConvNetConfig, ConvNetParams, ConvNetVars, Output};
pub use gradcheck::{finite_diff_check, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use optim::{sgd_step, Adam, Optimizer, OptimizerKind, Sgd};
pub use tensor::{Real, Tensor};

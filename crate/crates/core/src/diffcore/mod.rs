//! Reverse-mode differentiation, parameters, optimization and serialization.

mod container;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use container::{Container, MAGIC};
pub use gradcheck::{grad_check, grad_check_at, relative_error, GradCheck};
pub(crate) use graph::softmax_in_place;
pub use graph::{grid_coordinate, Gradients, Graph, Var, VolumeLayout, LOG_FLOOR};
pub use optim::{AdamW, OptimizerConfig};
pub use params::{ParamId, ParameterStore};
pub use tensor::Tensor;

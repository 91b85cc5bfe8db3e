//! Minimal differentiable-programming toolkit: a recording [`Graph`],
//! named parameters, layers and the Adam optimizer.

mod graph;
pub mod layers;
mod optim;
mod params;

pub use graph::{sigmoid, Grads, Graph, NodeId};
pub use optim::{Adam, AdamConfig};
pub use params::{normal, xavier, Param, ParamId, ParamStore};

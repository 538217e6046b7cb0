//! Chain CNN with recorded activations and exact reverse-mode gradients.

pub mod gradcheck;
mod layer;
mod model;
mod tape;

pub use layer::{Layer, LayerKind};
pub use model::{toy_architecture, ModelBuilder, ModelGraph, ParamGrads};
pub use tape::{forward, forward_backward, log_sum_exp, objective_value, softmax, Objective, Tape};

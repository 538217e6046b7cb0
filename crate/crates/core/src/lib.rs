//! Backpropagation saliency maps built from per-location contributions to
//! weight gradients, on top of a small chain-CNN engine.

pub mod aggregate;
pub mod cli;
pub mod error;
pub mod eval;
pub mod extract;
pub mod io;
pub mod metasal;
pub mod multilayer;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};

//! Graph-context fusion of a small transformer text encoder with a graph
//! neural network for document classification, plus the experiment harness
//! (synthetic corpora, seeded splits, ablation grid, metrics).

pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gnn;
pub mod gradcheck;
pub mod lm;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::GcError;
pub use tensor::{finite_diff_check, Axis, Tape, Tensor, Var};

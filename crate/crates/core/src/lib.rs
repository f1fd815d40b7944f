//! Edge and embedding pruning for graph collaborative filtering, trained through a
//! teacher, intermediate and student distillation chain.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dense;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod propagation;
pub mod pruning;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

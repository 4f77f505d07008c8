//! SlowFast slot-attention connector for dense video feature grids.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod connector;
pub mod decoder;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod render;
pub mod rng;
pub mod slot_attention;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;

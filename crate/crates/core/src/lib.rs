//! Activation-based adaptive iterative structured filter pruning.

pub mod attention;
pub mod config;
pub mod controller;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pruning;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Architecture, FilterMask, LayerSpec, ModelState, Shape};
pub use tensor::{Dims, Tensor4D};

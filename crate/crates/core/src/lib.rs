pub mod adapter;
pub mod attention;
pub mod config;
pub mod diffusion;
pub mod embedding;
pub mod enhancer;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod param;
pub mod rng;
pub mod strategy;
pub mod tensor;
pub mod testbed;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

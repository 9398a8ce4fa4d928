pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod verify;
pub mod wavelet;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

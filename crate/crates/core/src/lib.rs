//! Causal analysis of small neural classifiers through input interventions.

pub mod attribution;
pub mod compress;
pub mod config;
pub mod counterfactual;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod graph;
pub mod intervention;
pub mod nn;
pub mod pipeline;
pub mod similarity;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

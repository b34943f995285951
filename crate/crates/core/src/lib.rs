//! Differentiable cell search with attention-guided partial channel
//! connections.

pub mod attention;
pub mod commands;
pub mod config;
pub mod data;
pub mod autodiff;
pub mod error;
pub mod genotype;
pub mod gradcheck;
pub mod gradcheck_suite;
pub mod nn;
pub mod optim;
pub mod ops;
pub mod partial;
pub mod search;
pub mod params;
pub mod supernet;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{Group, ParamId, ParamStore};
pub use tensor::Tensor;

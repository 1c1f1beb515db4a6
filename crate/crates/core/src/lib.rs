//! A small laboratory for data-efficient GAN training with instance
//! discrimination on low-dimensional synthetic data.

pub mod graph;
pub mod gradcheck;
pub mod tensor;

pub use graph::{Graph, GraphError, OpKind, Var};
pub use tensor::Tensor;
pub mod nets;
pub mod rng;
pub mod augment;
pub mod contrastive;
pub mod losses;
pub mod optim;
pub mod datasets;
pub mod metrics;
pub mod config;
pub mod trainer;
pub mod checkpoint;
pub mod plot;
pub mod experiment;

//! Graph contrastive learning with learnable, node-wise view generators.
//!
//! The crate is layered bottom-up: a small reverse-mode autodiff engine
//! ([`tensor`]), graph containers and loaders ([`graph`], [`dataset`],
//! [`split`]), the GIN encoder ([`gin`]), the differentiable view
//! generator ([`generator`]), objectives ([`losses`]), fixed baseline
//! augmentations ([`augment`]) and the training loops ([`training`]).

pub mod augment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod generator;
pub mod gin;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod optim;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod split;
pub mod tensor;
pub mod training;

pub use error::{DataError, Error, Result, TensorError};
pub use graph::{Graph, GraphBatch, Topology};
pub use tensor::Tensor;

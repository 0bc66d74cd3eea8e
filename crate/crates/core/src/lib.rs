#![no_std]
// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
mod kernels;
pub mod layers;
pub mod losses;
pub mod models;
pub mod optim;
pub mod params;
pub mod rng;
pub mod strategies;
pub mod tensor;
pub mod testing;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NormMode, Var};
pub use params::{ParamId, ParamKind, ParamStore, ParamVector};
pub use tensor::Tensor;

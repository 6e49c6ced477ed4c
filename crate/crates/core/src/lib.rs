#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Graph, Tensor, Var};

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod kernels;
pub mod network;
pub mod numerics;
pub mod online;
pub mod rules;
pub mod trainer;

pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use kernels::{GroupingSpec, KernelFamily, KernelMatrix, KernelSpec, LabelKernel};
pub use network::{Network, NetworkConfig};
pub use numerics::{init_weights, matmul, Matrix, Rng};
pub use trainer::{Method, RunSpec, TrainerConfig};

//! Cooperative multi-agent reinforcement learning with graph-attention
//! communication between decentralized actors and a counterfactual
//! centralized critic.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod env;
pub mod error;
pub mod optim;
pub mod params;
pub mod policy;
pub mod scalar;
pub mod tensor;
pub mod trace;
pub mod train;

pub use autodiff::{Axis, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;

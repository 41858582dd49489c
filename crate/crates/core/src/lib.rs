//! Population-coded spiking actor networks with temporal shrinking, trained
//! with PPO on a point-mass velocity tracking task.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod encoder;
pub mod energy;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod lif;
pub mod mlp;
pub mod network;
pub mod optim;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod scalar;
pub mod shrink;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use network::{NetworkSpec, StageConfig};
pub use network::{Dynamics, Mode, PopSan};
pub use scalar::Scalar;

pub type PopSan32 = PopSan<f32>;
pub type PopSan64 = PopSan<f64>;

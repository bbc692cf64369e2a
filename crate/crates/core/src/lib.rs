//! Cost-aware selection among a fixed baseline, a learning agent and a human
//! supervisor, with the learning agent trained by DDPG from demonstrations.

pub mod bandit;
pub mod ccbp;
pub mod controller;
pub mod ddpg;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod protocol;
pub mod rng;

pub use controller::ControllerId;
pub use error::{Error, Result};

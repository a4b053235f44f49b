//! A policy-composition laboratory: train basis policies on known dynamics
//! regimes, then learn a neural meta-policy that switches among them on a
//! mixed-dynamics task, with passive composition and from-scratch RL
//! baselines for comparison.

pub mod baselines;
pub mod basis;
pub mod car;
pub mod checkpoint;
pub mod env;
pub mod error;
pub mod hybrid;
pub mod meta;
pub mod nn;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};

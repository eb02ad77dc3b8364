//! Split federated learning simulator with a multi-vector poisoning suite
//! and a topology-aware detection, generative repair and distillation
//! defense.

pub mod attacks;
pub mod bench;
pub mod config;
pub mod data;
pub mod detect;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod influence;
pub mod nn;
pub mod recover;
pub mod rng;
pub mod sfl;
pub mod sgv;

pub use error::{Error, Result};

//! Backdoor neutralization for ring-road AV controllers by randomized
//! smoothing with a learned noise distribution.

pub mod controller;
pub mod density;
pub mod error;
pub mod fmt;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod sim;
pub mod smoothing;
pub mod svg;

pub use error::{Error, Result};

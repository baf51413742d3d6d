pub mod cli;
pub mod container;
pub mod ergo;
pub mod error;
pub mod incremental;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

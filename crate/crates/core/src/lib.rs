pub mod cli;
pub mod correlation;
pub mod dataset;
pub mod error;
pub mod math;
pub mod metrics;
pub mod net;
pub mod pose;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

pub mod autograd;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod ode;
pub mod parallel;
pub mod pose;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

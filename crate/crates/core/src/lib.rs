pub mod app;
pub mod config;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod sitr;

pub use error::{Error, Result};

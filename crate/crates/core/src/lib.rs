//! Unbiased gradient-based architecture search at desk scale.

pub mod categorical;
pub mod checks;
pub mod error;
pub mod estimators;
pub mod latency;
pub mod rng;
pub mod search;
pub mod space;
pub mod supernet;

pub use error::{Error, Result};

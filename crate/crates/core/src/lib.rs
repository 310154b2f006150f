pub mod arraycore;
pub mod data;
pub mod encoder;
mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};

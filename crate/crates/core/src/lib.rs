pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod predict;
pub mod tensor;
pub mod train;
pub mod transfer;
pub mod visualize;

pub use error::{Error, Result};

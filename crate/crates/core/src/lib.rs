pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod perceptual;
pub mod stylespace;
pub mod training;

pub use error::{Error, Result};

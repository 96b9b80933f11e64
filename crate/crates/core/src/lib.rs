pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod selection;
pub mod networks;
pub mod pipeline;

pub use error::{Error, Result};

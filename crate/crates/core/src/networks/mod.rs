//! The context encoder, the transformer denoiser and the candidate scorer.

mod config;
pub mod denoiser;
pub mod encoder;
pub mod layers;
mod model;
pub mod scorer;

pub use config::ArchConfig;
pub use layers::Dropout;
pub use model::{fingerprint, stage1_specs, Conditioned, Model, SCORER_KIND, STAGE1_KIND};

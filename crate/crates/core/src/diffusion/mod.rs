//! Forward noising, the denoising objective, and the two reverse samplers.

mod sampler;
mod schedule;

pub use sampler::{sample, stubs, timesteps, trace_chain, Method, NoisePredictor, SampleOutput, SamplerConfig};
pub use schedule::{
    ddim_step, ddpm_step, diffusion_loss, forward_noise, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START,
    DEFAULT_STEPS,
};

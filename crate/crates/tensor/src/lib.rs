//! Minimal dense-array engine for the trajectory diffusion models.
//!
//! Values are row-major `f64` arrays. A [`Tape`] evaluates primitives eagerly
//! and records them so that [`Tape::backward`] can produce gradients for the
//! parameters bound from a [`ParameterStore`], which in turn applies AdamW
//! updates. [`gradient_check`] verifies analytic gradients against central
//! differences.

mod array;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;

pub use array::Array;
pub use error::{Result, TensorError};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use params::{AdamW, Bound, Init, ParamSpec, ParameterStore};
pub use tape::{Grads, Tape, Var, LAYER_NORM_EPS};

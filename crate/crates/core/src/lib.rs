//! Text-conditioned time-series generation: a length-adaptive VAE, a
//! diffusion transformer trained with rectified flow, and the data,
//! evaluation and captioning machinery around them.

pub mod autograd;
pub mod caption;
pub mod checkpoint;
pub mod dataset;
pub mod dit;
pub mod error;
pub mod flow;
mod http;
pub mod metrics;
pub mod mock;
pub mod nn;
pub mod par;
pub mod plot;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};

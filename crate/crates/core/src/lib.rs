//! Pathwise noise refinement for chunked autoregressive diffusion samplers.

pub mod denoiser;
pub mod diffnum;
pub mod error;
pub mod frames;
pub mod harness;
pub mod objectives;
pub mod parallel;
pub mod refiner;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod search;
pub mod stats;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use frames::Frames;

//! Probabilistic time-series imputation with a selective state-space
//! denoiser inside a conditional DDPM.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod exec;
pub mod layers;
pub mod masking;
pub mod metrics;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod ssm;
pub mod trainer;

pub use error::{Error, Result};

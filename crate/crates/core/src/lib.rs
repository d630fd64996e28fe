//! Scene-tensor diffusion for closed-loop multi-agent traffic simulation.

pub mod config;
pub mod constraints;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod render;
pub mod rollout;
pub mod scene;
pub mod tasks;
pub mod world;

pub use error::{Error, Result};

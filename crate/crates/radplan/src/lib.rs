//! Retrieval-augmented diffusion planning for vehicle trajectories.
//!
//! The crate covers the whole desk-scale pipeline: procedural driving-scene
//! generation, a task-specific scenario embedder, a nearest-neighbor vector
//! index, a transformer action denoiser with retrieval interpolation, kinematic
//! bicycle dynamics, open-loop planning metrics, and the benchmark harness that
//! ties them together. Everything runs on CPU and is deterministic per seed.

pub mod dataset;
pub mod datagen;
pub mod diffusion;
pub mod dynamics;
pub mod embedder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nnet;
pub mod planner;
pub mod retrieval;
pub mod rng;
pub mod types;

pub use error::{Error, Result};

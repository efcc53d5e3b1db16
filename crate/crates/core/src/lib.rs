//! Dynamic assembly forests for detecting diffusion-generated images.
//!
//! Cascaded random / completely-random forests are trained batch by batch
//! on weighted subsamples of a feature cache, then fused layer by layer into
//! a single cascade of unchanged size. Features come from a patch-based
//! HOG + local-frequency pipeline.

pub mod assembly;
pub mod cascade;
pub mod config;
pub mod data;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod patchfeat;
pub mod registry;
pub mod residency;
pub mod seed;
pub mod store;
pub mod trees;

pub use error::{DafError, Result};

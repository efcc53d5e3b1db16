//! Command-line workflow for dynamic assembly forest detectors: manifests,
//! feature extraction, training, scoring, evaluation under perturbations,
//! model inspection and a synthetic fixture corpus.

pub mod commands;
pub mod error;
pub mod fixture;
pub mod manifest;
pub mod pipeline;

pub use error::{CliError, CliResult};

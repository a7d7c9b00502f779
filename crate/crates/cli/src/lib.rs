//! Experiment commands over the lmser engine: training, reconstruction,
//! adversarial attacks, generation, associative recall and gradient checks.
//! Every command writes a manifest, CSV metrics and, where it makes
//! images, binary PGM grids into its output directory.

pub mod commands;
pub mod image;
pub mod manifest;

pub use commands::{run, CliError, Command};
pub use manifest::RunManifest;

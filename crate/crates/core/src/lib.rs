//! Home location detection from smartphone GPS traces.

pub mod analysis;
pub mod cli;
pub mod clustering;
pub mod error;
pub mod geo;
pub mod hda;
pub mod ingest;
pub mod metrics;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};

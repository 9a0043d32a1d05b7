//! File formats, CSV ingestion, heatmap rendering and the command line
//! around [`spotlight_core`].

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod ingest;
pub mod pwim;
pub mod render;

pub use spotlight_core as core;

pub use crate::error::{Error, ErrorKind, Result};

//! Core of the spotlight pipeline: clinical pathways encoded as 2D images,
//! a dilated-convolution encoder with soft attention and an LSTM decoder that
//! predicts condition sequences, plus the metrics used to evaluate it.
//!
//! The crate is `no_std` and only needs an allocator. File formats, CSV
//! ingestion and the command line live in the `spotlight` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod math;

pub mod metrics;
pub mod model;
pub mod pathway;
pub mod synth;
pub mod tensor;
pub mod train;

pub use crate::model::{ModelConfig, ParameterSet, PredictionResult, StopReason};
pub use crate::pathway::{CodeVocabulary, DimensionConfig, Event, Pathway, PathwayImage};
pub use crate::tensor::{Tape, Tensor, TensorError, Var};

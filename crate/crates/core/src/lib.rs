//! Screening pipeline for hand-drawn spiral and wave tests.
//!
//! The crate covers the whole path from a small labelled drawing corpus to a
//! deployable classifier:
//!
//! * [`dataset`] loads the `<type>/{healthy,parkinson}/` tree, preprocesses
//!   rasters to backbone input and produces stratified splits.
//! * [`augmentation`] grows the corpus with rotation, zoom and flips.
//! * [`backbone`] wraps frozen, pretrained convolutional feature extractors
//!   stored as ONNX graphs.
//! * [`training`] fits the two-way classification head with early stopping.
//! * [`report`] builds the backbone comparison tables and learning curves.
//! * [`inference`] exports self-contained model bundles, predicts on single
//!   drawings and fuses the spiral and wave verdicts.
//!
//! Data-parallel loops go through [`exec::ExecMode`]; with the `parallel`
//! feature disabled every mode runs sequentially.

pub mod augmentation;
pub mod backbone;
pub mod dataset;
pub mod digest;
pub mod domain;
pub mod error;
pub mod exec;
pub mod inference;
pub mod onnx;
pub mod pipeline;
pub mod report;
pub mod synthetic;
pub mod training;

pub use domain::{ClassLabel, DrawingType, Norm};
pub use error::{Error, Result};
pub use exec::ExecMode;

/// Seed used by every stochastic step unless the caller overrides it.
pub const DEFAULT_SEED: u64 = 42;

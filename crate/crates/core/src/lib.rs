//! Multi-objective adapter fine-tuning for automated program repair.
//!
//! The crate is split along the pipeline:
//!
//! * [`autograd`]: f64 tensors and a reverse-mode tape
//! * [`quant`]: NF4 blockwise quantization and low-rank adapters
//! * [`model`]: a small decoder-only transformer with adapter-augmented projections
//! * [`dataprep`]: datasets, byte tokenizer, teacher guidance, training-pair rendering
//! * [`train`]: the dual-objective training loop and checkpoints
//! * [`infer`]: sampling, candidate generation, patch extraction
//! * [`evalharness`]: sandboxed compile-and-test validation and TOP-k metrics

pub mod autograd;
pub mod dataprep;
pub mod error;
pub mod evalharness;
pub mod infer;
pub mod model;
pub mod quant;
pub mod train;

pub use error::{Error, Result};

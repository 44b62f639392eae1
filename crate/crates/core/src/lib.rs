//! Reasoning vectors from sparse autoencoders.
//!
//! The crate trains ReLU sparse autoencoders on step-level activations,
//! inspects the geometry of the learned decoder atoms, turns groups of atoms
//! into steering directions, searches for entropy-reducing ("confidence")
//! directions through a linear readout head, and ships a synthetic benchmark
//! that checks dictionary recovery against a known ground truth.
//!
//! Module map:
//!
//! - [`data`]: step records, activation sets, on-disk exchange formats
//! - [`segment`]: step splitting, keyword annotation, agreement ratio
//! - [`sae`]: encoder/decoder, loss and gradients, training loop
//! - [`optim`]: Adam and the warmup + cosine learning-rate schedule
//! - [`geometry`]: incoherence, top-active channels, silhouettes, 2-D export
//! - [`steering`]: behavior vectors and the projection intervention
//! - [`confidence`]: entropy minimization over decoder atoms
//! - [`synth`]: generative dictionary benchmark with Hungarian matching
//! - [`cli`]: command-line front end

pub mod cli;
pub mod confidence;
pub mod data;
pub mod error;
pub mod geometry;
pub mod hungarian;
pub mod io;
pub mod optim;
pub mod sae;
pub mod segment;
pub mod steering;
pub mod synth;

pub use error::{Error, Result};

//! Core algorithms for reduced-montage (12-channel) neonatal EEG seizure
//! detection.
//!
//! The crate is `no_std` (with `alloc`) and purely computational: signal
//! preprocessing, a tape-based reverse-mode autodiff engine, the CNN +
//! graph-attention + MLP classifier, focal-loss training, evaluation
//! metrics, and gradient-weighted relevance heatmaps. File formats, the
//! command line, and anything that touches the OS live in the companion
//! `nsd-cli` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod dsp;
pub mod error;
pub mod explain;
pub mod gat;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{backward, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;

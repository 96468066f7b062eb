//! Allocation-only core of FairSTG: a fairness-aware spatiotemporal graph
//! forecaster with a self-supervised difficulty recognizer, collaborative
//! feature enhancement and a two-stage training loop.
//!
//! Everything here runs on `f64` matrices with a small reverse-mode
//! autodiff tape. IO, configuration and the command line live in the
//! `fairstg` crate.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod adjacency;
pub mod autograd;
pub mod backbone;
pub mod data;
pub mod enhancement;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod recognizer;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

//! Deterministic, desk-scale federated-learning simulation with relaxed
//! contrastive local training.
//!
//! The crate is organised around the lifecycle of an experiment:
//!
//! * [`datasets`] — CIFAR binaries, synthetic blobs, and client partitioning
//! * [`model`] — a small multi-stage feature extractor with per-stage taps
//! * [`losses`] — cross-entropy, supervised/relaxed contrastive, proximal
//! * [`diagnostics`] — deviation bounds, covariance splits, effective rank, VCI
//! * [`engine`] — client sampling, local SGD, aggregation, server optimizers
//! * [`experiment`] — config parsing, full runs, JSONL metrics, run comparison
//!
//! Everything is driven by a single master seed; repeated runs of the same
//! config produce byte-identical metric logs regardless of worker parallelism.

pub mod datasets;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod rng;

pub use error::{Error, Result};

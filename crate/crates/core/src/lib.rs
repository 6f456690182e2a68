//! Finetuning by structured sparsification: trainable stochastic row/column
//! gates over frozen weight matrices, with hard compaction and a numerical
//! test-bench for the optimization-landscape claims behind the method.
//!
//! The crate is organized around the pipeline:
//!
//! * [`gates`] — stochastic gate sampling, expected-open-fraction regularizers
//!   and their analytic gradients, kurtosis-based channel scores.
//! * [`layers`] — gated linear layers (forward/backward), the low-rank adapter
//!   baseline, and the plain classifier head.
//! * [`model`] — gated MLP / tiny-transformer assembly plus checkpointing.
//! * [`train`] — composite objective, AdamW, the training loop, and the
//!   finite-difference gradient-check harness.
//! * [`compact`] — gate binarization, physical row/column removal with index
//!   maps, and exact-equivalence verification.
//! * [`landscape`] — PL-ratio traces, gates Jacobian/Gram analysis, the
//!   low-rank saddle counterexample, and convergence experiments.
//! * [`bench`] — single-threaded wall-clock timing of masked vs. compacted
//!   forward passes.
//! * [`data`] — planted-subnetwork synthetic tasks and CSV ingestion.
//!
//! Everything is generic over [`precision::Real`] (`f32`/`f64`). Determinism
//! is load-bearing throughout: the RNG is counter-based ([`rng::RngStream`])
//! and all parallel loops write disjoint output slots, so results are
//! bit-identical regardless of thread count.

pub mod bench;
pub mod compact;
pub mod data;
pub mod gates;
pub mod landscape;
pub mod layers;
pub mod matrix;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod precision;
pub mod rng;
pub mod train;

pub use matrix::Matrix;
pub use precision::{Dtype, Real};
pub use rng::RngStream;

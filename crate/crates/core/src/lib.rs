//! Graph-learning toolkit: a message-passing GNN teacher distilled into
//! a structure-aware MLP student that classifies nodes without message
//! passing.
//!
//! The crate is organized around the experiment lifecycle:
//!
//! - [`nn`]: tensors, reverse-mode autodiff, layers, Adam.
//! - [`graph`]: graph container, file I/O, synthetic generation,
//!   stratified splits, and scenario construction (transductive /
//!   inductive with and without test-time connections).
//! - [`teacher`]: the mean-aggregating message-passing teacher.
//! - [`student`]: the structure-aware MLP with decoupled feature and
//!   structure encoders fused by a per-node gate, plus the feature-only
//!   MLP baseline.
//! - [`distill`]: structure-mixing knowledge distillation and the
//!   two-stage procedure for structureless inference.
//! - [`eval`]: accuracy reports, gate-score exports, the inference
//!   latency harness, and the experiment driver.

pub mod ckpt;
pub mod distill;
pub mod error;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod rng;
pub mod student;
pub mod teacher;

pub use error::{Error, Result};
pub use rng::Rng;

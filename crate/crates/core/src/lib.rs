//! A desk-scale deep-metric-learning training lab built around memory-based
//! virtual classes: snapshots of past class weights and embeddings are
//! queued and re-labeled as extra classes under a warm-up + step-pacing
//! schedule, on top of a margin-softmax / proxy loss family with exact
//! analytic gradients, a small MLP encoder with hand-written backprop,
//! synthetic class-disjoint datasets, and retrieval metrics
//! (Recall@K, P@1, RP, MAP@R).

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod memvir;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};

//! Federated representation-augmentation simulator.
//!
//! A desk-scale federated learning framework built around embedding-space
//! augmentation: a shared class-conditional generator plus per-client
//! residual transform networks synthesize client-specific embeddings that
//! regularize prediction-head training. Baseline strategies (local-only,
//! centralized, plain averaging, proximal regularization, local batch
//! normalization, random-noise augmentation) share the same protocol.

pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod plot;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

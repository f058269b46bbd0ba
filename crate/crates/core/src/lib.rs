//! Detection engine for malicious encrypted traffic.
//!
//! Packets are grouped into per-client flows, each flow is reduced to its
//! head-packet length sequence plus duration and mean inter-arrival gap, a
//! bidirectional GRU autoencoder turns the length sequence into a fixed-width
//! embedding, and a small MLP classifies the result. New attack families are
//! absorbed incrementally with a reservoir-sampled replay buffer and a
//! logit-distillation loss that limits forgetting of earlier families.

pub mod buffer;
pub mod detector;
pub mod error;
pub mod extractor;
pub mod ingest;
pub mod learner;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};

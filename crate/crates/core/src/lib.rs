//! Vertical federated learning with communication-free unlearning.
//!
//! Passive parties hold disjoint feature columns and send embeddings to an
//! active party that owns the labels. The active party keeps every batch's
//! concatenated embeddings, which lets it forget a party, a party's features,
//! or a set of samples without contacting anyone.

pub mod audit;
pub mod data;
mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod runtime;
pub mod unlearn;

pub use error::{Error, Result};

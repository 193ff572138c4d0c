//! Simulator for federated multi-task learning where clients differ in the
//! number and kind of tasks they train.
//!
//! The server splits every client model into a shared encoder, per-task
//! decoders and per-task heads. Encoders are combined with conflict-averse
//! aggregation, decoders with layer-wise cross attention over their updates,
//! and each client blends the aggregated updates into its own model through
//! learnable per-client weights. Heads never leave the client.

pub mod aggregation;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod param;
pub mod seed;
pub mod verify;

pub use error::{Error, Result};

//! Federated learning with neuron-level partial updates.
//!
//! Clients keep full local models and, each round, train only a random subset
//! of neurons chosen by the server; the rest stay frozen but still take part
//! in the forward pass. Federated-dropout baselines train sub-models instead.
//! Everything is deterministic for a fixed master seed.

pub mod client;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod experiment;
pub mod masking;
pub mod method;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod server;

pub use config::ExperimentConfig;
pub use method::{FederatedMethod, MethodRegistry};
pub use nn::{Architecture, Model};

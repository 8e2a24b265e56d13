//! Federated group-distributionally-robust training simulator.
//!
//! Clients hold subgroups keyed by a sensitive attribute; the server trains a
//! shared classifier against the worst mixture of those subgroups while
//! adapting per-subgroup weights on the probability simplex.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod simplex;
pub mod toy;
pub mod types;
pub mod verify;

pub use config::{Algorithm, LambdaInit, RunConfig};
pub use error::{Error, Result};
pub use models::{Batch, ModelKind, ModelSpec, Objective};
pub use types::{ClientData, FederatedDataset, GroupIndex, ModelParams, SimplexWeights};

//! Single-process simulator for subgraph federated learning with
//! topology-aware data-free knowledge distillation.
//!
//! The crate is organised bottom-up:
//! - [`graph`]: sparse graphs (CSR), GCN normalization, transition matrices
//! - [`tensor`]: reverse-mode autodiff tape over dense `f64` matrices
//! - [`dataset`]: JSON dataset I/O and a stochastic block model generator
//! - [`partition`]: Louvain community detection and client shard induction
//! - [`reliability`]: class-wise knowledge reliability measured by clients
//! - [`nn`]: GCN backbone, generator network, pseudo-graph construction
//! - [`distill`]: server-side adversarial data-free distillation
//! - [`federation`]: communication rounds, FedAvg, evaluation
//! - [`config`]: experiment configuration files

pub mod config;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod federation;
pub mod graph;
pub mod nn;
pub mod partition;
pub mod reliability;
pub mod tensor;
pub mod util;

pub use error::{FedTadError, Result};

//! Pruning importance measures viewed through gradient flow.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: tensors, expression graphs, gradients and exact
//!   Hessian-vector products.
//! - [`netmodel`]: desk-scale MLP/CNN models with per-filter scale
//!   parameters, prune groups and synthetic datasets.
//! - [`importance`]: magnitude, loss-preservation, GraSP, |GraSP|, the
//!   magnitude-weighted loss-preservation extension, |σΔσ| and random scores.
//! - [`masking`]: schedules, global-ranking masks and mask diagnostics.
//! - [`trainer`]: deterministic SGD and the prune-and-train protocol.
//! - [`flowlab`]: gradient-flow integration and numerical identity checks.
//! - [`analysis`]: correlation studies between measures.
//! - [`cli`]: config-driven experiment runner behind the `flowprune` binary.

pub mod analysis;
pub mod cli;
pub mod diffcore;
pub mod error;
pub mod flowlab;
pub mod importance;
pub mod io;
pub mod masking;
pub mod netmodel;
pub mod trainer;

pub use error::{Error, Result};

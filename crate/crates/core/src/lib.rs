// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge-level circuit discovery for small transformers.
//!
//! The crate is organized bottom-up:
//!
//! - [`autograd`]: dense tensors and a reverse-mode tape.
//! - [`model`]: the transformer, its writer/reader computational graph,
//!   the disentangled forward pass and circuits.
//! - [`masks`]: hard-concrete gates over edges and nodes, and discretization.
//! - [`pruner`]: the edge-pruning optimization loop.
//! - [`baselines`]: ACDC greedy search and edge attribution patching.
//! - [`tasks`]: template datasets, tokenizer and toy-model training.
//! - [`zoo`]: hand-weighted models with known ground-truth circuits.
//! - [`metrics`]: faithfulness and task-performance metrics.
//! - [`export`]: DOT and CSV writers.

pub mod autograd;
pub mod baselines;
pub mod error;
pub mod export;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod pruner;
pub mod tasks;
pub mod zoo;

pub use error::{Error, Result};

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Transformer, its computational graph and circuits.

mod checkpoint;
mod config;
mod disentangled;
mod graph;
mod transformer;

pub use checkpoint::{load_model, save_model, ModelFile, MODEL_FORMAT, MODEL_FORMAT_VERSION};
pub use config::{Activation, ModelConfig};
pub use disentangled::{AblationMode, EdgeMask};
pub use graph::{Circuit, CircuitFile, ComputationalGraph, Edge, NodeId, Reader, Stream, Writer};
pub use transformer::{ActivationCache, DisentangledTransformer, HeadWeights, LayerWeights};

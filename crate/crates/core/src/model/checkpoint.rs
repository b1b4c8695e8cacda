// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model checkpoint container.
//!
//! A checkpoint is one JSON object:
//!
//! ```json
//! {
//!   "format": "edgeprune-model",
//!   "version": 1,
//!   "config": { "n_layers": 2, "n_heads": 4, ... },
//!   "tensors": [ { "name": "embed", "shape": [40, 64], "data": [ ... ] }, ... ]
//! }
//! ```
//!
//! Tensors appear in the order of [`DisentangledTransformer::tensors`] and
//! data is row-major `f32`. Loading checks every name and shape.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::transformer::DisentangledTransformer;

pub const MODEL_FORMAT: &str = "edgeprune-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

impl ModelFile {
    pub fn from_model(m: &DisentangledTransformer) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_FORMAT_VERSION,
            config: m.config.clone(),
            tensors: m
                .tensors()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<DisentangledTransformer> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Format(format!("not a model checkpoint: `{}`", self.format)));
        }
        if self.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let mut model = DisentangledTransformer::zeros(self.config)?;
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                names.len(),
                self.tensors.len()
            )));
        }
        for ((slot, name), nt) in model.tensors_mut().into_iter().zip(&names).zip(self.tensors) {
            if &nt.name != name || nt.shape != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor `{}` {:?} does not match `{name}` {:?}",
                    nt.name,
                    nt.shape,
                    slot.shape()
                )));
            }
            if nt.data.len() != slot.len() {
                return Err(Error::Format(format!("tensor `{name}` has wrong length")));
            }
            slot.data_mut().copy_from_slice(&nt.data);
        }
        Ok(model)
    }
}

pub fn save_model(model: &DisentangledTransformer, path: &Path) -> Result<()> {
    let json = serde_json::to_string(&ModelFile::from_model(model))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DisentangledTransformer> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)?;
    file.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = DisentangledTransformer::random(ModelConfig::toy(2, 2, 8, 9, 6), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_model(&m, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), m);
    }

    #[test]
    fn wrong_format_rejected() {
        let m = DisentangledTransformer::random(ModelConfig::toy(1, 1, 4, 5, 3), 4).unwrap();
        let mut f = ModelFile::from_model(&m);
        f.version = 99;
        assert!(f.clone().into_model().is_err());
        f.version = MODEL_FORMAT_VERSION;
        f.tensors.pop();
        assert!(f.into_model().is_err());
    }
}

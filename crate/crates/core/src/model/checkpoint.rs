use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamEntry, ParamStore, Role};
use crate::error::{JpsError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EntryRecord {
    param_id: String,
    layer_index: usize,
    role: Role,
    shape: Vec<usize>,
    /// base64 of little-endian f64s
    data: String,
}

/// On-disk model: config plus every tensor, values base64-encoded so the
/// round trip is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    entries: Vec<EntryRecord>,
}

impl Checkpoint {
    pub fn from_params(config: &ModelConfig, params: &ParamStore) -> Self {
        let entries = params
            .entries()
            .iter()
            .map(|e| {
                let bytes: Vec<u8> = e
                    .tensor
                    .data()
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect();
                EntryRecord {
                    param_id: e.param_id.clone(),
                    layer_index: e.layer_index,
                    role: e.role,
                    shape: e.tensor.shape().to_vec(),
                    data: B64.encode(bytes),
                }
            })
            .collect();
        Self {
            config: config.clone(),
            entries,
        }
    }

    /// Decodes into a store whose `theta0` is the stored values.
    pub fn into_params(self) -> Result<(ModelConfig, ParamStore)> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for r in self.entries {
            let bytes = B64
                .decode(r.data.as_bytes())
                .map_err(|e| JpsError::Validation(format!("{}: bad base64: {e}", r.param_id)))?;
            if bytes.len() % 8 != 0 {
                return Err(JpsError::Validation(format!(
                    "{}: payload is not a whole number of f64s",
                    r.param_id
                )));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            entries.push(ParamEntry {
                param_id: r.param_id,
                layer_index: r.layer_index,
                role: r.role,
                tensor: Tensor::new(r.shape, data)?,
            });
        }
        let params = ParamStore::from_entries(entries);
        params.check_layout(&self.config)?;
        Ok((self.config, params))
    }
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParamStore) -> Result<()> {
    let ckpt = Checkpoint::from_params(config, params);
    std::fs::write(path, serde_json::to_vec_pretty(&ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
    ckpt.into_params()
}

//! Mini transformer classifier: parameter registry, forward pass and
//! hand-written reverse-mode gradients.

mod checkpoint;
mod eligible;
mod gradcheck;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use eligible::{EligibleMap, EligibleSegment, COORDINATE_INDEX_MAP_VERSION};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheckReport};
pub use transformer::{backward, forward, loss, loss_and_grads, pooled_features, Gradients};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{JpsError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Attention,
    MlpFc1,
    MlpFc2,
    Layernorm,
    Embedding,
    ClassifierHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub num_tokens: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            d_model: 8,
            num_tokens: 4,
            mlp_hidden: 32,
            num_classes: 5,
            dropout_rate: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        self.num_tokens * self.d_model
    }

    /// Coordinates in one block's fc1 (weight plus bias).
    pub fn fc1_coords_per_block(&self) -> usize {
        self.d_model * self.mlp_hidden + self.mlp_hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_tokens == 0 || self.mlp_hidden == 0 {
            return Err(JpsError::Config(
                "d_model, num_tokens and mlp_hidden must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(JpsError::Config("num_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(JpsError::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub param_id: String,
    pub layer_index: usize,
    pub role: Role,
    pub tensor: Tensor,
}

/// Named parameters in a fixed layout plus the frozen snapshot `theta0`.
///
/// Layout: `embed.weight`, `embed.pos`, then 12 tensors per block, then
/// `head.weight`, `head.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    theta0: Vec<Tensor>,
}

pub(crate) const PER_BLOCK: usize = 12;

pub(crate) mod slot {
    pub const LN1_GAMMA: usize = 0;
    pub const LN1_BETA: usize = 1;
    pub const WQ: usize = 2;
    pub const WK: usize = 3;
    pub const WV: usize = 4;
    pub const WO: usize = 5;
    pub const LN2_GAMMA: usize = 6;
    pub const LN2_BETA: usize = 7;
    pub const FC1_W: usize = 8;
    pub const FC1_B: usize = 9;
    pub const FC2_W: usize = 10;
    pub const FC2_B: usize = 11;
}

pub(crate) fn block_base(block: usize) -> usize {
    2 + PER_BLOCK * block
}

pub fn head_base(cfg: &ModelConfig) -> usize {
    2 + PER_BLOCK * cfg.num_blocks
}

fn layout(cfg: &ModelConfig) -> Vec<(String, usize, Role, Vec<usize>)> {
    let d = cfg.d_model;
    let h = cfg.mlp_hidden;
    let mut out = vec![
        ("embed.weight".to_string(), 0, Role::Embedding, vec![d, d]),
        (
            "embed.pos".to_string(),
            0,
            Role::Embedding,
            vec![cfg.num_tokens, d],
        ),
    ];
    for b in 0..cfg.num_blocks {
        let p = |name: &str| format!("blocks.{b}.{name}");
        out.extend([
            (p("ln1.gamma"), b, Role::Layernorm, vec![d]),
            (p("ln1.beta"), b, Role::Layernorm, vec![d]),
            (p("attn.wq"), b, Role::Attention, vec![d, d]),
            (p("attn.wk"), b, Role::Attention, vec![d, d]),
            (p("attn.wv"), b, Role::Attention, vec![d, d]),
            (p("attn.wo"), b, Role::Attention, vec![d, d]),
            (p("ln2.gamma"), b, Role::Layernorm, vec![d]),
            (p("ln2.beta"), b, Role::Layernorm, vec![d]),
            (p("fc1.weight"), b, Role::MlpFc1, vec![d, h]),
            (p("fc1.bias"), b, Role::MlpFc1, vec![h]),
            (p("fc2.weight"), b, Role::MlpFc2, vec![h, d]),
            (p("fc2.bias"), b, Role::MlpFc2, vec![d]),
        ]);
    }
    let hb = cfg.num_blocks;
    out.push((
        "head.weight".to_string(),
        hb,
        Role::ClassifierHead,
        vec![d, cfg.num_classes],
    ));
    out.push((
        "head.bias".to_string(),
        hb,
        Role::ClassifierHead,
        vec![cfg.num_classes],
    ));
    out
}

impl ParamStore {
    /// Random initialization: linear weights ~ N(0, 1/fan_in), layernorm
    /// gain 1 and shift 0, biases 0, positional table ~ N(0, 0.1^2).
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mut entries = Vec::new();
        for (param_id, layer_index, role, shape) in layout(cfg) {
            let mut tensor = Tensor::zeros(&shape);
            let is_gamma = param_id.ends_with(".gamma");
            let is_bias = param_id.ends_with(".bias") || param_id.ends_with(".beta");
            if is_gamma {
                tensor.data_mut().iter_mut().for_each(|v| *v = 1.0);
            } else if param_id == "embed.pos" {
                tensor
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.1 * rng.normal());
            } else if !is_bias {
                let std = 1.0 / (shape[0] as f64).sqrt();
                tensor
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = std * rng.normal());
            }
            entries.push(ParamEntry {
                param_id,
                layer_index,
                role,
                tensor,
            });
        }
        Ok(Self::from_entries(entries))
    }

    /// All tensors zero, layernorm gains included.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let entries = layout(cfg)
            .into_iter()
            .map(|(param_id, layer_index, role, shape)| ParamEntry {
                param_id,
                layer_index,
                role,
                tensor: Tensor::zeros(&shape),
            })
            .collect();
        Ok(Self::from_entries(entries))
    }

    pub(crate) fn from_entries(entries: Vec<ParamEntry>) -> Self {
        let theta0 = entries.iter().map(|e| e.tensor.clone()).collect();
        Self { entries, theta0 }
    }

    /// Checks that ids, order and shapes match the layout implied by `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = layout(cfg);
        if expected.len() != self.entries.len() {
            return Err(JpsError::Dimension(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.entries.len()
            )));
        }
        for ((id, layer, role, shape), e) in expected.iter().zip(&self.entries) {
            if *id != e.param_id || *layer != e.layer_index || *role != e.role {
                return Err(JpsError::Dimension(format!(
                    "parameter {} does not match layout slot {id}",
                    e.param_id
                )));
            }
            if shape.as_slice() != e.tensor.shape() {
                return Err(JpsError::Dimension(format!(
                    "{id}: expected shape {shape:?}, got {:?}",
                    e.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn theta0(&self) -> &[Tensor] {
        &self.theta0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, param_id: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.param_id == param_id)
            .ok_or_else(|| JpsError::Lookup(param_id.to_string()))
    }

    pub fn get(&self, param_id: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.index_of(param_id)?].tensor)
    }

    pub fn get_mut(&mut self, param_id: &str) -> Result<&mut Tensor> {
        let i = self.index_of(param_id)?;
        Ok(&mut self.entries[i].tensor)
    }

    pub(crate) fn tensor(&self, index: usize) -> &[f64] {
        self.entries[index].tensor.data()
    }

    pub(crate) fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        self.entries[index].tensor.data_mut()
    }

    /// Freezes the current values as the new `theta0`.
    pub fn snapshot_theta0(&mut self) {
        self.theta0 = self.entries.iter().map(|e| e.tensor.clone()).collect();
    }

    /// Copy whose live values are the frozen snapshot.
    pub fn at_theta0(&self) -> ParamStore {
        let mut out = self.clone();
        for (e, t) in out.entries.iter_mut().zip(&self.theta0) {
            e.tensor = t.clone();
        }
        out
    }

    pub fn num_coords(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Every coordinate in layout order.
    pub fn flatten_all(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect()
    }

    pub fn unflatten_all(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_coords() {
            return Err(JpsError::Dimension(format!(
                "expected {} coordinates, got {}",
                self.num_coords(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.tensor.len();
            e.tensor
                .data_mut()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Resets the classifier head to a fresh random draw.
    pub fn reinit_head(&mut self, cfg: &ModelConfig, rng: &mut SeededRng) {
        let hb = head_base(cfg);
        let std = 1.0 / (cfg.d_model as f64).sqrt();
        for v in self.tensor_mut(hb) {
            *v = std * rng.normal();
        }
        self.tensor_mut(hb + 1).iter_mut().for_each(|v| *v = 0.0);
    }

    /// SHA-256 over ids, shapes and little-endian values of the live tensors.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.param_id.as_bytes());
            for d in e.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// A minibatch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[batch x num_tokens x d_model]`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub domain_ids: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, domain_ids: Vec<usize>) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(JpsError::Validation("empty batch".into()));
        }
        if inputs.shape().first() != Some(&n) || domain_ids.len() != n {
            return Err(JpsError::Dimension(format!(
                "batch of {n} labels but inputs shape {:?} and {} domain ids",
                inputs.shape(),
                domain_ids.len()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            domain_ids,
        })
    }

    /// Builds a batch from flat feature rows of length `num_tokens * d_model`.
    pub fn from_rows(
        cfg: &ModelConfig,
        features: &[f64],
        labels: Vec<usize>,
        domain_ids: Vec<usize>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(JpsError::Validation("empty batch".into()));
        }
        let inputs = Tensor::new(vec![n, cfg.num_tokens, cfg.d_model], features.to_vec())?;
        Self::new(inputs, labels, domain_ids)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub(crate) fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = [self.len(), cfg.num_tokens, cfg.d_model];
        if self.inputs.shape() != expected {
            return Err(JpsError::Dimension(format!(
                "batch inputs {:?} do not match model {:?}",
                self.inputs.shape(),
                expected
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= cfg.num_classes) {
            return Err(JpsError::Validation(format!(
                "label {bad} outside [0, {})",
                cfg.num_classes
            )));
        }
        Ok(())
    }

    /// Sub-batch of the given sample positions, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Batch> {
        let row = self.inputs.len() / self.len();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.inputs.data()[i * row..(i + 1) * row]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = idx.len();
        Batch::new(
            Tensor::new(shape, data)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
            idx.iter().map(|&i| self.domain_ids[i]).collect(),
        )
    }
}

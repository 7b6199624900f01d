use serde::{Deserialize, Serialize};

use super::{block_base, slot, Gradients, ModelConfig, ParamStore};
use crate::error::{JpsError, Result};

/// Bumped whenever the coordinate order below changes; stored in mask files.
pub const COORDINATE_INDEX_MAP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibleSegment {
    pub param_id: String,
    pub param_index: usize,
    pub layer_index: usize,
    pub shape: Vec<usize>,
    /// First flat coordinate of this tensor.
    pub offset: usize,
    pub len: usize,
}

/// Maps a flat eligible-coordinate space onto parameter tensors.
///
/// Coordinates follow layout order: ascending block, the fc1 weight
/// row-major, then the fc1 bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibleMap {
    segments: Vec<EligibleSegment>,
    len: usize,
}

impl EligibleMap {
    pub fn from_param_ids(params: &ParamStore, ids: &[&str]) -> Result<Self> {
        let mut indices = ids
            .iter()
            .map(|id| params.index_of(id))
            .collect::<Result<Vec<_>>>()?;
        indices.sort_unstable();
        indices.dedup();
        Ok(Self::from_indices(params, &indices))
    }

    fn from_indices(params: &ParamStore, indices: &[usize]) -> Self {
        let mut offset = 0;
        let segments = indices
            .iter()
            .map(|&i| {
                let e = &params.entries()[i];
                let seg = EligibleSegment {
                    param_id: e.param_id.clone(),
                    param_index: i,
                    layer_index: e.layer_index,
                    shape: e.tensor.shape().to_vec(),
                    offset,
                    len: e.tensor.len(),
                };
                offset += seg.len;
                seg
            })
            .collect();
        Self {
            segments,
            len: offset,
        }
    }

    /// fc1 weight and bias of the last `l` blocks.
    pub fn last_blocks(cfg: &ModelConfig, l: usize) -> Result<Self> {
        if l == 0 || l > cfg.num_blocks {
            return Err(JpsError::Config(format!(
                "L = {l} outside 1..={}",
                cfg.num_blocks
            )));
        }
        let d = cfg.d_model;
        let h = cfg.mlp_hidden;
        let mut offset = 0;
        let mut segments = Vec::with_capacity(2 * l);
        for b in cfg.num_blocks - l..cfg.num_blocks {
            for (s, name, shape) in [
                (slot::FC1_W, "fc1.weight", vec![d, h]),
                (slot::FC1_B, "fc1.bias", vec![h]),
            ] {
                let len = shape.iter().product();
                segments.push(EligibleSegment {
                    param_id: format!("blocks.{b}.{name}"),
                    param_index: block_base(b) + s,
                    layer_index: b,
                    shape,
                    offset,
                    len,
                });
                offset += len;
            }
        }
        Ok(Self {
            segments,
            len: offset,
        })
    }

    pub fn empty() -> Self {
        Self {
            segments: Vec::new(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[EligibleSegment] {
        &self.segments
    }

    /// `(param_index, index within tensor)` of flat coordinate `j`.
    pub fn locate(&self, j: usize) -> Option<(usize, usize)> {
        if j >= self.len {
            return None;
        }
        let s = self.segments.partition_point(|s| s.offset + s.len <= j);
        let seg = &self.segments[s];
        Some((seg.param_index, j - seg.offset))
    }

    pub fn flatten(&self, params: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len);
        for s in &self.segments {
            out.extend_from_slice(params.tensor(s.param_index));
        }
        out
    }

    pub fn flatten_grads(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len);
        for s in &self.segments {
            out.extend_from_slice(grads.tensors()[s.param_index].data());
        }
        out
    }

    pub fn unflatten(&self, params: &mut ParamStore, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len {
            return Err(JpsError::Dimension(format!(
                "expected {} eligible coordinates, got {}",
                self.len,
                flat.len()
            )));
        }
        for s in &self.segments {
            let dst = params.tensor_mut(s.param_index);
            if dst.len() != s.len {
                return Err(JpsError::Dimension(format!(
                    "{} has {} coordinates, map expects {}",
                    s.param_id,
                    dst.len(),
                    s.len
                )));
            }
            dst.copy_from_slice(&flat[s.offset..s.offset + s.len]);
        }
        Ok(())
    }
}

//! SGD and Adam over an explicit set of tunable coordinates.
//!
//! Optimizer state is allocated per tunable coordinate only; every other
//! coordinate is neither read nor written.

use serde::{Deserialize, Serialize};

use crate::error::{JpsError, Result};
use crate::model::{EligibleMap, Gradients, ModelConfig, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Sorted `(param_index, coordinate)` pairs that an optimizer may touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TunableSet {
    coords: Vec<(usize, usize)>,
}

impl TunableSet {
    pub fn empty() -> Self {
        Self { coords: Vec::new() }
    }

    /// Every coordinate of every parameter.
    pub fn all(params: &ParamStore) -> Self {
        let coords = params
            .entries()
            .iter()
            .enumerate()
            .flat_map(|(pi, e)| (0..e.tensor.len()).map(move |c| (pi, c)))
            .collect();
        Self { coords }
    }

    /// Selected eligible coordinates, plus the classifier head when
    /// `include_head` is set.
    pub fn from_selection(
        params: &ParamStore,
        cfg: &ModelConfig,
        map: &EligibleMap,
        selected: &[usize],
        include_head: bool,
    ) -> Result<Self> {
        let mut coords = Vec::with_capacity(selected.len());
        for &j in selected {
            let loc = map.locate(j).ok_or_else(|| {
                JpsError::Consistency(format!(
                    "mask coordinate {j} outside eligible space of {}",
                    map.len()
                ))
            })?;
            coords.push(loc);
        }
        if include_head {
            let hb = crate::model::head_base(cfg);
            for pi in [hb, hb + 1] {
                let n = params
                    .entries()
                    .get(pi)
                    .ok_or_else(|| JpsError::Consistency("missing classifier head".into()))?
                    .tensor
                    .len();
                coords.extend((0..n).map(|c| (pi, c)));
            }
        }
        for &(pi, c) in &coords {
            let ok = params.entries().get(pi).is_some_and(|e| c < e.tensor.len());
            if !ok {
                return Err(JpsError::Consistency(format!(
                    "coordinate ({pi}, {c}) not present in parameters"
                )));
            }
        }
        coords.sort_unstable();
        coords.dedup();
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn contains(&self, pi: usize, c: usize) -> bool {
        self.coords.binary_search(&(pi, c)).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, tunable: &TunableSet) -> Self {
        let n = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam { .. } => tunable.len(),
        };
        Self {
            kind,
            lr,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Number of coordinates holding moment state.
    pub fn state_len(&self) -> usize {
        self.m.len()
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        tunable: &TunableSet,
    ) -> Result<()> {
        if let OptimizerKind::Adam { .. } = self.kind {
            if self.m.len() != tunable.len() {
                return Err(JpsError::Consistency(format!(
                    "optimizer state for {} coordinates, tunable set has {}",
                    self.m.len(),
                    tunable.len()
                )));
            }
        }
        if grads.tensors().len() != params.len() {
            return Err(JpsError::Consistency(
                "gradient/parameter count mismatch".into(),
            ));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for &(pi, c) in tunable.coords() {
                    let g = grads.tensors()[pi].data()[c];
                    params.tensor_mut(pi)[c] -= self.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for (k, &(pi, c)) in tunable.coords().iter().enumerate() {
                    let g = grads.tensors()[pi].data()[c];
                    self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
                    self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
                    let mhat = self.m[k] / bc1;
                    let vhat = self.v[k] / bc2;
                    params.tensor_mut(pi)[c] -= self.lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::backward;
    use crate::model::Batch;
    use crate::rng::SeededRng;

    fn setup() -> (ModelConfig, ParamStore, Gradients) {
        let cfg = ModelConfig {
            num_blocks: 2,
            d_model: 4,
            num_tokens: 2,
            mlp_hidden: 8,
            num_classes: 3,
            dropout_rate: 0.0,
        };
        let mut rng = SeededRng::new(21);
        let p = ParamStore::init(&cfg, &mut rng).unwrap();
        let x = rng.randn(&[4, 2, 4]);
        let b = Batch::new(x, vec![0, 1, 2, 1], vec![0; 4]).unwrap();
        let g = backward(&p, &cfg, &b).unwrap();
        (cfg, p, g)
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (_, mut p, g) = setup();
        let before = p.flatten_all();
        let t = TunableSet::all(&p);
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.01, &t);
        opt.step(&mut p, &g, &t).unwrap();
        let flat_g = g.flatten();
        for ((a, b), gv) in before.iter().zip(p.flatten_all()).zip(flat_g) {
            if gv.abs() > 1e-6 {
                assert!(((a - b).abs() - 0.01).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adam_state_only_for_tunable() {
        let (cfg, p, _) = setup();
        let map = EligibleMap::last_blocks(&cfg, 1).unwrap();
        let t = TunableSet::from_selection(&p, &cfg, &map, &[0, 5, 39], false).unwrap();
        let opt = OptimizerState::new(OptimizerKind::adam(), 0.01, &t);
        assert_eq!(opt.state_len(), 3);
        assert_eq!(
            OptimizerState::new(OptimizerKind::Sgd, 0.1, &t).state_len(),
            0
        );
    }

    #[test]
    fn bad_selection_is_consistency_error() {
        let (cfg, p, _) = setup();
        let map = EligibleMap::last_blocks(&cfg, 1).unwrap();
        assert!(matches!(
            TunableSet::from_selection(&p, &cfg, &map, &[40], false),
            Err(JpsError::Consistency(_))
        ));
    }
}

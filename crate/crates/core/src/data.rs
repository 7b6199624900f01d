//! Synthetic multi-domain benchmark with a controllable spurious feature,
//! leave-one-domain-out splits, and the pre-training stage producing `theta0`.
//!
//! Each sample is a feature row `[invariant | spurious | noise]` reshaped to
//! `num_tokens x d_model`. For class `c` in domain `e`:
//!
//! * invariant dims ~ N(mu_c, s^2), identical in every domain;
//! * spurious dims ~ N(gamma_e * v_c, s^2), so the sign and strength of the
//!   class signal depend on the domain;
//! * noise dims ~ N(0, (noise_scale * sigma_e)^2) with
//!   `sigma_e = 1 + noise_domain_step * e`.
//!
//! Domains `0..N-1` use `source_gammas`, the last domain uses `target_gamma`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{JpsError, Result};
use crate::model::{loss_and_grads, Batch, ModelConfig, ParamStore};
use crate::optim::{OptimizerKind, OptimizerState, TunableSet};
use crate::rng::{mix_seed, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub invariant_dims: usize,
    pub spurious_dims: usize,
    pub noise_dims: usize,
    pub samples_per_class_per_domain: usize,
    pub source_gammas: Vec<f64>,
    pub target_gamma: f64,
    pub noise_scale: f64,
    /// Within-class standard deviation `s` of invariant and spurious dims.
    pub within_class_std: f64,
    /// Scale of the class means `mu_c ~ N(0, invariant_scale^2)`.
    pub invariant_scale: f64,
    /// Scale of the spurious directions `v_c ~ N(0, spurious_scale^2)`.
    pub spurious_scale: f64,
    pub noise_domain_step: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            num_domains: 4,
            num_classes: 5,
            invariant_dims: 16,
            spurious_dims: 8,
            noise_dims: 8,
            samples_per_class_per_domain: 200,
            source_gammas: vec![0.9, 0.7, 0.5],
            target_gamma: -1.0,
            noise_scale: 1.0,
            within_class_std: 1.0,
            invariant_scale: 0.5,
            spurious_scale: 1.0,
            noise_domain_step: 0.5,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn dim(&self) -> usize {
        self.invariant_dims + self.spurious_dims + self.noise_dims
    }

    pub fn gamma(&self, domain: usize) -> f64 {
        if domain + 1 == self.num_domains {
            self.target_gamma
        } else {
            self.source_gammas[domain]
        }
    }

    pub fn noise_std(&self, domain: usize) -> f64 {
        self.noise_scale * (1.0 + self.noise_domain_step * domain as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(JpsError::Validation(m));
        if self.num_domains < 2 {
            return bad("num_domains must be at least 2".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.source_gammas.len() + 1 != self.num_domains {
            return bad(format!(
                "{} source gammas for {} domains",
                self.source_gammas.len(),
                self.num_domains
            ));
        }
        if self.source_gammas.iter().any(|g| !(*g > 0.0 && *g <= 1.0)) {
            return bad("source gammas must lie in (0, 1]".into());
        }
        if !self.target_gamma.is_finite() {
            return bad("target_gamma must be finite".into());
        }
        if self.samples_per_class_per_domain < 5 {
            return bad("need at least 5 samples per class per domain".into());
        }
        if self.dim() == 0 {
            return bad("feature dimension is zero".into());
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("within_class_std", self.within_class_std),
            ("invariant_scale", self.invariant_scale),
            ("spurious_scale", self.spurious_scale),
            ("noise_domain_step", self.noise_domain_step),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Model/benchmark agreement: one feature row fills the token grid.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if self.dim() != cfg.input_dim() {
            return Err(JpsError::Config(format!(
                "feature dims {} != num_tokens * d_model = {}",
                self.dim(),
                cfg.input_dim()
            )));
        }
        if self.num_classes != cfg.num_classes {
            return Err(JpsError::Config(format!(
                "benchmark has {} classes, model {}",
                self.num_classes, cfg.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    ValModelSelect,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::ValModelSelect => "val_model_select",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val_model_select" => Ok(SplitTag::ValModelSelect),
            other => Err(JpsError::Validation(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub domain_id: usize,
    /// `len x dim`, row-major.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub tags: Vec<SplitTag>,
}

impl DomainData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices_with(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i] == tag).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub spec: BenchmarkSpec,
    pub domains: Vec<DomainData>,
    /// Class means of the invariant block, `num_classes x invariant_dims`.
    pub invariant_means: Vec<Vec<f64>>,
    /// Spurious directions, `num_classes x spurious_dims`.
    pub spurious_dirs: Vec<Vec<f64>>,
}

const STREAM_MEANS: u64 = 1;
const STREAM_DOMAIN: u64 = 100;
const STREAM_SPLIT: u64 = 200;

fn draw_directions(spec: &BenchmarkSpec) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = SeededRng::with_stream(spec.seed, STREAM_MEANS);
    let mu = (0..spec.num_classes)
        .map(|_| {
            (0..spec.invariant_dims)
                .map(|_| spec.invariant_scale * rng.normal())
                .collect()
        })
        .collect();
    let v = (0..spec.num_classes)
        .map(|_| {
            (0..spec.spurious_dims)
                .map(|_| spec.spurious_scale * rng.normal())
                .collect()
        })
        .collect();
    (mu, v)
}

fn draw_sample(
    spec: &BenchmarkSpec,
    mu: &[f64],
    v: &[f64],
    gamma: f64,
    noise_std: f64,
    rng: &mut SeededRng,
    out: &mut Vec<f64>,
) {
    let s = spec.within_class_std;
    out.extend(mu.iter().map(|m| m + s * rng.normal()));
    out.extend(v.iter().map(|d| gamma * d + s * rng.normal()));
    out.extend((0..spec.noise_dims).map(|_| noise_std * rng.normal()));
}

/// Deterministic in `spec` (seed included). Classes are balanced and the
/// 80/20 train/model-selection split is stratified per class.
pub fn generate(spec: &BenchmarkSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let (mu, v) = draw_directions(spec);
    let per = spec.samples_per_class_per_domain;
    let n_train = (per as f64 * 0.8).round() as usize;
    let mut domains = Vec::with_capacity(spec.num_domains);
    for e in 0..spec.num_domains {
        let mut rng = SeededRng::with_stream(spec.seed, STREAM_DOMAIN + e as u64);
        let mut split_rng = SeededRng::with_stream(spec.seed, STREAM_SPLIT + e as u64);
        let gamma = spec.gamma(e);
        let noise_std = spec.noise_std(e);
        let total = per * spec.num_classes;
        let mut features = Vec::with_capacity(total * spec.dim());
        let mut labels = Vec::with_capacity(total);
        let mut tags = vec![SplitTag::ValModelSelect; total];
        for c in 0..spec.num_classes {
            for _ in 0..per {
                draw_sample(
                    spec,
                    &mu[c],
                    &v[c],
                    gamma,
                    noise_std,
                    &mut rng,
                    &mut features,
                );
                labels.push(c);
            }
            for &i in &split_rng.rand_perm(per)[..n_train] {
                tags[c * per + i] = SplitTag::Train;
            }
        }
        domains.push(DomainData {
            domain_id: e,
            features,
            labels,
            tags,
        });
    }
    Ok(DomainDataset {
        spec: spec.clone(),
        domains,
        invariant_means: mu,
        spurious_dirs: v,
    })
}

impl DomainDataset {
    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn batch(&self, cfg: &ModelConfig, domain: usize, idx: &[usize]) -> Result<Batch> {
        let d = &self.domains[domain];
        let dim = self.dim();
        let mut features = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            features.extend_from_slice(&d.features[i * dim..(i + 1) * dim]);
        }
        Batch::from_rows(
            cfg,
            &features,
            idx.iter().map(|&i| d.labels[i]).collect(),
            vec![domain; idx.len()],
        )
    }

    /// Batch over `(domain, index)` pairs drawn from several domains.
    pub fn pooled_batch(&self, cfg: &ModelConfig, picks: &[(usize, usize)]) -> Result<Batch> {
        let dim = self.dim();
        let mut features = Vec::with_capacity(picks.len() * dim);
        let mut labels = Vec::with_capacity(picks.len());
        let mut domain_ids = Vec::with_capacity(picks.len());
        for &(e, i) in picks {
            let d = &self.domains[e];
            features.extend_from_slice(&d.features[i * dim..(i + 1) * dim]);
            labels.push(d.labels[i]);
            domain_ids.push(e);
        }
        Batch::from_rows(cfg, &features, labels, domain_ids)
    }

    /// SHA-256 of every feature bit pattern, label and split tag.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.domains {
            h.update((d.domain_id as u64).to_le_bytes());
            for v in &d.features {
                h.update(v.to_le_bytes());
            }
            for (y, t) in d.labels.iter().zip(&d.tags) {
                h.update((*y as u64).to_le_bytes());
                h.update(t.as_str().as_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSplit {
    pub domain_id: usize,
    pub train: Vec<usize>,
    pub val_model_select: Vec<usize>,
    /// Subset of `train` used for gradient-based selection.
    pub val_jps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LodoSplit {
    pub target: usize,
    pub sources: Vec<SourceSplit>,
    pub target_test: Vec<usize>,
}

/// Holds out `target` entirely; each source keeps its 80/20 split and draws
/// `val_jps_size` selection samples from its training side.
pub fn leave_one_out_splits(
    ds: &DomainDataset,
    target: usize,
    val_jps_size: usize,
) -> Result<LodoSplit> {
    let n = ds.domains.len();
    if target >= n {
        return Err(JpsError::Validation(format!(
            "target domain {target} out of range 0..{n}"
        )));
    }
    let mut sources = Vec::with_capacity(n - 1);
    for d in ds.domains.iter().filter(|d| d.domain_id != target) {
        let train = d.indices_with(SplitTag::Train);
        if val_jps_size == 0 || val_jps_size > train.len() {
            return Err(JpsError::Validation(format!(
                "val_jps size {val_jps_size} not in 1..={} for domain {}",
                train.len(),
                d.domain_id
            )));
        }
        let seed = mix_seed(ds.spec.seed, ((target as u64) << 32) | d.domain_id as u64);
        let picks = SeededRng::new(seed).choose_sorted(train.len(), val_jps_size);
        let val_jps = picks.iter().map(|&k| train[k]).collect();
        sources.push(SourceSplit {
            domain_id: d.domain_id,
            val_model_select: d.indices_with(SplitTag::ValModelSelect),
            train,
            val_jps,
        });
    }
    Ok(LodoSplit {
        target,
        sources,
        target_test: (0..ds.domains[target].len()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 3e-3,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub probe_loss_start: f64,
    pub probe_loss_end: f64,
}

/// One minibatch from the pre-training meta-distribution: a single
/// `gamma ~ U(-1, 1)` for the whole batch, classes uniform, unit noise scale.
fn meta_batch(
    spec: &BenchmarkSpec,
    cfg: &ModelConfig,
    mu: &[Vec<f64>],
    v: &[Vec<f64>],
    n: usize,
    rng: &mut SeededRng,
) -> Result<Batch> {
    let gamma = rng.uniform_range(-1.0, 1.0);
    let mut features = Vec::with_capacity(n * spec.dim());
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.below(spec.num_classes);
        draw_sample(
            spec,
            &mu[c],
            &v[c],
            gamma,
            spec.noise_scale,
            rng,
            &mut features,
        );
        labels.push(c);
    }
    Batch::from_rows(cfg, &features, labels, vec![usize::MAX; n])
}

/// Trains the full model with Adam on the meta-distribution and freezes the
/// result as `theta0`. Spurious dims are uninformative on average there, so
/// `theta0` mostly encodes the invariant signal.
pub fn pretrain_theta0(
    cfg: &ModelConfig,
    spec: &BenchmarkSpec,
    pre: &PretrainConfig,
    seed: u64,
) -> Result<(ParamStore, PretrainLog)> {
    spec.validate()?;
    spec.check_model(cfg)?;
    let root = SeededRng::new(seed);
    let mut params = ParamStore::init(cfg, &mut root.derive(1))?;
    let (mu, v) = draw_directions(spec);
    let mut probe_rng = root.derive(2);
    let probes: Vec<Batch> = (0..8)
        .map(|_| meta_batch(spec, cfg, &mu, &v, 64, &mut probe_rng))
        .collect::<Result<_>>()?;
    let probe_loss = |p: &ParamStore| -> Result<f64> {
        let mut total = 0.0;
        for b in &probes {
            total += loss_and_grads(p, cfg, b, None)?.0;
        }
        Ok(total / probes.len() as f64)
    };
    let probe_loss_start = probe_loss(&params)?;

    let tunable = TunableSet::all(&params);
    let mut opt = OptimizerState::new(OptimizerKind::adam(), pre.lr, &tunable);
    let mut data_rng = root.derive(3);
    let mut drop_rng = root.derive(4);
    for step in 0..pre.steps {
        let b = meta_batch(spec, cfg, &mu, &v, pre.batch_size, &mut data_rng)?;
        let (l, g) = loss_and_grads(&params, cfg, &b, Some(&mut drop_rng))
            .map_err(|e| JpsError::Training(format!("pretrain step {step}: {e}")))?;
        if !l.is_finite() {
            return Err(JpsError::Training(format!(
                "pretrain diverged at step {step}"
            )));
        }
        opt.step(&mut params, &g, &tunable)?;
    }
    let probe_loss_end = probe_loss(&params)?;
    if !probe_loss_end.is_finite() {
        return Err(JpsError::Training("pretrain diverged".into()));
    }
    params.snapshot_theta0();
    Ok((
        params,
        PretrainLog {
            probe_loss_start,
            probe_loss_end,
        },
    ))
}

/// Writes `domain_<e>.csv` per domain with columns
/// `feature_0..feature_{d-1}, label, domain_id, split_tag`.
pub fn export_csv(ds: &DomainDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let dim = ds.dim();
    for d in &ds.domains {
        let mut w = csv::Writer::from_path(dir.join(format!("domain_{}.csv", d.domain_id)))?;
        let mut header: Vec<String> = (0..dim).map(|k| format!("feature_{k}")).collect();
        header.extend(["label", "domain_id", "split_tag"].map(String::from));
        w.write_record(&header)?;
        for i in 0..d.len() {
            let mut rec: Vec<String> = d.features[i * dim..(i + 1) * dim]
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            rec.push(d.labels[i].to_string());
            rec.push(d.domain_id.to_string());
            rec.push(d.tags[i].as_str().to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Inverse of [`export_csv`]; `spec` supplies the metadata not stored per row.
pub fn import_csv(spec: &BenchmarkSpec, dir: &Path) -> Result<DomainDataset> {
    spec.validate()?;
    let dim = spec.dim();
    let mut domains = Vec::with_capacity(spec.num_domains);
    for e in 0..spec.num_domains {
        let mut r = csv::Reader::from_path(dir.join(format!("domain_{e}.csv")))?;
        if r.headers()?.len() != dim + 3 {
            return Err(JpsError::Validation(format!(
                "domain_{e}.csv has {} columns, expected {}",
                r.headers()?.len(),
                dim + 3
            )));
        }
        let mut d = DomainData {
            domain_id: e,
            features: Vec::new(),
            labels: Vec::new(),
            tags: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .parse()
                    .map_err(|_| JpsError::Validation(format!("bad number {:?}", &rec[k])))
            };
            for k in 0..dim {
                d.features.push(num(k)?);
            }
            let label: usize = rec[dim]
                .parse()
                .map_err(|_| JpsError::Validation(format!("bad label {:?}", &rec[dim])))?;
            if label >= spec.num_classes {
                return Err(JpsError::Validation(format!("label {label} out of range")));
            }
            if rec[dim + 1] != *e.to_string() {
                return Err(JpsError::Validation(format!(
                    "row in domain_{e}.csv claims domain {}",
                    &rec[dim + 1]
                )));
            }
            d.labels.push(label);
            d.tags.push(SplitTag::parse(&rec[dim + 2])?);
        }
        domains.push(d);
    }
    let (mu, v) = draw_directions(spec);
    Ok(DomainDataset {
        spec: spec.clone(),
        domains,
        invariant_means: mu,
        spurious_dirs: v,
    })
}

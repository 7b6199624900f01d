//! Fine-tuning under a fixed mask and the leave-one-domain-out experiment loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate, leave_one_out_splits, pretrain_theta0, BenchmarkSpec, DomainDataset, LodoSplit,
    PretrainConfig,
};
use crate::error::{JpsError, Result};
use crate::model::{
    forward, load_checkpoint, loss_and_grads, save_checkpoint, Batch, EligibleMap, Gradients,
    ModelConfig, ParamStore,
};
use crate::optim::{OptimizerKind, OptimizerState, TunableSet};
use crate::rng::{mix_seed, SeededRng};
use crate::selection::{
    build_mask, domain_gradients, eligible_coords, GradSnapshot, Mask, Provenance, SelectorKind,
    StageCounts,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub selector: SelectorKind,
    pub rho: f64,
    #[serde(rename = "L")]
    pub l: usize,
    pub lr: f64,
    pub dropout_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub val_multiplier: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub eval_every: usize,
    /// Samples per backward pass when computing selection gradients.
    pub grad_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            selector: SelectorKind::Jps,
            rho: 0.01,
            l: 2,
            lr: 3e-3,
            dropout_rate: 0.0,
            steps: 300,
            batch_size: 32,
            val_multiplier: 10,
            optimizer: OptimizerKind::adam(),
            weight_decay: 0.0,
            eval_every: 50,
            grad_chunk: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(JpsError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.weight_decay != 0.0 {
            return bad("weight_decay is fixed at 0".into());
        }
        if ![10, 20, 50].contains(&self.val_multiplier) {
            return bad(format!(
                "val_multiplier {} not in {{10, 20, 50}}",
                self.val_multiplier
            ));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.grad_chunk == 0 {
            return bad("batch_size, eval_every and grad_chunk must be positive".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho {} outside (0, 1]", self.rho));
        }
        if self.l == 0 || self.l > model.num_blocks {
            return bad(format!("L = {} outside 1..={}", self.l, model.num_blocks));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn val_jps_size(&self) -> usize {
        self.val_multiplier * self.batch_size
    }
}

/// One optimizer update restricted to `mask` (and the classifier head when
/// `train_head`). Coordinates outside the tunable set are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn masked_step(
    params: &mut ParamStore,
    grads: &Gradients,
    mask: &Mask,
    map: &EligibleMap,
    opt: &mut OptimizerState,
    cfg: &ModelConfig,
    train_head: bool,
) -> Result<()> {
    if mask.num_eligible() != map.len() {
        return Err(JpsError::Consistency(format!(
            "mask built for {} eligible coordinates, map has {}",
            mask.num_eligible(),
            map.len()
        )));
    }
    let tunable = TunableSet::from_selection(params, cfg, map, mask.selected(), train_head)?;
    opt.step(params, grads, &tunable)
}

/// Argmax accuracy (ties to the lower class), dropout off.
pub fn evaluate(params: &ParamStore, cfg: &ModelConfig, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(JpsError::Validation(
            "cannot evaluate an empty split".into(),
        ));
    }
    let logits = forward(params, cfg, batch, false, &mut SeededRng::new(0))?;
    let c = cfg.num_classes;
    let correct = logits
        .data()
        .chunks_exact(c)
        .zip(&batch.labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Hash binding a mask to the exact data, `theta0` and held-out domain.
pub fn provenance_hash(ds: &DomainDataset, theta0: &ParamStore, target: usize, l: usize) -> String {
    let mut h = Sha256::new();
    h.update(ds.content_hash().as_bytes());
    h.update(theta0.at_theta0().content_hash().as_bytes());
    h.update((target as u64).to_le_bytes());
    h.update((l as u64).to_le_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    pub target_domain: usize,
    pub selector: SelectorKind,
    pub rho: f64,
    #[serde(rename = "L")]
    pub l: usize,
    pub best_val_accuracy: f64,
    pub target_accuracy_at_best_val: f64,
    pub best_step: usize,
    pub tunable_backbone_params: usize,
    pub stage_counts: StageCounts,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub entry: RunEntry,
    pub params: ParamStore,
    pub source_loss_start: f64,
    pub source_loss_end: f64,
}

/// Everything derived from `(benchmark, model, seed)`: the data and `theta0`.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub dataset: DomainDataset,
    pub theta0: ParamStore,
}

/// Everything derived from one held-out target: splits, selection sets and
/// the gradient snapshot at `theta0`.
#[derive(Debug, Clone)]
pub struct TargetContext {
    pub split: LodoSplit,
    pub map: EligibleMap,
    pub grads: GradSnapshot,
    pub provenance_hash: String,
    source_train: Vec<(usize, usize)>,
    val_batch: Batch,
    target_batch: Batch,
    probe_batch: Batch,
}

const STREAM_HEAD: u64 = 11;
const STREAM_SAMPLING: u64 = 12;
const STREAM_DROPOUT: u64 = 13;
const STREAM_RANDOM_MASK: u64 = 14;

fn pooled_indices(
    split: &LodoSplit,
    pick: impl Fn(&crate::data::SourceSplit) -> &[usize],
) -> Vec<(usize, usize)> {
    split
        .sources
        .iter()
        .flat_map(|s| pick(s).iter().map(move |&i| (s.domain_id, i)))
        .collect()
}

impl TargetContext {
    pub fn new(
        ctx: &SeedContext,
        cfg: &ModelConfig,
        train: &TrainConfig,
        target: usize,
    ) -> Result<Self> {
        let ds = &ctx.dataset;
        let split = leave_one_out_splits(ds, target, train.val_jps_size())?;
        let map = eligible_coords(cfg, train.l)?;
        let sets = split
            .sources
            .iter()
            .map(|s| ds.batch(cfg, s.domain_id, &s.val_jps))
            .collect::<Result<Vec<_>>>()?;
        let grads = domain_gradients(&ctx.theta0, cfg, &sets, &map, train.grad_chunk)?;
        let source_train = pooled_indices(&split, |s| &s.train);
        let val_batch = ds.pooled_batch(cfg, &pooled_indices(&split, |s| &s.val_model_select))?;
        let target_batch = ds.batch(cfg, target, &split.target_test)?;
        let probe: Vec<(usize, usize)> = source_train
            .iter()
            .step_by((source_train.len() / 512).max(1))
            .copied()
            .collect();
        let probe_batch = ds.pooled_batch(cfg, &probe)?;
        Ok(Self {
            provenance_hash: provenance_hash(ds, &ctx.theta0, target, train.l),
            split,
            map,
            grads,
            source_train,
            val_batch,
            target_batch,
            probe_batch,
        })
    }

    pub fn target(&self) -> usize {
        self.split.target
    }

    pub fn source_train(&self) -> &[(usize, usize)] {
        &self.source_train
    }

    pub fn val_batch(&self) -> &Batch {
        &self.val_batch
    }

    pub fn target_batch(&self) -> &Batch {
        &self.target_batch
    }

    /// Mask for `selector` at `rho` from this target's gradient snapshot.
    pub fn build_mask(
        &self,
        seed: u64,
        selector: SelectorKind,
        rho: f64,
        l: usize,
    ) -> Result<Mask> {
        let mut rng =
            SeededRng::with_stream(mix_seed(seed, self.target() as u64), STREAM_RANDOM_MASK);
        build_mask(
            selector,
            &self.grads,
            rho,
            l,
            &mut rng,
            Provenance {
                seed,
                dataset_hash: self.provenance_hash.clone(),
            },
        )
    }
}

/// Trains a fresh classifier head plus the masked coordinates of `theta0` on
/// pooled source data, tracking the best source-validation checkpoint.
pub fn train(
    ctx: &SeedContext,
    tctx: &TargetContext,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mask: &Mask,
    record_wall_time: bool,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    cfg.validate(model_cfg)?;
    if mask.provenance().dataset_hash != tctx.provenance_hash {
        return Err(JpsError::Provenance(
            "mask was built for a different model, dataset or target".into(),
        ));
    }
    if mask.l() != cfg.l || mask.num_eligible() != tctx.map.len() {
        return Err(JpsError::Consistency(format!(
            "mask has L={} over {} coordinates, run expects L={} over {}",
            mask.l(),
            mask.num_eligible(),
            cfg.l,
            tctx.map.len()
        )));
    }
    let run_cfg = ModelConfig {
        dropout_rate: cfg.dropout_rate,
        ..model_cfg.clone()
    };
    // Shared by every selector and rho of a (seed, target) pair so that
    // comparisons between masks see the same head init and minibatches.
    let root = SeededRng::new(mix_seed(ctx.seed, tctx.target() as u64));
    let mut params = ctx.theta0.at_theta0();
    params.reinit_head(&run_cfg, &mut root.derive(STREAM_HEAD));
    let start_params = params.clone();
    let tunable = TunableSet::from_selection(&params, &run_cfg, &tctx.map, mask.selected(), true)?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr, &tunable);
    let mut sample_rng = root.derive(STREAM_SAMPLING);
    let mut drop_rng = root.derive(STREAM_DROPOUT);
    let ds = &ctx.dataset;

    let source_loss = |p: &ParamStore| -> Result<f64> {
        Ok(loss_and_grads(p, &run_cfg, &tctx.probe_batch, None)?.0)
    };
    let source_loss_start = source_loss(&params)?;

    let mut best_val = evaluate(&params, &run_cfg, &tctx.val_batch)?;
    let mut best_target = evaluate(&params, &run_cfg, &tctx.target_batch)?;
    let mut best_step = 0;
    for step in 1..=cfg.steps {
        let picks: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| tctx.source_train[sample_rng.below(tctx.source_train.len())])
            .collect();
        let batch = ds.pooled_batch(&run_cfg, &picks)?;
        let dropout = (cfg.dropout_rate > 0.0).then_some(&mut drop_rng);
        let (l, g) = loss_and_grads(&params, &run_cfg, &batch, dropout)
            .map_err(|e| JpsError::Training(format!("step {step}: {e}")))?;
        if !l.is_finite() {
            return Err(JpsError::Training(format!(
                "non-finite loss at step {step}"
            )));
        }
        opt.step(&mut params, &g, &tunable)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let val = evaluate(&params, &run_cfg, &tctx.val_batch)?;
            if val > best_val {
                best_val = val;
                best_target = evaluate(&params, &run_cfg, &tctx.target_batch)?;
                best_step = step;
            }
        }
    }
    let source_loss_end = source_loss(&params)?;
    verify_frozen(&params, &start_params, &tunable)?;

    let entry = RunEntry {
        seed: ctx.seed,
        target_domain: tctx.target(),
        selector: mask.kind(),
        rho: cfg.rho,
        l: cfg.l,
        best_val_accuracy: best_val,
        target_accuracy_at_best_val: best_target,
        best_step,
        tunable_backbone_params: mask.len(),
        stage_counts: mask.stage_counts(),
        wall_time_s: if record_wall_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        },
    };
    Ok(TrainOutcome {
        entry,
        params,
        source_loss_start,
        source_loss_end,
    })
}

/// Every coordinate outside `tunable` must be bitwise-equal to `reference`.
pub fn verify_frozen(
    params: &ParamStore,
    reference: &ParamStore,
    tunable: &TunableSet,
) -> Result<()> {
    for (pi, (e, r)) in params.entries().iter().zip(reference.entries()).enumerate() {
        for (c, (a, b)) in e.tensor.data().iter().zip(r.tensor.data()).enumerate() {
            if a.to_bits() != b.to_bits() && !tunable.contains(pi, c) {
                return Err(JpsError::Consistency(format!(
                    "frozen coordinate {}[{c}] changed",
                    e.param_id
                )));
            }
        }
    }
    Ok(())
}

/// Pretrained `theta0` for `seed`, read from / written to `cache_dir` keyed by
/// a content hash of everything that determines it.
pub fn pretrain_cached(
    model_cfg: &ModelConfig,
    spec: &BenchmarkSpec,
    pre: &PretrainConfig,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<ParamStore> {
    let Some(dir) = cache_dir else {
        return Ok(pretrain_theta0(model_cfg, spec, pre, seed)?.0);
    };
    let key = {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(model_cfg)?);
        h.update(serde_json::to_vec(spec)?);
        h.update(serde_json::to_vec(pre)?);
        h.update(seed.to_le_bytes());
        h.update(crate::ARTIFACT_VERSION.as_bytes());
        hex::encode(h.finalize())
    };
    let path: PathBuf = dir.join(format!("theta0-{key}.json"));
    if path.exists() {
        let (cfg, params) = load_checkpoint(&path)?;
        if &cfg == model_cfg {
            return Ok(params);
        }
    }
    let (params, _) = pretrain_theta0(model_cfg, spec, pre, seed)?;
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!("theta0-{key}.json.{}.tmp", std::process::id()));
    save_checkpoint(&tmp, model_cfg, &params)?;
    std::fs::rename(&tmp, &path)?;
    Ok(params)
}

/// Data and `theta0` for one seed. The benchmark is regenerated with its
/// seed replaced by `seed`.
pub fn prepare_seed(
    spec: &BenchmarkSpec,
    model_cfg: &ModelConfig,
    pre: &PretrainConfig,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<SeedContext> {
    spec.check_model(model_cfg)?;
    let spec = BenchmarkSpec {
        seed,
        ..spec.clone()
    };
    let dataset = generate(&spec)?;
    let theta0 = pretrain_cached(model_cfg, &spec, pre, seed, cache_dir)?;
    Ok(SeedContext {
        seed,
        dataset,
        theta0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mean_target_accuracy: f64,
    pub std_target_accuracy: f64,
    pub mean_val_accuracy: f64,
    pub std_val_accuracy: f64,
}

/// Mean and sample standard deviation (0 for a single run).
pub fn aggregate(entries: &[RunEntry]) -> Aggregate {
    let stats = |xs: Vec<f64>| {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return (0.0, 0.0);
        }
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let (mt, st) = stats(
        entries
            .iter()
            .map(|e| e.target_accuracy_at_best_val)
            .collect(),
    );
    let (mv, sv) = stats(entries.iter().map(|e| e.best_val_accuracy).collect());
    Aggregate {
        runs: entries.len(),
        mean_target_accuracy: mt,
        std_target_accuracy: st,
        mean_val_accuracy: mv,
        std_val_accuracy: sv,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub artifact_version: String,
    pub config_hash: String,
    pub entries: Vec<RunEntry>,
    pub aggregate: Aggregate,
    pub model: ModelConfig,
    pub data: BenchmarkSpec,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LodoOptions {
    pub cache_dir: Option<PathBuf>,
    pub record_wall_time: bool,
    pub config_hash: String,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

/// One experiment cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub seed_index: usize,
    pub target: usize,
    pub selector: SelectorKind,
    pub rho: f64,
}

/// Runs every cell against prepared seed contexts. Results come back in
/// `cells` order regardless of scheduling.
pub fn run_cells(
    seeds: &[SeedContext],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    cells: &[Cell],
    opts: &LodoOptions,
) -> Result<Vec<RunEntry>> {
    let n_targets = seeds.first().map_or(0, |s| s.dataset.domains.len());
    let pairs: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|s| (0..n_targets).map(move |t| (s, t)))
        .filter(|&(s, t)| cells.iter().any(|c| c.seed_index == s && c.target == t))
        .collect();
    let work = || -> Result<Vec<RunEntry>> {
        let targets: Vec<((usize, usize), TargetContext)> = pairs
            .par_iter()
            .map(|&(s, t)| {
                Ok((
                    (s, t),
                    TargetContext::new(&seeds[s], model_cfg, train_cfg, t)?,
                ))
            })
            .collect::<Result<_>>()?;
        cells
            .par_iter()
            .map(|c| {
                let tctx = &targets
                    .iter()
                    .find(|(k, _)| *k == (c.seed_index, c.target))
                    .expect("target context prepared")
                    .1;
                let ctx = &seeds[c.seed_index];
                let cfg = TrainConfig {
                    selector: c.selector,
                    rho: c.rho,
                    ..train_cfg.clone()
                };
                let mask = tctx.build_mask(ctx.seed, c.selector, c.rho, cfg.l)?;
                Ok(train(ctx, tctx, model_cfg, &cfg, &mask, opts.record_wall_time)?.entry)
            })
            .collect()
    };
    with_pool(opts.threads, work)
}

pub(crate) fn with_pool<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> Result<T> + Send,
) -> Result<T> {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| JpsError::Config(format!("thread pool: {e}")))?
            .install(f),
        None => f(),
    }
}

/// Prepares (or loads) `theta0` for each seed.
pub fn prepare_seeds(
    spec: &BenchmarkSpec,
    model_cfg: &ModelConfig,
    pre: &PretrainConfig,
    seeds: &[u64],
    opts: &LodoOptions,
) -> Result<Vec<SeedContext>> {
    let dir = opts.cache_dir.as_deref();
    with_pool(opts.threads, || {
        seeds
            .par_iter()
            .map(|&s| prepare_seed(spec, model_cfg, pre, s, dir))
            .collect()
    })
}

/// Leave-one-domain-out over every seed and target for the configured
/// selector and rho.
pub fn lodo_run(
    spec: &BenchmarkSpec,
    model_cfg: &ModelConfig,
    pre: &PretrainConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    opts: &LodoOptions,
) -> Result<RunReport> {
    if seeds.is_empty() {
        return Err(JpsError::Config("at least one seed is required".into()));
    }
    train_cfg.validate(model_cfg)?;
    let started = Instant::now();
    let contexts = prepare_seeds(spec, model_cfg, pre, seeds, opts)?;
    let cells: Vec<Cell> = (0..seeds.len())
        .flat_map(|s| {
            (0..spec.num_domains).map(move |t| Cell {
                seed_index: s,
                target: t,
                selector: train_cfg.selector,
                rho: train_cfg.rho,
            })
        })
        .collect();
    let entries = run_cells(&contexts, model_cfg, train_cfg, &cells, opts)?;
    Ok(RunReport {
        artifact_version: crate::ARTIFACT_VERSION.to_string(),
        config_hash: opts.config_hash.clone(),
        aggregate: aggregate(&entries),
        entries,
        model: model_cfg.clone(),
        data: spec.clone(),
        pretrain: *pre,
        train: train_cfg.clone(),
        seeds: seeds.to_vec(),
        wall_time_s: if opts.record_wall_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        },
    })
}

pub const CSV_COLUMNS: [&str; 11] = [
    "seed",
    "target_domain",
    "selector",
    "rho",
    "L",
    "best_val_acc",
    "target_acc",
    "tunable_params",
    "step1_count",
    "step2_count",
    "wall_time_s",
];

/// CSV rows for `entries`, preceded by a `#` comment line carrying the
/// artifact version and config hash.
pub fn entries_to_csv(entries: &[RunEntry], config_hash: &str) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for e in entries {
        w.write_record([
            e.seed.to_string(),
            e.target_domain.to_string(),
            e.selector.to_string(),
            format!("{:?}", e.rho),
            e.l.to_string(),
            format!("{:?}", e.best_val_accuracy),
            format!("{:?}", e.target_accuracy_at_best_val),
            e.tunable_backbone_params.to_string(),
            e.stage_counts.step1_count.to_string(),
            e.stage_counts.step2_count.to_string(),
            format!("{:?}", e.wall_time_s),
        ])?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| JpsError::Io(e.into_error()))?)
        .expect("csv output is utf-8");
    Ok(format!(
        "# jps {} config_hash={config_hash}\n{body}",
        crate::ARTIFACT_VERSION
    ))
}

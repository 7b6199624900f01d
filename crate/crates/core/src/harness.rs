//! Experiment configuration and the driver behind each CLI subcommand.
//!
//! Every command reads one [`ExperimentConfig`], writes its outputs under
//! `output_dir`, and stamps each file with the config hash and artifact
//! version.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BenchmarkSpec, PretrainConfig, SplitTag};
use crate::diagnostics::{
    a_distance_proxy, bound_terms, jps_vs_direct_cmin, m_bar_agreement, mask_rank_report,
    BoundTerms, CminComparison, LayerRank, ProxyConfig, ProxyResult,
};
use crate::error::{JpsError, Result};
use crate::model::{
    backward, finite_diff_check_with, pooled_features, Batch, GradCheckReport, ModelConfig,
    ParamStore,
};
use crate::rng::{mix_seed, SeededRng};
use crate::selection::{mask_stats, MaskFile, MaskStats, SelectorKind};
use crate::tensor::Tensor;
use crate::trainer::{
    aggregate, entries_to_csv, prepare_seed, prepare_seeds, run_cells, train, Aggregate, Cell,
    LodoOptions, RunEntry, RunReport, SeedContext, TargetContext, TrainConfig,
};

pub const CACHE_ENV: &str = "JPS_CACHE_DIR";

pub const DEFAULT_RHO_GRID: [f64; 8] = [0.2, 0.1, 0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub beta: f64,
    pub proxy_enabled: bool,
    pub proxy: ProxyConfig,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            proxy_enabled: true,
            proxy: ProxyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub batch_size: usize,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            h: 1e-5,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: BenchmarkSpec,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub diagnostics: DiagnosticsConfig,
    pub gradcheck: GradcheckConfig,
    pub output_dir: PathBuf,
    /// Each seed regenerates the benchmark and `theta0`; `data.seed` is ignored.
    pub seeds: Vec<u64>,
    /// Off by default so reports are byte-reproducible.
    pub record_wall_time: bool,
    /// Worker threads for sweeps; `None` uses every core.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: BenchmarkSpec::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            gradcheck: GradcheckConfig::default(),
            output_dir: PathBuf::from("jps-out"),
            seeds: vec![0],
            record_wall_time: false,
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(s).map_err(|e| JpsError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data
            .validate()
            .map_err(|e| JpsError::Config(e.to_string()))?;
        self.data
            .check_model(&self.model)
            .map_err(|e| JpsError::Config(e.to_string()))?;
        self.train.validate(&self.model)?;
        if self.seeds.is_empty() {
            return Err(JpsError::Config("seeds must not be empty".into()));
        }
        if !(self.diagnostics.beta > 0.0 && self.diagnostics.beta.is_finite()) {
            return Err(JpsError::Config("diagnostics.beta must be positive".into()));
        }
        if self.gradcheck.batch_size == 0 || self.gradcheck.h <= 0.0 {
            return Err(JpsError::Config(
                "gradcheck batch_size and h must be positive".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, leaving out `output_dir` and
    /// `threads` since neither changes any result. Formatting and key order
    /// of the input file do not matter.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
            obj.remove("threads");
        }
        let bytes = serde_json::to_vec(&v).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// `JPS_CACHE_DIR` if set, else `<output_dir>/cache`.
    pub fn cache_dir(&self) -> PathBuf {
        match std::env::var_os(CACHE_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => self.output_dir.join("cache"),
        }
    }

    fn lodo_options(&self) -> LodoOptions {
        LodoOptions {
            cache_dir: Some(self.cache_dir()),
            record_wall_time: self.record_wall_time,
            config_hash: self.hash(),
            threads: self.threads,
        }
    }
}

/// Writes `contents` via a temporary file and rename.
pub fn write_output(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn to_json_line<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutput {
    pub artifact_version: String,
    pub config_hash: String,
    pub report: GradCheckReport,
}

/// Finite-difference check of the configured model at a seeded random
/// initialization on a small slice of the benchmark. `sabotage` corrupts one
/// analytic gradient entry (negative control).
pub fn cmd_gradcheck(cfg: &ExperimentConfig, sabotage: bool) -> Result<GradcheckOutput> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let model = ModelConfig {
        dropout_rate: 0.0,
        ..cfg.model.clone()
    };
    let ds = crate::data::generate(&BenchmarkSpec {
        seed,
        ..cfg.data.clone()
    })?;
    let idx: Vec<usize> = (0..cfg.gradcheck.batch_size.min(ds.domains[0].len()))
        .map(|i| i * ds.domains[0].len() / cfg.gradcheck.batch_size)
        .collect();
    let batch = ds.batch(&model, 0, &idx)?;
    let params = ParamStore::init(&model, &mut SeededRng::new(mix_seed(seed, 0x6772)))?;
    let grad_fn = |p: &ParamStore, c: &ModelConfig, b: &Batch| {
        let mut g = backward(p, c, b)?;
        if sabotage {
            let t = &mut g.tensors_mut()[2];
            t.data_mut()[0] += 1.0;
        }
        Ok(g)
    };
    let report = finite_diff_check_with(
        &params,
        &model,
        &batch,
        cfg.gradcheck.h,
        cfg.gradcheck.tolerance,
        grad_fn,
    )?;
    let out = GradcheckOutput {
        artifact_version: crate::ARTIFACT_VERSION.to_string(),
        config_hash: cfg.hash(),
        report,
    };
    write_output(&cfg.output_dir.join("gradcheck.json"), &to_json_line(&out)?)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectArgs {
    pub selector: Option<SelectorKind>,
    pub rho: Option<f64>,
    pub l: Option<usize>,
    pub target: usize,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    fn with_select_overrides(&self, args: &SelectArgs) -> Result<Self> {
        let mut c = self.clone();
        if let Some(s) = args.selector {
            c.train.selector = s;
        }
        if let Some(r) = args.rho {
            c.train.rho = r;
        }
        if let Some(l) = args.l {
            c.train.l = l;
        }
        c.validate()?;
        if args.target >= c.data.num_domains {
            return Err(JpsError::Config(format!(
                "target {} outside 0..{}",
                args.target, c.data.num_domains
            )));
        }
        Ok(c)
    }
}

fn seed_context(cfg: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    prepare_seed(
        &cfg.data,
        &cfg.model,
        &cfg.pretrain,
        seed,
        Some(&cfg.cache_dir()),
    )
}

/// Builds the mask for one held-out target and writes it as JSON.
pub fn cmd_select(cfg: &ExperimentConfig, args: &SelectArgs) -> Result<(PathBuf, MaskFile)> {
    let c = cfg.with_select_overrides(args)?;
    let seed = args.seed.unwrap_or(c.seeds[0]);
    let ctx = seed_context(&c, seed)?;
    let tctx = TargetContext::new(&ctx, &c.model, &c.train, args.target)?;
    let mask = tctx.build_mask(seed, c.train.selector, c.train.rho, c.train.l)?;
    let file = MaskFile::from_mask(&mask, args.target, &c.hash());
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| c.output_dir.join("mask.json"));
    write_output(&path, &file.to_json()?)?;
    Ok((path, file))
}

/// Leave-one-domain-out training. Without a mask file, masks are built per
/// seed and target from the config; with one, only the mask's own
/// `(seed, target)` cell is trained. Writes `report.json` and `report.csv`.
pub fn cmd_train(cfg: &ExperimentConfig, mask_path: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let opts = cfg.lodo_options();
    let report = match mask_path {
        None => crate::trainer::lodo_run(
            &cfg.data,
            &cfg.model,
            &cfg.pretrain,
            &cfg.train,
            &cfg.seeds,
            &opts,
        )?,
        Some(p) => {
            let file = MaskFile::from_json(&std::fs::read_to_string(p)?)?;
            let mask = file.to_mask()?;
            let train_cfg = TrainConfig {
                selector: file.selector_kind,
                rho: file.rho,
                l: file.l,
                ..cfg.train.clone()
            };
            train_cfg.validate(&cfg.model)?;
            if file.target_domain >= cfg.data.num_domains {
                return Err(JpsError::Provenance(format!(
                    "mask targets domain {} but benchmark has {}",
                    file.target_domain, cfg.data.num_domains
                )));
            }
            let ctx = seed_context(cfg, file.seed)?;
            let tctx = TargetContext::new(&ctx, &cfg.model, &train_cfg, file.target_domain)?;
            let started = std::time::Instant::now();
            let out = train(
                &ctx,
                &tctx,
                &cfg.model,
                &train_cfg,
                &mask,
                cfg.record_wall_time,
            )?;
            let entries = vec![out.entry];
            RunReport {
                artifact_version: crate::ARTIFACT_VERSION.to_string(),
                config_hash: opts.config_hash.clone(),
                aggregate: aggregate(&entries),
                entries,
                model: cfg.model.clone(),
                data: cfg.data.clone(),
                pretrain: cfg.pretrain,
                train: train_cfg,
                seeds: vec![file.seed],
                wall_time_s: if cfg.record_wall_time {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            }
        }
    };
    write_output(&cfg.output_dir.join("report.json"), &to_json_line(&report)?)?;
    write_output(
        &cfg.output_dir.join("report.csv"),
        &entries_to_csv(&report.entries, &report.config_hash)?,
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub selector: SelectorKind,
    pub rho: f64,
    #[serde(flatten)]
    pub stats: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub artifact_version: String,
    pub config_hash: String,
    pub rho_grid: Vec<f64>,
    pub selectors: Vec<SelectorKind>,
    pub seeds: Vec<u64>,
    pub entries: Vec<RunEntry>,
    pub aggregates: Vec<AggregateRow>,
}

impl AblationReport {
    pub fn aggregate_for(&self, selector: SelectorKind, rho: f64) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.selector == selector && a.rho == rho)
    }

    /// Sweep rows, then a blank line and the per-(selector, rho) aggregates.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = entries_to_csv(&self.entries, &self.config_hash)?;
        out.push_str("\n# aggregate\n");
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record([
            "selector",
            "rho",
            "runs",
            "mean_target_acc",
            "std_target_acc",
            "mean_val_acc",
            "std_val_acc",
        ])?;
        for a in &self.aggregates {
            w.write_record([
                a.selector.to_string(),
                format!("{:?}", a.rho),
                a.stats.runs.to_string(),
                format!("{:?}", a.stats.mean_target_accuracy),
                format!("{:?}", a.stats.std_target_accuracy),
                format!("{:?}", a.stats.mean_val_accuracy),
                format!("{:?}", a.stats.std_val_accuracy),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| JpsError::Io(e.into_error()))?;
        out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
        Ok(out)
    }
}

fn selector_order(a: SelectorKind, b: SelectorKind) -> std::cmp::Ordering {
    a.as_str().cmp(b.as_str())
}

/// Full cross of `rho_grid x selectors x seeds x targets`. Writes
/// `ablate.csv` and `ablate.json`.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    rho_grid: &[f64],
    selectors: &[SelectorKind],
) -> Result<AblationReport> {
    let report = run_ablation(cfg, rho_grid, selectors)?;
    write_output(&cfg.output_dir.join("ablate.csv"), &report.to_csv()?)?;
    write_output(&cfg.output_dir.join("ablate.json"), &to_json_line(&report)?)?;
    Ok(report)
}

/// The sweep behind [`cmd_ablate`], without writing files.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    rho_grid: &[f64],
    selectors: &[SelectorKind],
) -> Result<AblationReport> {
    cfg.validate()?;
    if rho_grid.is_empty() || selectors.is_empty() {
        return Err(JpsError::Config(
            "rho grid and selector list must be nonempty".into(),
        ));
    }
    for &rho in rho_grid {
        TrainConfig {
            rho,
            ..cfg.train.clone()
        }
        .validate(&cfg.model)?;
    }
    let mut grid = rho_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut sels = selectors.to_vec();
    sels.sort_by(|a, b| selector_order(*a, *b));
    sels.dedup();

    let opts = cfg.lodo_options();
    let contexts = prepare_seeds(&cfg.data, &cfg.model, &cfg.pretrain, &cfg.seeds, &opts)?;
    // Full and HeadOnly ignore rho, so they are trained once and the row is
    // repeated across the grid.
    let rho_free = |s: SelectorKind| matches!(s, SelectorKind::Full | SelectorKind::HeadOnly);
    let mut cells = Vec::new();
    for &selector in &sels {
        let rhos: &[f64] = if rho_free(selector) {
            &grid[..1]
        } else {
            &grid
        };
        for &rho in rhos {
            for seed_index in 0..contexts.len() {
                for target in 0..cfg.data.num_domains {
                    cells.push(Cell {
                        seed_index,
                        target,
                        selector,
                        rho,
                    });
                }
            }
        }
    }
    let trained = run_cells(&contexts, &cfg.model, &cfg.train, &cells, &opts)?;

    let mut entries = Vec::new();
    for e in trained {
        if rho_free(e.selector) {
            entries.extend(grid.iter().map(|&rho| RunEntry { rho, ..e.clone() }));
        } else {
            entries.push(e);
        }
    }
    entries.sort_by(|a, b| {
        selector_order(a.selector, b.selector)
            .then(a.rho.total_cmp(&b.rho))
            .then(a.seed.cmp(&b.seed))
            .then(a.target_domain.cmp(&b.target_domain))
    });
    let mut aggregates = Vec::new();
    for &selector in &sels {
        for &rho in &grid {
            let group: Vec<RunEntry> = entries
                .iter()
                .filter(|e| e.selector == selector && e.rho == rho)
                .cloned()
                .collect();
            aggregates.push(AggregateRow {
                selector,
                rho,
                stats: aggregate(&group),
            });
        }
    }
    Ok(AblationReport {
        artifact_version: crate::ARTIFACT_VERSION.to_string(),
        config_hash: opts.config_hash,
        rho_grid: grid,
        selectors: sels,
        seeds: cfg.seeds.clone(),
        entries,
        aggregates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyDistance {
    pub domain_id: usize,
    #[serde(flatten)]
    pub result: ProxyResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub artifact_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub target_domain: usize,
    pub selector: SelectorKind,
    pub bound_terms: BoundTerms,
    /// `None` for selectors without an importance stage.
    pub mask_stats: Option<MaskStats>,
    pub per_layer_rank: Vec<LayerRank>,
    pub proxy_distances: Vec<ProxyDistance>,
    /// `None` when either mask is empty at this rho.
    pub jps_vs_direct_cmin: Option<CminComparison>,
    pub m_bar_agreement: Option<f64>,
}

/// Bound terms, selection statistics, mask ranks and feature-shift proxies
/// for a mask file. Writes `diagnostics.json`.
pub fn cmd_diagnose(cfg: &ExperimentConfig, mask_path: &Path) -> Result<DiagnosticsReport> {
    cfg.validate()?;
    let file = MaskFile::from_json(&std::fs::read_to_string(mask_path)?)?;
    let mask = file.to_mask()?;
    if mask.is_empty() {
        return Err(JpsError::Validation("cannot diagnose an empty mask".into()));
    }
    let train_cfg = TrainConfig {
        selector: file.selector_kind,
        rho: file.rho,
        l: file.l,
        ..cfg.train.clone()
    };
    train_cfg.validate(&cfg.model)?;
    if file.target_domain >= cfg.data.num_domains {
        return Err(JpsError::Provenance(format!(
            "mask targets domain {} but benchmark has {}",
            file.target_domain, cfg.data.num_domains
        )));
    }
    let ctx = seed_context(cfg, file.seed)?;
    let tctx = TargetContext::new(&ctx, &cfg.model, &train_cfg, file.target_domain)?;
    if tctx.provenance_hash != file.dataset_hash || tctx.map.len() != mask.num_eligible() {
        return Err(JpsError::Provenance(
            "mask was built for a different model, dataset or target".into(),
        ));
    }

    let mut proxies = Vec::new();
    if cfg.diagnostics.proxy_enabled {
        let ds = &ctx.dataset;
        let feats = tctx
            .split
            .sources
            .iter()
            .map(|s| {
                let b = ds.batch(
                    &cfg.model,
                    s.domain_id,
                    &ds.domains[s.domain_id].indices_with(SplitTag::Train),
                )?;
                pooled_features(&ctx.theta0, &cfg.model, &b)
            })
            .collect::<Result<Vec<_>>>()?;
        let d = cfg.model.d_model;
        for (i, s) in tctx.split.sources.iter().enumerate() {
            let rest: Vec<f64> = feats
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != i)
                .flat_map(|(_, f)| f.data().iter().copied())
                .collect();
            let rest = Tensor::new(vec![rest.len() / d, d], rest)?;
            let mut rng = SeededRng::new(mix_seed(file.seed, 0x7072 + s.domain_id as u64));
            proxies.push(ProxyDistance {
                domain_id: s.domain_id,
                result: a_distance_proxy(&feats[i], &rest, &cfg.diagnostics.proxy, &mut rng)?,
            });
        }
    }

    let terms = bound_terms(
        &tctx.grads,
        &mask,
        cfg.diagnostics.beta,
        tctx.source_train().len(),
        proxies.iter().map(|p| p.result.distance).collect(),
    )?;
    let has_stages = !matches!(
        mask.kind(),
        SelectorKind::Full | SelectorKind::HeadOnly | SelectorKind::Random
    );
    let report = DiagnosticsReport {
        artifact_version: crate::ARTIFACT_VERSION.to_string(),
        config_hash: cfg.hash(),
        seed: file.seed,
        target_domain: file.target_domain,
        selector: mask.kind(),
        bound_terms: terms,
        mask_stats: if has_stages {
            Some(mask_stats(&mask)?)
        } else {
            None
        },
        per_layer_rank: mask_rank_report(&mask, &tctx.map)?,
        proxy_distances: proxies,
        jps_vs_direct_cmin: jps_vs_direct_cmin(&tctx.grads, mask.rho()).ok(),
        m_bar_agreement: m_bar_agreement(&tctx.grads, mask.rho())?,
    };
    write_output(
        &cfg.output_dir.join("diagnostics.json"),
        &to_json_line(&report)?,
    )?;
    Ok(report)
}

//! Gradient-based mask construction.
//!
//! Given per-domain gradients `G[i][j]` of the frozen model on each source
//! domain's selection set, the importance operator keeps each domain's top-k
//! coordinates by `|G|` and intersects across domains; the variance operator
//! then drops coordinates whose cross-domain gradient variance exceeds the mean
//! variance of the survivors. Brute-force versions of the two idealized
//! selectors are provided as diagnostics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{JpsError, Result};
use crate::model::{
    loss_and_grads, Batch, EligibleMap, ModelConfig, ParamStore, COORDINATE_INDEX_MAP_VERSION,
};
use crate::rng::SeededRng;

pub const DEFAULT_ORACLE_CAP: usize = 256;

/// fc1 coordinates of the last `l` blocks.
pub fn eligible_coords(cfg: &ModelConfig, l: usize) -> Result<EligibleMap> {
    EligibleMap::last_blocks(cfg, l)
}

/// `N x m` matrix of per-domain gradients over the eligible coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSnapshot {
    rows: Vec<Vec<f64>>,
    coords: usize,
}

impl GradSnapshot {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let coords = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != coords) {
            return Err(JpsError::Dimension("gradient rows differ in length".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(JpsError::Validation("non-finite gradient entry".into()));
        }
        Ok(Self { rows, coords })
    }

    pub fn domains(&self) -> usize {
        self.rows.len()
    }

    pub fn coords(&self) -> usize {
        self.coords
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(
            self.rows
                .iter()
                .map(|r| r.iter().map(|v| v * c).collect())
                .collect(),
        )
    }

    /// Relabels coordinates: new coordinate `perm[j]` holds old coordinate `j`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut out = vec![0.0; r.len()];
                for (j, &p) in perm.iter().enumerate() {
                    out[p] = r[j];
                }
                out
            })
            .collect();
        Self {
            rows,
            coords: self.coords,
        }
    }
}

/// Mean-loss gradient at `theta0` for each selection set, restricted to the
/// eligible coordinates. Sets are processed in chunks of `chunk` samples and
/// recombined as a sample-weighted mean. Dropout is off.
pub fn domain_gradients(
    params: &ParamStore,
    cfg: &ModelConfig,
    sets: &[Batch],
    map: &EligibleMap,
    chunk: usize,
) -> Result<GradSnapshot> {
    let theta0 = params.at_theta0();
    let chunk = chunk.max(1);
    let mut rows = Vec::with_capacity(sets.len());
    for (i, set) in sets.iter().enumerate() {
        if set.is_empty() {
            return Err(JpsError::Validation(format!("selection set {i} is empty")));
        }
        let n = set.len();
        let mut acc = vec![0.0; map.len()];
        let idx: Vec<usize> = (0..n).collect();
        for part in idx.chunks(chunk) {
            let b = if part.len() == n {
                set.clone()
            } else {
                set.select(part)?
            };
            let (_, g) = loss_and_grads(&theta0, cfg, &b, None)?;
            let w = part.len() as f64;
            for (a, v) in acc.iter_mut().zip(map.flatten_grads(&g)) {
                *a += w * v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        rows.push(acc);
    }
    GradSnapshot::new(rows)
}

/// `[m * rho]` as round-half-up, at least 1 and at most `m`.
pub fn per_domain_k(m: usize, rho: f64) -> usize {
    if m == 0 {
        return 0;
    }
    let k = (m as f64 * rho + 0.5).floor() as usize;
    k.clamp(1, m)
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(JpsError::Validation(format!("rho {rho} outside (0, 1]")))
    }
}

/// Indices of the `k` largest `|values|`, ties to the lower index; sorted.
pub fn top_k_abs(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

fn intersect_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceSelection {
    pub k: usize,
    /// Per-domain top-k sets.
    pub per_domain: Vec<Vec<usize>>,
    /// Their intersection.
    pub selected: Vec<usize>,
}

pub fn importance_select(g: &GradSnapshot, rho: f64) -> Result<ImportanceSelection> {
    check_rho(rho)?;
    let k = per_domain_k(g.coords(), rho);
    let per_domain: Vec<Vec<usize>> = g.rows().iter().map(|r| top_k_abs(r, k)).collect();
    let selected = match per_domain.split_first() {
        Some((first, rest)) => rest
            .iter()
            .fold(first.clone(), |acc, s| intersect_sorted(&acc, s)),
        None => Vec::new(),
    };
    Ok(ImportanceSelection {
        k,
        per_domain,
        selected,
    })
}

/// `sigma_j = sum_i (G[i][j] - mean_i G[i][j])^2` for each listed coordinate.
pub fn gradient_variance(g: &GradSnapshot, coords: &[usize]) -> Vec<f64> {
    let n = g.domains() as f64;
    coords
        .iter()
        .map(|&j| {
            let mean = g.rows().iter().map(|r| r[j]).sum::<f64>() / n;
            g.rows().iter().map(|r| (r[j] - mean).powi(2)).sum()
        })
        .collect()
}

/// Keeps the coordinates of `step1` whose variance is at most the mean
/// variance over `step1`. Empty input gives empty output.
pub fn variance_select(g: &GradSnapshot, step1: &[usize]) -> Vec<usize> {
    if step1.is_empty() {
        log::warn!("variance selection on an empty importance mask");
        return Vec::new();
    }
    let sigma = gradient_variance(g, step1);
    let threshold = sigma.iter().sum::<f64>() / sigma.len() as f64;
    step1
        .iter()
        .zip(&sigma)
        .filter(|(_, &s)| s <= threshold)
        .map(|(&j, _)| j)
        .collect()
}

/// Brute-force dominance selector: coordinate `j` is kept when
/// `sum_j' prod_i I(|G_i^j| >= |G_i^j'|) >= m - [m rho]`, or `>= m - [m rho] + 1`
/// when `strict`.
pub fn oracle_m_hat(g: &GradSnapshot, rho: f64, strict: bool) -> Result<Vec<usize>> {
    oracle_m_hat_capped(g, rho, strict, DEFAULT_ORACLE_CAP)
}

pub fn oracle_m_hat_capped(
    g: &GradSnapshot,
    rho: f64,
    strict: bool,
    cap: usize,
) -> Result<Vec<usize>> {
    check_rho(rho)?;
    let m = g.coords();
    if m > cap {
        return Err(JpsError::Size(format!("m = {m} exceeds oracle cap {cap}")));
    }
    let k = per_domain_k(m, rho);
    let threshold = m - k + usize::from(strict);
    let mut out = Vec::new();
    for j in 0..m {
        let mut dominated = 0;
        for jp in 0..m {
            if g.rows().iter().all(|r| r[j].abs() >= r[jp].abs()) {
                dominated += 1;
            }
        }
        if dominated >= threshold {
            out.push(j);
        }
    }
    Ok(out)
}

/// `P_j = sum_{i != i'} G_i^j G_{i'}^j`, by explicit double loop.
pub fn pairwise_products(g: &GradSnapshot) -> Vec<f64> {
    (0..g.coords())
        .map(|j| {
            let mut p = 0.0;
            for (a, ra) in g.rows().iter().enumerate() {
                for (b, rb) in g.rows().iter().enumerate() {
                    if a != b {
                        p += ra[j] * rb[j];
                    }
                }
            }
            p
        })
        .collect()
}

/// Brute-force alignment selector: keeps `j` when `P_j` is at most the mean
/// of `P` over all coordinates.
pub fn oracle_m_bar(g: &GradSnapshot) -> Result<Vec<usize>> {
    if g.domains() < 2 {
        return Err(JpsError::Domain(format!(
            "pairwise criterion needs at least 2 domains, got {}",
            g.domains()
        )));
    }
    let p = pairwise_products(g);
    let mean = p.iter().sum::<f64>() / p.len().max(1) as f64;
    Ok((0..p.len()).filter(|&j| p[j] <= mean).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    Jps,
    Direct,
    WithoutVariance,
    Random,
    Full,
    HeadOnly,
}

impl SelectorKind {
    pub const ALL: [SelectorKind; 6] = [
        SelectorKind::Jps,
        SelectorKind::Direct,
        SelectorKind::WithoutVariance,
        SelectorKind::Random,
        SelectorKind::Full,
        SelectorKind::HeadOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectorKind::Jps => "jps",
            SelectorKind::Direct => "direct",
            SelectorKind::WithoutVariance => "without_variance",
            SelectorKind::Random => "random",
            SelectorKind::Full => "full",
            SelectorKind::HeadOnly => "head_only",
        }
    }
}

impl fmt::Display for SelectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectorKind {
    type Err = JpsError;

    fn from_str(s: &str) -> Result<Self> {
        SelectorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| JpsError::Config(format!("unknown selector kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub per_domain_k: usize,
    pub step1_count: usize,
    pub step2_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub dataset_hash: String,
}

/// Immutable set of tunable eligible coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    kind: SelectorKind,
    selected: Vec<usize>,
    rho: f64,
    l: usize,
    num_eligible: usize,
    stage_counts: StageCounts,
    provenance: Provenance,
}

impl Mask {
    pub fn new(
        kind: SelectorKind,
        selected: Vec<usize>,
        rho: f64,
        l: usize,
        num_eligible: usize,
        stage_counts: StageCounts,
        provenance: Provenance,
    ) -> Result<Self> {
        if selected.windows(2).any(|w| w[0] >= w[1]) {
            return Err(JpsError::Validation(
                "mask indices not strictly increasing".into(),
            ));
        }
        if selected.last().is_some_and(|&j| j >= num_eligible) {
            return Err(JpsError::Validation(format!(
                "mask index outside eligible space of {num_eligible}"
            )));
        }
        let StageCounts {
            per_domain_k,
            step1_count,
            step2_count,
        } = stage_counts;
        if step2_count != selected.len() || step2_count > step1_count || step1_count > per_domain_k
        {
            return Err(JpsError::Validation(format!(
                "inconsistent stage counts {stage_counts:?} for {} selected",
                selected.len()
            )));
        }
        Ok(Self {
            kind,
            selected,
            rho,
            l,
            num_eligible,
            stage_counts,
            provenance,
        })
    }

    pub fn kind(&self) -> SelectorKind {
        self.kind
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn num_eligible(&self) -> usize {
        self.num_eligible
    }

    pub fn stage_counts(&self) -> StageCounts {
        self.stage_counts
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.selected.binary_search(&j).is_ok()
    }
}

/// Builds the mask for `kind`. `rng` is consumed only by `Random`.
pub fn build_mask(
    kind: SelectorKind,
    g: &GradSnapshot,
    rho: f64,
    l: usize,
    rng: &mut SeededRng,
    provenance: Provenance,
) -> Result<Mask> {
    check_rho(rho)?;
    let m = g.coords();
    let k = per_domain_k(m, rho);
    let (selected, counts) = match kind {
        SelectorKind::Jps => {
            let step1 = importance_select(g, rho)?;
            let step2 = variance_select(g, &step1.selected);
            if step1.selected.is_empty() {
                log::warn!("importance intersection empty at rho={rho}; training head only");
            }
            let counts = StageCounts {
                per_domain_k: step1.k,
                step1_count: step1.selected.len(),
                step2_count: step2.len(),
            };
            (step2, counts)
        }
        SelectorKind::WithoutVariance => {
            let step1 = importance_select(g, rho)?;
            let n = step1.selected.len();
            (
                step1.selected,
                StageCounts {
                    per_domain_k: step1.k,
                    step1_count: n,
                    step2_count: n,
                },
            )
        }
        SelectorKind::Direct => {
            let summed: Vec<f64> = (0..m)
                .map(|j| g.rows().iter().map(|r| r[j].abs()).sum())
                .collect();
            let sel = top_k_abs(&summed, k);
            (
                sel,
                StageCounts {
                    per_domain_k: k,
                    step1_count: k,
                    step2_count: k,
                },
            )
        }
        SelectorKind::Random => {
            let sel = rng.choose_sorted(m, k);
            (
                sel,
                StageCounts {
                    per_domain_k: k,
                    step1_count: k,
                    step2_count: k,
                },
            )
        }
        SelectorKind::Full => (
            (0..m).collect(),
            StageCounts {
                per_domain_k: m,
                step1_count: m,
                step2_count: m,
            },
        ),
        SelectorKind::HeadOnly => (
            Vec::new(),
            StageCounts {
                per_domain_k: 0,
                step1_count: 0,
                step2_count: 0,
            },
        ),
    };
    Mask::new(kind, selected, rho, l, m, counts, provenance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub per_domain_k: usize,
    pub step1_count: usize,
    pub step2_count: usize,
    /// `1 - step1 / k`
    pub reduction_pct_step1: f64,
    /// `1 - step2 / step1`; 0 when step1 is empty.
    pub reduction_pct_step2: f64,
}

pub fn mask_stats(mask: &Mask) -> Result<MaskStats> {
    let c = mask.stage_counts();
    if c.per_domain_k == 0 {
        return Err(JpsError::Validation(
            "per-domain k is zero; reductions undefined".into(),
        ));
    }
    let r1 = 1.0 - c.step1_count as f64 / c.per_domain_k as f64;
    let r2 = if c.step1_count == 0 {
        0.0
    } else {
        1.0 - c.step2_count as f64 / c.step1_count as f64
    };
    Ok(MaskStats {
        per_domain_k: c.per_domain_k,
        step1_count: c.step1_count,
        step2_count: c.step2_count,
        reduction_pct_step1: r1,
        reduction_pct_step2: r2,
    })
}

/// JSON form of a [`Mask`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFile {
    pub rho: f64,
    #[serde(rename = "L")]
    pub l: usize,
    pub selector_kind: SelectorKind,
    pub coordinate_index_map_version: u32,
    pub num_eligible: usize,
    pub selected: Vec<usize>,
    pub stage_counts: StageCounts,
    pub seed: u64,
    pub dataset_hash: String,
    pub target_domain: usize,
    pub config_hash: String,
    pub artifact_version: String,
}

impl MaskFile {
    pub fn from_mask(mask: &Mask, target_domain: usize, config_hash: &str) -> Self {
        Self {
            rho: mask.rho,
            l: mask.l,
            selector_kind: mask.kind,
            coordinate_index_map_version: COORDINATE_INDEX_MAP_VERSION,
            num_eligible: mask.num_eligible,
            selected: mask.selected.clone(),
            stage_counts: mask.stage_counts,
            seed: mask.provenance.seed,
            dataset_hash: mask.provenance.dataset_hash.clone(),
            target_domain,
            config_hash: config_hash.to_string(),
            artifact_version: crate::ARTIFACT_VERSION.to_string(),
        }
    }

    pub fn to_mask(&self) -> Result<Mask> {
        if self.coordinate_index_map_version != COORDINATE_INDEX_MAP_VERSION {
            return Err(JpsError::Provenance(format!(
                "mask uses coordinate map v{}, this build uses v{}",
                self.coordinate_index_map_version, COORDINATE_INDEX_MAP_VERSION
            )));
        }
        Mask::new(
            self.selector_kind,
            self.selected.clone(),
            self.rho,
            self.l,
            self.num_eligible,
            self.stage_counts,
            Provenance {
                seed: self.seed,
                dataset_hash: self.dataset_hash.clone(),
            },
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

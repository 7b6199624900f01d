//! Measurable terms of the generalization bound plus mask analysis reports.
//!
//! Every quantity here is a relative diagnostic. `beta` is a config input,
//! and the divergence term is replaced by a discriminator-based proxy.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{JpsError, Result};
use crate::model::EligibleMap;
use crate::rng::SeededRng;
use crate::selection::{
    importance_select, oracle_m_bar, top_k_abs, variance_select, GradSnapshot, Mask,
};
use crate::tensor::{binary_matrix_rank, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CminScope {
    PerDomain,
    Pooled,
}

fn check_nonempty(selected: &[usize], g: &GradSnapshot) -> Result<()> {
    if selected.is_empty() {
        return Err(JpsError::Validation("c_min needs a nonempty mask".into()));
    }
    if selected.iter().any(|&j| j >= g.coords()) {
        return Err(JpsError::Consistency(format!(
            "mask coordinate outside gradient snapshot of {}",
            g.coords()
        )));
    }
    Ok(())
}

/// Smallest `|G|` over `selected`: one value per domain, or a single value
/// for the domain-averaged gradient.
pub fn c_min_over(g: &GradSnapshot, selected: &[usize], scope: CminScope) -> Result<Vec<f64>> {
    check_nonempty(selected, g)?;
    let min_of = |f: &dyn Fn(usize) -> f64| {
        selected
            .iter()
            .map(|&j| f(j).abs())
            .fold(f64::INFINITY, f64::min)
    };
    Ok(match scope {
        CminScope::PerDomain => (0..g.domains()).map(|i| min_of(&|j| g.at(i, j))).collect(),
        CminScope::Pooled => {
            let n = g.domains() as f64;
            vec![min_of(&|j| {
                (0..g.domains()).map(|i| g.at(i, j)).sum::<f64>() / n
            })]
        }
    })
}

pub fn c_min(g: &GradSnapshot, mask: &Mask, scope: CminScope) -> Result<Vec<f64>> {
    c_min_over(g, mask.selected(), scope)
}

fn stability_term(beta: f64, c_min: f64, rho: f64, n: usize) -> Result<f64> {
    let denom = (c_min + 2.0 * (1.0 - rho)) * n as f64;
    if denom == 0.0 || !denom.is_finite() {
        return Err(JpsError::Domain(format!(
            "stability term denominator is {denom} (c_min={c_min}, rho={rho}, n={n})"
        )));
    }
    Ok(beta * beta / denom)
}

/// `beta^2 / ((c_min + 2(1 - rho)) n)`.
pub fn k1(beta: f64, c_min_pooled: f64, rho: f64, n: usize) -> Result<f64> {
    stability_term(beta, c_min_pooled, rho, n)
}

/// Average of the per-domain stability terms.
pub fn k2_first_term(beta: f64, c_min_per_domain: &[f64], rho: f64, n: usize) -> Result<f64> {
    if c_min_per_domain.is_empty() {
        return Err(JpsError::Validation("no domains for k2".into()));
    }
    let mut sum = 0.0;
    for &c in c_min_per_domain {
        sum += stability_term(beta, c, rho, n)?;
    }
    Ok(sum / c_min_per_domain.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CminComparison {
    pub jps_min_per_domain: Vec<f64>,
    pub direct_min_per_domain: Vec<f64>,
    pub jps_count: usize,
    pub direct_count: usize,
}

/// Per-domain `c_min` of the importance (step 1) mask against the
/// gradient-sum top-k mask at the same rho.
pub fn jps_vs_direct_cmin(g: &GradSnapshot, rho: f64) -> Result<CminComparison> {
    let imp = importance_select(g, rho)?;
    let sums: Vec<f64> = (0..g.coords())
        .map(|j| (0..g.domains()).map(|i| g.at(i, j).abs()).sum())
        .collect();
    let direct = top_k_abs(&sums, imp.k);
    Ok(CminComparison {
        jps_min_per_domain: c_min_over(g, &imp.selected, CminScope::PerDomain)?,
        direct_min_per_domain: c_min_over(g, &direct, CminScope::PerDomain)?,
        jps_count: imp.selected.len(),
        direct_count: direct.len(),
    })
}

/// Fraction of step-1 coordinates on which the variance filter and the
/// pairwise-product selector agree about membership. `None` when step 1 is
/// empty or there is a single domain.
pub fn m_bar_agreement(g: &GradSnapshot, rho: f64) -> Result<Option<f64>> {
    let step1 = importance_select(g, rho)?.selected;
    if step1.is_empty() || g.domains() < 2 {
        return Ok(None);
    }
    let kept = variance_select(g, &step1);
    let bar = oracle_m_bar(g)?;
    let agree = step1
        .iter()
        .filter(|j| kept.binary_search(j).is_ok() == bar.binary_search(j).is_ok())
        .count();
    Ok(Some(agree as f64 / step1.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyResult {
    pub distance: f64,
    pub test_accuracy: f64,
    pub warning: Option<String>,
}

pub const PROXY_MIN_SAMPLES: usize = 20;

/// Discriminator-based A-distance proxy between two feature sets `[n x d]`:
/// a logistic classifier on a balanced 50/50 split, `2(2 acc - 1)` clipped to
/// `[0, 2]`.
pub fn a_distance_proxy(
    a: &Tensor,
    b: &Tensor,
    cfg: &ProxyConfig,
    rng: &mut SeededRng,
) -> Result<ProxyResult> {
    let (na, d) = a.dims2()?;
    let (nb, db) = b.dims2()?;
    if d != db {
        return Err(JpsError::Dimension(format!("feature widths {d} vs {db}")));
    }
    if na < PROXY_MIN_SAMPLES || nb < PROXY_MIN_SAMPLES {
        return Err(JpsError::Validation(format!(
            "proxy needs at least {PROXY_MIN_SAMPLES} samples per side, got {na} and {nb}"
        )));
    }
    let n = na.min(nb);
    let pick_a = rng.choose_sorted(na, n);
    let pick_b = rng.choose_sorted(nb, n);
    // (features, label) pairs, interleaved so both halves stay balanced
    let perm = rng.rand_perm(n);
    let half = n / 2;
    let rows = |t: &Tensor, idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter()
            .map(|&i| t.data()[i * d..(i + 1) * d].to_vec())
            .collect()
    };
    let ra = rows(a, &pick_a);
    let rb = rows(b, &pick_b);
    let mut train = Vec::with_capacity(2 * half);
    let mut test = Vec::with_capacity(2 * (n - half));
    for (pos, &p) in perm.iter().enumerate() {
        let dst = if pos < half { &mut train } else { &mut test };
        dst.push((ra[p].clone(), 1.0));
        dst.push((rb[p].clone(), 0.0));
    }

    let mean: Vec<f64> = (0..d)
        .map(|k| train.iter().map(|(x, _)| x[k]).sum::<f64>() / train.len() as f64)
        .collect();
    let std: Vec<f64> = (0..d)
        .map(|k| {
            let v = train
                .iter()
                .map(|(x, _)| (x[k] - mean[k]).powi(2))
                .sum::<f64>()
                / train.len() as f64;
            v.sqrt()
        })
        .collect();
    if std.iter().all(|&s| s < 1e-12) {
        let msg = "features have zero variance; proxy set to 0".to_string();
        warn!("{msg}");
        return Ok(ProxyResult {
            distance: 0.0,
            test_accuracy: 0.5,
            warning: Some(msg),
        });
    }
    let norm = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(mean.iter().zip(&std))
            .map(|(v, (m, s))| if *s < 1e-12 { 0.0 } else { (v - m) / s })
            .collect()
    };
    let train: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (norm(x), *y)).collect();
    let test: Vec<(Vec<f64>, f64)> = test.iter().map(|(x, y)| (norm(x), *y)).collect();

    let mut w = vec![0.0; d];
    let mut bias = 0.0;
    let inv = 1.0 / train.len() as f64;
    for _ in 0..cfg.steps {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &train {
            let z = bias + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            for (g, xv) in gw.iter_mut().zip(x) {
                *g += err * xv;
            }
            gb += err;
        }
        for (wk, g) in w.iter_mut().zip(&gw) {
            *wk -= cfg.lr * (g * inv + cfg.l2 * *wk);
        }
        bias -= cfg.lr * gb * inv;
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let z = bias + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            (z > 0.0) == (*y == 1.0)
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    Ok(ProxyResult {
        distance: (2.0 * (2.0 * acc - 1.0)).clamp(0.0, 2.0),
        test_accuracy: acc,
        warning: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRank {
    pub layer_index: usize,
    pub param_id: String,
    pub selected_count: usize,
    pub selected_bias_count: usize,
    pub exact_rank: usize,
}

/// Rank of each eligible layer's fc1-weight selection viewed as a 0/1 matrix
/// of the weight's shape.
pub fn mask_rank_report(mask: &Mask, map: &EligibleMap) -> Result<Vec<LayerRank>> {
    if mask.num_eligible() != map.len() {
        return Err(JpsError::Consistency(format!(
            "mask over {} coordinates, map has {}",
            mask.num_eligible(),
            map.len()
        )));
    }
    let mut out: Vec<LayerRank> = Vec::new();
    for seg in map.segments() {
        let inside: Vec<usize> = mask
            .selected()
            .iter()
            .filter(|&&j| j >= seg.offset && j < seg.offset + seg.len)
            .map(|&j| j - seg.offset)
            .collect();
        if seg.shape.len() == 2 {
            let mut m = Tensor::zeros(&seg.shape);
            for &c in &inside {
                m.data_mut()[c] = 1.0;
            }
            out.push(LayerRank {
                layer_index: seg.layer_index,
                param_id: seg.param_id.clone(),
                selected_count: inside.len(),
                selected_bias_count: 0,
                exact_rank: binary_matrix_rank(&m)?,
            });
        } else if let Some(r) = out
            .iter_mut()
            .rev()
            .find(|r| r.layer_index == seg.layer_index)
        {
            r.selected_bias_count += inside.len();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub beta: f64,
    pub n: usize,
    pub rho: f64,
    pub c_min_per_domain: Vec<f64>,
    pub c_min_pooled: f64,
    pub k1: f64,
    pub k2_first_term: f64,
    /// Discriminator proxy, one per source domain against the pooled sources.
    pub a_distance_proxy: Vec<f64>,
}

pub fn bound_terms(
    g: &GradSnapshot,
    mask: &Mask,
    beta: f64,
    n: usize,
    a_distance_proxy: Vec<f64>,
) -> Result<BoundTerms> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(JpsError::Config(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let per = c_min(g, mask, CminScope::PerDomain)?;
    let pooled = c_min(g, mask, CminScope::Pooled)?[0];
    let rho = mask.rho();
    Ok(BoundTerms {
        beta,
        n,
        rho,
        k1: k1(beta, pooled, rho, n)?,
        k2_first_term: k2_first_term(beta, &per, rho, n)?,
        c_min_per_domain: per,
        c_min_pooled: pooled,
        a_distance_proxy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::selection::{Provenance, SelectorKind, StageCounts};

    fn mask(selected: Vec<usize>, m: usize, rho: f64) -> Mask {
        let n = selected.len();
        Mask::new(
            SelectorKind::Jps,
            selected,
            rho,
            1,
            m,
            StageCounts {
                per_domain_k: m,
                step1_count: n,
                step2_count: n,
            },
            Provenance::default(),
        )
        .unwrap()
    }

    #[test]
    fn k1_substitution() {
        assert_eq!(k1(2.0, 1.0, 0.5, 4).unwrap(), 0.5);
        assert!(matches!(k1(1.0, 0.0, 1.0, 10), Err(JpsError::Domain(_))));
        let eq = k2_first_term(2.0, &[0.7, 0.7, 0.7], 0.3, 9).unwrap();
        assert!((eq - k1(2.0, 0.7, 0.3, 9).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn c_min_single_and_empty() {
        let g = GradSnapshot::new(vec![vec![0.3, -5.0], vec![-0.2, 1.0]]).unwrap();
        let m = mask(vec![0], 2, 0.5);
        assert_eq!(c_min(&g, &m, CminScope::PerDomain).unwrap(), vec![0.3, 0.2]);
        assert!((c_min(&g, &m, CminScope::Pooled).unwrap()[0] - 0.05).abs() < 1e-15);
        let e = mask(vec![], 2, 0.5);
        assert!(matches!(
            c_min(&g, &e, CminScope::Pooled),
            Err(JpsError::Validation(_))
        ));
    }

    #[test]
    fn adversarial_direct_cmin() {
        // coordinate 0 is huge in domain 0 only
        let g = GradSnapshot::new(vec![vec![100.0, 1.0, 0.9, 0.1], vec![0.001, 1.0, 0.9, 0.1]])
            .unwrap();
        let c = jps_vs_direct_cmin(&g, 0.5).unwrap();
        assert!(c.direct_min_per_domain[1] < c.jps_min_per_domain[1]);
    }

    #[test]
    fn rank_report_shapes() {
        let cfg = ModelConfig {
            num_blocks: 1,
            d_model: 2,
            num_tokens: 1,
            mlp_hidden: 3,
            num_classes: 2,
            dropout_rate: 0.0,
        };
        let map = EligibleMap::last_blocks(&cfg, 1).unwrap();
        assert_eq!(map.len(), 9);
        // diagonal of the 2x3 weight plus one bias
        let r = mask_rank_report(&mask(vec![0, 4, 7], 9, 0.5), &map).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(
            (
                r[0].selected_count,
                r[0].selected_bias_count,
                r[0].exact_rank
            ),
            (2, 1, 2)
        );
        // one row
        let r = mask_rank_report(&mask(vec![0, 1, 2], 9, 0.5), &map).unwrap();
        assert_eq!(r[0].exact_rank, 1);
    }

    #[test]
    fn proxy_degenerate_and_small() {
        let z = Tensor::zeros(&[30, 3]);
        let r = a_distance_proxy(&z, &z, &ProxyConfig::default(), &mut SeededRng::new(0)).unwrap();
        assert_eq!(r.distance, 0.0);
        assert!(r.warning.is_some());
        let small = Tensor::zeros(&[10, 3]);
        assert!(
            a_distance_proxy(&small, &z, &ProxyConfig::default(), &mut SeededRng::new(0)).is_err()
        );
    }
}

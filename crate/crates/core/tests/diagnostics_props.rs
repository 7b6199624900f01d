use jps_core::diagnostics::{
    a_distance_proxy, c_min_over, jps_vs_direct_cmin, k1, mask_rank_report, CminScope, ProxyConfig,
};
use jps_core::model::{EligibleMap, ModelConfig};
use jps_core::rng::SeededRng;
use jps_core::selection::{
    importance_select, GradSnapshot, Mask, Provenance, SelectorKind, StageCounts,
};
use jps_core::tensor::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn gaussian(rng: &mut SeededRng, n: usize, d: usize, shift: f64) -> Tensor {
    let mut t = rng.randn(&[n, d]);
    t.data_mut().iter_mut().for_each(|v| *v += shift);
    t
}

#[test]
fn proxy_on_identical_distributions_is_small() {
    for seed in 0..10 {
        let mut rng = SeededRng::new(seed);
        let a = gaussian(&mut rng, 2000, 8, 0.0);
        let b = gaussian(&mut rng, 2000, 8, 0.0);
        let r = a_distance_proxy(&a, &b, &ProxyConfig::default(), &mut rng).unwrap();
        assert!(r.distance < 0.15, "seed {seed}: {r:?}");
    }
}

#[test]
fn proxy_on_disjoint_supports_is_large() {
    for seed in 0..10 {
        let mut rng = SeededRng::new(100 + seed);
        let a = gaussian(&mut rng, 400, 8, 0.0);
        let b = gaussian(&mut rng, 400, 8, 20.0);
        let r = a_distance_proxy(&a, &b, &ProxyConfig::default(), &mut rng).unwrap();
        assert!(r.distance > 1.8, "seed {seed}: {r:?}");
    }
}

#[test]
fn proxy_is_roughly_symmetric() {
    let mut rng = SeededRng::new(7);
    let a = gaussian(&mut rng, 1000, 6, 0.0);
    let b = gaussian(&mut rng, 1000, 6, 0.4);
    let ab = a_distance_proxy(&a, &b, &ProxyConfig::default(), &mut SeededRng::new(1)).unwrap();
    let ba = a_distance_proxy(&b, &a, &ProxyConfig::default(), &mut SeededRng::new(1)).unwrap();
    assert!((ab.distance - ba.distance).abs() <= 0.1, "{ab:?} vs {ba:?}");
}

#[test]
fn proxy_rejects_tiny_or_mismatched_inputs() {
    let mut rng = SeededRng::new(0);
    let a = gaussian(&mut rng, 10, 4, 0.0);
    let b = gaussian(&mut rng, 100, 4, 0.0);
    assert!(a_distance_proxy(&a, &b, &ProxyConfig::default(), &mut rng).is_err());
    let c = gaussian(&mut rng, 100, 5, 0.0);
    assert!(a_distance_proxy(&b, &c, &ProxyConfig::default(), &mut rng).is_err());
}

#[test]
fn constant_features_warn_instead_of_failing() {
    let a = Tensor::zeros(&[50, 3]);
    let r = a_distance_proxy(
        &a,
        &a.clone(),
        &ProxyConfig::default(),
        &mut SeededRng::new(0),
    )
    .unwrap();
    assert!(r.warning.is_some());
    assert_eq!(r.distance, 0.0);
}

proptest! {
    #[test]
    fn k1_is_monotone(
        beta in 0.1f64..10.0,
        c in 0.0f64..5.0,
        rho in 0.0f64..0.99,
        n in 1usize..10_000,
    ) {
        let base = k1(beta, c, rho, n).unwrap();
        prop_assert!(k1(beta * 1.1, c, rho, n).unwrap() > base);
        prop_assert!(k1(beta, c + 0.1, rho, n).unwrap() < base);
        prop_assert!(k1(beta, c, rho + 0.005, n).unwrap() > base);
        prop_assert!(k1(beta, c, rho, n + 1).unwrap() < base);
    }

    #[test]
    fn c_min_of_subset_dominates_superset(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 32), 1..=4),
        keep in prop::collection::vec(any::<bool>(), 32),
    ) {
        let g = GradSnapshot::new(rows).unwrap();
        let all: Vec<usize> = (0..32).collect();
        let sub: Vec<usize> = (0..32).filter(|&j| keep[j]).collect();
        prop_assume!(!sub.is_empty());
        for scope in [CminScope::PerDomain, CminScope::Pooled] {
            let big = c_min_over(&g, &all, scope).unwrap();
            let small = c_min_over(&g, &sub, scope).unwrap();
            prop_assert!(small.iter().zip(&big).all(|(s, b)| s >= b));
        }
    }

    #[test]
    fn importance_mask_has_larger_c_min_than_direct(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 48), 2..=4),
        rho in 0.02f64..0.5,
    ) {
        let g = GradSnapshot::new(rows).unwrap();
        prop_assume!(!importance_select(&g, rho).unwrap().selected.is_empty());
        let cmp = jps_vs_direct_cmin(&g, rho).unwrap();
        for (j, d) in cmp.jps_min_per_domain.iter().zip(&cmp.direct_min_per_domain) {
            prop_assert!(j >= d);
        }
    }
}

#[test]
fn empty_selection_is_rejected() {
    let g = GradSnapshot::new(vec![vec![1.0, 2.0]]).unwrap();
    assert!(c_min_over(&g, &[], CminScope::Pooled).is_err());
}

fn float_rank(rows: usize, cols: usize, data: &[f64]) -> usize {
    let mut m: Vec<Vec<f64>> = data.chunks(cols).map(|r| r.to_vec()).collect();
    let mut rank = 0;
    for c in 0..cols {
        let Some(p) = (rank..rows)
            .filter(|&r| m[r][c].abs() > 1e-9)
            .max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))
        else {
            continue;
        };
        m.swap(rank, p);
        let pivot = m[rank].clone();
        for (r, row) in m.iter_mut().enumerate() {
            if r != rank {
                let f = row[c] / pivot[c];
                for (x, p) in row[c..].iter_mut().zip(&pivot[c..]) {
                    *x -= f * p;
                }
            }
        }
        rank += 1;
    }
    rank
}

#[test]
fn rank_report_matches_independent_implementations() {
    let cfg = ModelConfig {
        num_blocks: 2,
        d_model: 5,
        num_tokens: 2,
        mlp_hidden: 7,
        num_classes: 3,
        dropout_rate: 0.0,
    };
    let map = EligibleMap::last_blocks(&cfg, 2).unwrap();
    let mut rng = SeededRng::new(42);
    for case in 0..100 {
        let density = rng.uniform();
        let selected: Vec<usize> = (0..map.len()).filter(|_| rng.uniform() < density).collect();
        let counts = StageCounts {
            per_domain_k: map.len(),
            step1_count: selected.len(),
            step2_count: selected.len(),
        };
        let mask = Mask::new(
            SelectorKind::Jps,
            selected.clone(),
            0.5,
            2,
            map.len(),
            counts,
            Provenance::default(),
        )
        .unwrap();
        let report = mask_rank_report(&mask, &map).unwrap();
        assert_eq!(report.len(), 2);
        for seg in map.segments().iter().filter(|s| s.shape.len() == 2) {
            let (r, c) = (seg.shape[0], seg.shape[1]);
            let mut dense = vec![0.0; r * c];
            for &j in &selected {
                if j >= seg.offset && j < seg.offset + seg.len {
                    dense[j - seg.offset] = 1.0;
                }
            }
            let svd_rank = DMatrix::from_row_slice(r, c, &dense).rank(1e-9);
            let row = report.iter().find(|x| x.param_id == seg.param_id).unwrap();
            assert_eq!(row.exact_rank, float_rank(r, c, &dense), "case {case}");
            assert_eq!(row.exact_rank, svd_rank, "case {case}");
        }
    }
}

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use spatial_disagg::dataprep::{impute_linear, pca_fit};
use spatial_disagg::diagnostics::{empirical_metrics, theoretical_summary_with, Chi2Mode};
use spatial_disagg::model::{ModelParams, StackedPanel, DEFAULT_DENSE_CAP};
use spatial_disagg::predictor::{anchored_blup, blup, Anchor};
use spatial_disagg::weights::{build_grid_adjacency, from_edge_list, gower_distances, MixedRecord, SpatialWeights};

fn weights(choice: u8) -> SpatialWeights {
    match choice % 3 {
        0 => build_grid_adjacency(2).unwrap(),
        1 => build_grid_adjacency(3).unwrap(),
        _ => from_edge_list(5, &[(1, 2), (2, 3), (3, 4), (4, 5), (2, 5)]).unwrap(),
    }
}

fn params() -> impl Strategy<Value = ModelParams> {
    (-0.9..0.9f64, -0.9..0.9f64, 0.05..3.0f64, -0.9..0.9f64, -2.0..2.0f64, -2.0..2.0f64)
        .prop_map(|(rho, phi, s2, _, b0, b1)| ModelParams::new(vec![b0, b1], phi, s2, rho))
}

fn design(n: usize, t: usize, seed: u64) -> DMatrix<f64> {
    DMatrix::from_fn(n * t, 2, |r, c| if c == 0 { 1.0 } else { ((r as f64 + 1.0) * (seed as f64 + 0.37)).sin() })
}

fn panel() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..5, 2usize..6).prop_flat_map(|(n, t)| (Just(n), Just(t), prop::collection::vec(0.5..20.0f64, n * t)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blup_reproduces_the_aggregate(p in params(), choice in 0u8..3, t in 2usize..8, seed in 0u64..100,
                                     totals in prop::collection::vec(-100.0..1000.0f64, 8)) {
        let w = weights(choice);
        let z = design(w.n(), t, seed);
        let ya = DVector::from_column_slice(&totals[..t]);
        let r = blup(&p, &z, &ya, &w).unwrap();
        prop_assert!(r.coherence_residual <= 1e-8 * ya.amax().max(1.0));
        prop_assert!(r.pointwise_var.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn anchored_cells_are_reproduced(p in params(), choice in 0u8..3, t in 2usize..8, seed in 0u64..100,
                                     cells in prop::collection::vec((0usize..9, 0usize..8, -5.0..5.0f64), 1..4)) {
        let w = weights(choice);
        let n = w.n();
        let z = design(n, t, seed);
        let ya = DVector::from_fn(t, |i, _| 10.0 + i as f64);
        let mut anchors: Vec<Anchor> = Vec::new();
        for (i, time, v) in cells {
            let (i, time) = (i % (n - 1), time % t);
            if !anchors.iter().any(|a| a.region == i && a.time == time) {
                anchors.push(Anchor::new(i, time, v));
            }
        }
        let r = anchored_blup(&p, &z, &ya, &anchors, &w).unwrap();
        prop_assert!(r.coherence_residual <= 1e-8 * ya.amax().max(1.0));
        for a in &anchors {
            prop_assert!((r.yhat.get(a.region, a.time) - a.value).abs() <= 1e-8 * a.value.abs().max(1.0));
            prop_assert!(r.pointwise_var[r.yhat.index(a.region, a.time)] <= 1e-8);
        }
    }

    #[test]
    fn anchors_never_raise_theoretical_rmse(p in params(), choice in 0u8..3, t in 2usize..6,
                                            cells in prop::collection::vec((0usize..9, 0usize..6), 1..4)) {
        let w = weights(choice);
        let n = w.n();
        let mut anchored: Vec<(usize, usize)> = Vec::new();
        let mut prev = theoretical_summary_with(&p, &w, t, &[], DEFAULT_DENSE_CAP).unwrap().rmse_disagg;
        for (i, time) in cells {
            let cell = (i % (n - 1), time % t);
            if anchored.contains(&cell) {
                continue;
            }
            anchored.push(cell);
            let now = theoretical_summary_with(&p, &w, t, &anchored, DEFAULT_DENSE_CAP).unwrap().rmse_disagg;
            prop_assert!(now <= prev * (1.0 + 1e-9) + 1e-12, "{now} > {prev}");
            prev = now;
        }
    }

    #[test]
    fn predictions_ignore_the_noise_scale(p in params(), choice in 0u8..3, t in 2usize..6, scale in 0.1..10.0f64) {
        let w = weights(choice);
        let z = design(w.n(), t, 1);
        let ya = DVector::from_fn(t, |i, _| 3.0 * i as f64 - 1.0);
        let a = blup(&p, &z, &ya, &w).unwrap();
        let mut q = p.clone();
        q.sigma2 *= scale;
        let b = blup(&q, &z, &ya, &w).unwrap();
        prop_assert!((a.yhat.values() - b.yhat.values()).amax() <= 1e-9 * ya.amax().max(1.0));
        for (va, vb) in a.pointwise_var.iter().zip(&b.pointwise_var) {
            prop_assert!((va * scale - vb).abs() <= 1e-9 * vb.abs().max(1e-6));
        }
    }

    #[test]
    fn metrics_are_invariant_to_region_order((n, t, truth) in panel(), noise in prop::collection::vec(-0.4..0.4f64, 30), shift in 1usize..5) {
        let y = StackedPanel::from_fn(n, t, |i, time| truth[time * n + i]);
        let e = StackedPanel::from_fn(n, t, |i, time| y.get(i, time) + noise[(time * n + i) % noise.len()]);
        let perm = |i: usize| (i + shift) % n;
        let yp = StackedPanel::from_fn(n, t, |i, time| y.get(perm(i), time));
        let ep = StackedPanel::from_fn(n, t, |i, time| e.get(perm(i), time));
        let a = empirical_metrics(&y, &e, Chi2Mode::Squared);
        let b = empirical_metrics(&yp, &ep, Chi2Mode::Squared);
        if let (Ok(a), Ok(b)) = (a, b) {
            for (x, z) in [(a.r2, b.r2), (a.mape, b.mape), (a.rmse, b.rmse), (a.rrmse, b.rrmse), (a.chi2, b.chi2)] {
                prop_assert!((x - z).abs() <= 1e-10 * x.abs().max(1.0));
            }
            let mean = y.values().mean();
            prop_assert!((a.rrmse * mean - a.rmse).abs() <= 1e-12 * a.rmse.max(1.0));
        }
    }

    #[test]
    fn row_standardized_rows_sum_to_one(n in 3usize..12, extra in prop::collection::vec((1usize..12, 1usize..12), 0..10)) {
        let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i, i + 1)).collect();
        edges.extend(extra.into_iter().map(|(a, b)| ((a - 1) % n + 1, (b - 1) % n + 1)).filter(|(a, b)| a != b));
        let w = from_edge_list(n, &edges).unwrap();
        let m = w.matrix();
        for i in 0..n {
            prop_assert!((m.row(i).sum() - 1.0).abs() <= 1e-12);
            prop_assert_eq!(m[(i, i)], 0.0);
            prop_assert!(m.row(i).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn gower_is_a_bounded_symmetric_dissimilarity(rows in prop::collection::vec(
        (prop::option::of(-10.0..10.0f64), -5.0..5.0f64, 0u8..3), 3..8)) {
        let records: Vec<MixedRecord> = rows
            .iter()
            .map(|(a, b, c)| MixedRecord { numeric: vec![*a, Some(*b)], categorical: vec![Some(format!("c{c}"))] })
            .collect();
        let (d, _) = gower_distances(&records).unwrap();
        for i in 0..records.len() {
            prop_assert_eq!(d[(i, i)], 0.0);
            for j in 0..records.len() {
                prop_assert_eq!(d[(i, j)], d[(j, i)]);
                prop_assert!((0.0..=1.0).contains(&d[(i, j)]));
            }
        }
    }

    #[test]
    fn imputation_leaves_complete_series_alone(values in prop::collection::vec(-1e6..1e6f64, 2..40)) {
        let series: Vec<Option<f64>> = values.iter().copied().map(Some).collect();
        let out = impute_linear(&series, "x").unwrap();
        prop_assert_eq!(&out.values, &values);
        prop_assert!(out.imputed.iter().all(|b| !b));
    }

    #[test]
    fn imputed_points_lie_between_their_neighbours(values in prop::collection::vec(-100.0..100.0f64, 3..30), gap in 1usize..28) {
        let gap = 1 + gap % (values.len() - 2);
        let mut series: Vec<Option<f64>> = values.iter().copied().map(Some).collect();
        series[gap] = None;
        let out = impute_linear(&series, "x").unwrap();
        let mid = 0.5 * (values[gap - 1] + values[gap + 1]);
        prop_assert!((out.values[gap] - mid).abs() <= 1e-9 * mid.abs().max(1.0));
        prop_assert!(out.imputed[gap]);
    }

    #[test]
    fn pca_percentages_sum_to_one_hundred(rows in 6usize..30, seed in 0u64..1000) {
        let x = DMatrix::from_fn(rows, 4, |r, c| ((r * 7 + c * 13) as f64 * (seed as f64 * 0.01 + 0.3)).sin() + c as f64 * r as f64 * 0.01);
        let names: Vec<String> = (0..4).map(|j| format!("x{j}")).collect();
        if let Ok(m) = pca_fit(&x, &names) {
            let total: f64 = m.explained_variance_pct.iter().sum();
            prop_assert!((total - 100.0).abs() <= 1e-9);
            let gram = m.loadings.transpose() * &m.loadings;
            prop_assert!((gram - DMatrix::identity(4, 4)).amax() <= 1e-9);
            prop_assert!(m.eigenvalues.windows(2).all(|p| p[0] >= p[1]));
        }
    }
}

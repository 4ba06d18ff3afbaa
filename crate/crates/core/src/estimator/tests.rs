use super::*;
use crate::model::{cov_y, Aggregation};
use crate::simulation::{generate, ScenarioSpec};
use crate::weights::{build_grid_adjacency, from_edge_list};
use approx::assert_relative_eq;
use rand::Rng;

fn path3() -> SpatialWeights {
    from_edge_list(3, &[(1, 2), (2, 3)]).unwrap()
}

fn design(n: usize, t: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n * t, 2, |_, c| if c == 0 { 1.0 } else { rng.random::<f64>() })
}

/// Dense GLS and Gaussian log-likelihood on the aggregate.
fn dense_oracle(p: &ModelParams, z: &DMatrix<f64>, ya: &DVector<f64>, w: &SpatialWeights) -> (DVector<f64>, f64) {
    let t = ya.len();
    let n = w.n();
    let c = Aggregation::new(n, t).dense();
    let sigma_y = cov_y(p, w, t).unwrap();
    let sigma_a = &c * sigma_y * c.transpose();
    let a_inv = DMatrix::identity(t, t).kronecker(&(DMatrix::identity(n, n) - w.matrix() * p.rho))
        .try_inverse()
        .unwrap();
    let x = &c * a_inv * z;
    let si = sigma_a.clone().try_inverse().unwrap();
    let beta = (x.transpose() * &si * &x).try_inverse().unwrap() * x.transpose() * &si * ya;
    let e = ya - &x * &p.beta;
    let quad = (e.transpose() * &si * &e)[(0, 0)];
    let ll = -0.5 * (t as f64 * (2.0 * PI).ln() + sigma_a.determinant().ln() + quad);
    (beta, ll)
}

#[test]
fn gls_and_loglik_match_dense_oracle() {
    let w = path3();
    let t = 5;
    let z = design(3, t, 1);
    let ya = DVector::from_vec(vec![3.0, 4.5, 2.0, 5.5, 4.0]);
    let p = ModelParams::new(vec![0.3, 1.2], 0.4, 0.7, 0.35);
    let (beta, ll) = dense_oracle(&p, &z, &ya, &w);
    let got = gls_beta(p.rho, p.phi1, p.sigma2, &z, &ya, &w).unwrap();
    assert_relative_eq!(got, beta, max_relative = 1e-9);
    assert_relative_eq!(loglik(&p, &z, &ya, &w).unwrap(), ll, max_relative = 1e-10);
}

#[test]
fn intercept_only_gls_is_the_scaled_mean() {
    let w = build_grid_adjacency(2).unwrap();
    let t = 6;
    let z = DMatrix::from_element(4 * t, 1, 1.0);
    let ya = DVector::from_vec(vec![4.0, 5.0, 3.0, 6.0, 5.0, 7.0]);
    let b = gls_beta(0.0, 0.0, 1.0, &z, &ya, &w).unwrap();
    assert_relative_eq!(b[0], ya.mean() / 4.0, max_relative = 1e-12);
}

#[test]
fn concentrated_objective_closed_form() {
    // rho = phi = 0 gives Sigma_a = sigma2 n I
    let w = build_grid_adjacency(2).unwrap();
    let (n, t) = (4.0, 6);
    let z = DMatrix::from_element(4 * t, 1, 1.0);
    let ya = DVector::from_vec(vec![4.0, 5.0, 3.0, 6.0, 5.0, 7.0]);
    let s2 = 0.8;
    let obj = concentrated_negloglik(0.0, 0.0, s2, &z, &ya, &w).unwrap();
    let mean = ya.mean();
    let rss: f64 = ya.iter().map(|y| (y - mean).powi(2)).sum();
    let tf = t as f64;
    let expected = 0.5 * (tf * (2.0 * PI).ln() + tf * (s2 * n).ln() + rss / (s2 * n));
    assert_relative_eq!(obj.value, expected, max_relative = 1e-12);
    assert!(obj.feasible);
}

#[test]
fn infeasible_parameters_get_a_penalty() {
    let w = build_grid_adjacency(2).unwrap();
    let z = DMatrix::from_element(12, 1, 1.0);
    let ya = DVector::from_vec(vec![1.0, 2.0, 3.0]);
    let obj = concentrated_negloglik(1.0 - 1e-14, 0.0, 1.0, &z, &ya, &w).unwrap();
    assert!(!obj.feasible);
    assert_eq!(obj.value, INFEASIBLE_PENALTY);
}

#[test]
fn duplicate_column_is_rank_deficient() {
    let w = build_grid_adjacency(2).unwrap();
    let t = 8;
    let mut z = design(4, t, 3);
    z = z.insert_column(2, 0.0);
    let copy = z.column(1).into_owned();
    z.set_column(2, &copy);
    let ya = DVector::from_fn(t, |i, _| 4.0 + i as f64);
    match gls_beta(0.2, 0.1, 1.0, &z, &ya, &w) {
        Err(Error::RankDeficient { columns }) => assert!(!columns.is_empty()),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        fit(&z, &ya, &w, &EstimationConfig::default()),
        Err(Error::RankDeficient { .. })
    ));
}

#[test]
fn score_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for case in 0..20 {
        let k = if case % 2 == 0 { 2 } else { 3 };
        let w = build_grid_adjacency(k).unwrap();
        let n = w.n();
        let t = if case % 4 < 2 { 8 } else { 16 };
        let z = design(n, t, case);
        let ya = DVector::from_fn(t, |_, _| rng.random_range(-3.0..6.0));
        let p = ModelParams::new(
            vec![rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)],
            rng.random_range(-0.6..0.6),
            rng.random_range(0.2..1.5),
            rng.random_range(-0.6..0.6),
        );
        let g = score(&p, &z, &ya, &w).unwrap();
        let theta = params_to_vec(&p);
        for j in 0..theta.len() {
            let h = 1e-6;
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (loglik(&vec_to_params(&up), &z, &ya, &w).unwrap()
                - loglik(&vec_to_params(&dn), &z, &ya, &w).unwrap())
                / (2.0 * h);
            let err = (g[j] - fd).abs() / fd.abs().max(1.0);
            assert!(err < 1e-4, "case {case} coord {j}: {} vs {fd}", g[j]);
        }
    }
}

#[test]
fn beta_score_vanishes_at_gls() {
    let w = build_grid_adjacency(2).unwrap();
    let t = 10;
    let z = design(4, t, 8);
    let ya = DVector::from_fn(t, |i, _| 3.0 + (i as f64 * 0.7).cos());
    let (rho, phi, s2) = (0.3, -0.2, 0.5);
    let beta = gls_beta(rho, phi, s2, &z, &ya, &w).unwrap();
    let p = ModelParams { beta, phi1: phi, sigma2: s2, rho };
    let g = score(&p, &z, &ya, &w).unwrap();
    assert!(g[0].abs() < 1e-8 && g[1].abs() < 1e-8, "{g}");
}

fn sim(k: usize, t: usize, rho: f64, phi: f64, beta1: f64, sigma: f64, seed: u64) -> crate::simulation::SimulatedData {
    generate(&ScenarioSpec { k, t, rho, phi, beta0: 1.0, beta1, sigma, seed }).unwrap()
}

#[test]
fn recovers_beta_with_small_noise() {
    let d = sim(3, 40, 0.3, 0.5, 5.0, 0.01, 4);
    let f = fit(&d.z, &d.ya, &d.w, &EstimationConfig::default()).unwrap();
    assert!((f.params.beta[0] - 1.0).abs() < 0.05, "{:?}", f.params);
    assert!((f.params.beta[1] - 5.0).abs() < 0.05, "{:?}", f.params);
    assert!(f.converged);
}

#[test]
fn symmetric_grid_only_identifies_the_scaled_slope() {
    // every column sum of the 2x2 grid is equal, so rho and beta trade off
    let d = sim(2, 40, 0.3, 0.5, 5.0, 0.01, 4);
    let f = fit(&d.z, &d.ya, &d.w, &EstimationConfig::default()).unwrap();
    assert!(f.condition_warnings.iter().any(|w| w.contains("column sums")), "{:?}", f.condition_warnings);
    let scaled = f.params.beta[1] / (1.0 - f.params.rho);
    assert_relative_eq!(scaled, 5.0 / 0.7, max_relative = 0.01);
}

#[test]
fn fit_is_deterministic() {
    let d = sim(3, 24, 0.25, 0.5, 1.0, 0.3, 6);
    let cfg = EstimationConfig { multistart: 11, ..Default::default() };
    let a = fit(&d.z, &d.ya, &d.w, &cfg).unwrap();
    let b = fit(&d.z, &d.ya, &d.w, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.loglik, b.loglik);
    assert_eq!(a.starts.len(), 11);
}

#[test]
fn profiled_optimum_is_a_full_likelihood_stationary_point() {
    let d = sim(3, 30, 0.25, 0.5, 2.0, 0.3, 2);
    let f = fit(&d.z, &d.ya, &d.w, &EstimationConfig::default()).unwrap();
    assert!(f.converged);
    let g = score(&f.params, &d.z, &d.ya, &d.w).unwrap();
    let k = f.params.beta.len();
    for j in 0..k {
        assert!(g[j].abs() < 1e-6, "beta score {j}: {}", g[j]);
    }
    // the full likelihood at nearby points is not higher
    let ll = f.loglik;
    for (dr, dp) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
        let rho = f.params.rho + dr;
        let phi = f.params.phi1 + dp;
        let other = concentrated_negloglik(rho, phi, f.params.sigma2, &d.z, &d.ya, &d.w).unwrap();
        assert!(-other.value <= ll + 1e-4);
    }
    assert_relative_eq!(loglik(&f.params, &d.z, &d.ya, &d.w).unwrap(), ll, max_relative = 1e-12);
}

#[test]
fn standard_errors_are_finite() {
    let d = sim(3, 48, 0.25, 0.5, 2.0, 0.3, 9);
    let f = fit(&d.z, &d.ya, &d.w, &EstimationConfig::default()).unwrap();
    let se = f.std_errors.as_ref().expect("converged fit has standard errors");
    for v in se.beta.iter().chain([&se.phi1, &se.sigma2, &se.rho]) {
        assert!(v.is_finite() && *v > 0.0);
    }
    let cov = f.beta_covariance().unwrap();
    assert_relative_eq!(cov[(1, 1)].sqrt(), se.beta[1], max_relative = 1e-12);
}

#[test]
fn start_lattice_and_random_extras() {
    let cfg = EstimationConfig { multistart: 12, seed: 4, ..Default::default() };
    let pts = start_points(&cfg);
    assert_eq!(pts.len(), 12);
    assert_eq!(pts[0], (0.0, 0.0));
    assert_eq!(pts[4], (-0.5, -0.5));
    for &(r, p) in &pts[9..] {
        assert!(r.abs() < 0.99 && p.abs() < 0.99);
    }
    assert_eq!(start_points(&cfg), pts);
}

#[test]
fn invalid_config_and_shapes() {
    let w = build_grid_adjacency(2).unwrap();
    let z = DMatrix::from_element(12, 1, 1.0);
    let ya = DVector::from_vec(vec![1.0, 2.0, 3.0]);
    let bad = EstimationConfig { rho_bounds: (-1.0, 0.5), ..Default::default() };
    assert!(matches!(fit(&z, &ya, &w, &bad), Err(Error::InvalidArgument(_))));
    let short = DVector::from_vec(vec![1.0, 2.0]);
    assert!(matches!(
        fit(&z, &short, &w, &EstimationConfig::default()),
        Err(Error::DimensionMismatch(_))
    ));
}

//! Quasi-likelihood estimation of `(beta, phi1, sigma2, rho)` from the
//! observed aggregate.
//!
//! The aggregate satisfies `Y_a ~ (X beta, s(rho) sigma2 R(phi1))` where
//! `X = C A^{-1} Z`, `R` is the unit-innovation AR(1) covariance and `s` the
//! spatial scale from [`crate::model::SpatialFactor::scale`]. `beta` is
//! profiled out by GLS, and the remaining three parameters are fitted by a
//! projected L-BFGS search from several starting points.

pub mod optimize;

use std::f64::consts::PI;

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ar1_correlation, ar1_correlation_dphi, ModelParams, SpatialFactor};
use crate::weights::{check_identifiability, SpatialWeights};

use optimize::BoxLbfgs;

/// Optimizer settings and parameter box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub rho_bounds: (f64, f64),
    pub phi_bounds: (f64, f64),
    pub sigma2_min: f64,
    /// Number of starting points. The first nine come from the
    /// `{-0.5, 0, 0.5}^2` lattice over `(rho, phi1)`, extra ones are drawn
    /// uniformly inside the box from `seed`.
    pub multistart: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub seed: u64,
    /// Compute Gaussian-case standard errors after fitting.
    pub std_errors: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            rho_bounds: (-0.99, 0.99),
            phi_bounds: (-0.99, 0.99),
            sigma2_min: 1e-8,
            multistart: 5,
            max_iter: 500,
            grad_tol: 1e-5,
            seed: 0,
            std_errors: true,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("rho", self.rho_bounds), ("phi", self.phi_bounds)] {
            if !(lo > -1.0 && hi < 1.0 && lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "{name} bounds must satisfy -1 < lo < hi < 1, got ({lo}, {hi})"
                )));
            }
        }
        if !(self.sigma2_min > 0.0) {
            return Err(Error::InvalidArgument("sigma2_min must be positive".into()));
        }
        if self.multistart == 0 {
            return Err(Error::InvalidArgument("multistart must be at least 1".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidArgument("grad_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Gaussian-case standard errors from the observed information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdErrors {
    pub beta: Vec<f64>,
    pub phi1: f64,
    pub sigma2: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartSummary {
    pub start: [f64; 3],
    pub negloglik: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub loglik: f64,
    pub std_errors: Option<StdErrors>,
    /// Inverse observed information over `(beta, phi1, sigma2, rho)`.
    pub covariance: Option<DMatrix<f64>>,
    /// Projected-gradient infinity norm in the optimizer's coordinates
    /// `(rho, phi1, ln sigma2)`.
    pub gradient_norm: f64,
    pub converged: bool,
    pub condition_warnings: Vec<String>,
    /// `(rho, phi1, sigma2)` iterates of the winning start.
    pub optimizer_trace: Vec<[f64; 3]>,
    pub starts: Vec<StartSummary>,
}

impl FitResult {
    /// True when a warning mentions the parameter-space boundary.
    pub fn has_boundary_warning(&self) -> bool {
        self.condition_warnings.iter().any(|w| w.starts_with("boundary"))
    }

    /// Leading `k x k` block of [`FitResult::covariance`].
    pub fn beta_covariance(&self) -> Option<DMatrix<f64>> {
        let k = self.params.beta.len();
        self.covariance.as_ref().map(|c| c.view((0, 0), (k, k)).into_owned())
    }
}

/// The aggregated design and covariance at fixed `(rho, phi1, sigma2)`.
struct Aggregated {
    t: usize,
    factor: SpatialFactor,
    /// `C A^{-1} Z`, `T x k`.
    x: DMatrix<f64>,
    phi1: f64,
    sigma2: f64,
    chol: Cholesky<f64, Dyn>,
}

impl Aggregated {
    fn new(rho: f64, phi1: f64, sigma2: f64, z: &DMatrix<f64>, ya: &DVector<f64>, w: &SpatialWeights) -> Result<Self> {
        let n = w.n();
        let t = ya.len();
        if z.nrows() != n * t {
            return Err(Error::DimensionMismatch(format!(
                "Z has {} rows, expected n*T = {}",
                z.nrows(),
                n * t
            )));
        }
        if !(phi1.abs() < 1.0) || !(sigma2 > 0.0) {
            return Err(Error::Domain(format!("phi1 = {phi1}, sigma2 = {sigma2}")));
        }
        let factor = SpatialFactor::new(rho, w)?;
        let x = factor.aggregate_a_inverse(z)?;
        let cov = ar1_correlation(phi1, t) * (factor.scale() * sigma2);
        let chol = Cholesky::new(cov).ok_or_else(|| {
            Error::NotPositiveDefinite(format!(
                "aggregated covariance at rho={rho}, phi1={phi1}, sigma2={sigma2}"
            ))
        })?;
        Ok(Aggregated { t, factor, x, phi1, sigma2, chol })
    }

    fn scale(&self) -> f64 {
        self.factor.scale()
    }

    fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    fn whiten_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    fn whiten(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    fn gls(&self, ya: &DVector<f64>) -> Result<DVector<f64>> {
        least_squares_full_rank(&self.whiten(&self.x), &self.whiten_vec(ya))
    }

    fn negloglik(&self, ya: &DVector<f64>, beta: &DVector<f64>) -> f64 {
        let e = ya - &self.x * beta;
        let quad = self.whiten_vec(&e).norm_squared();
        0.5 * (self.t as f64 * (2.0 * PI).ln() + self.log_det() + quad)
    }

    /// Gradient of the log-likelihood in `(beta, phi1, sigma2, rho)`.
    fn score(&self, z: &DMatrix<f64>, ya: &DVector<f64>, beta: &DVector<f64>) -> DVector<f64> {
        let k = beta.len();
        let tf = self.t as f64;
        let e = ya - &self.x * beta;
        let alpha = self.chol.solve(&e);
        let quad = e.dot(&alpha);
        let s = self.scale();

        let d_beta = self.x.tr_mul(&alpha);

        let d_sigma2 = -0.5 * tf / self.sigma2 + 0.5 * quad / self.sigma2;

        // dSigma/dphi = s sigma2 R'(phi); tr(Sigma^{-1} dSigma) = tr(R^{-1} R')
        let dcorr = ar1_correlation_dphi(self.phi1, self.t);
        let dsig_phi = &dcorr * (s * self.sigma2);
        let trace_phi = self.chol.solve(&dsig_phi).trace();
        let d_phi = -0.5 * trace_phi + 0.5 * alpha.dot(&(&dsig_phi * &alpha));

        // dSigma/drho = (ds/drho / s) Sigma, dmu/drho = (dv' Z_t beta)_t
        let v = self.factor.aggregation_weights();
        let dv = self.factor.aggregation_weights_drho();
        let ds = 2.0 * v.dot(&dv);
        let ratio = ds / s;
        let n = self.factor.n();
        let zb = z * beta;
        let dmu = DVector::from_fn(self.t, |t, _| (0..n).map(|i| dv[i] * zb[t * n + i]).sum());
        let d_rho = -0.5 * tf * ratio + 0.5 * ratio * quad + dmu.dot(&alpha);

        let mut g = DVector::zeros(k + 3);
        g.rows_mut(0, k).copy_from(&d_beta);
        g[k] = d_phi;
        g[k + 1] = d_sigma2;
        g[k + 2] = d_rho;
        g
    }
}

/// Least squares through a column-pivoted QR; rank deficiency is an error.
fn least_squares_full_rank(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let (rows, k) = x.shape();
    if k == 0 {
        return Err(Error::InvalidArgument("design has no columns".into()));
    }
    if k > rows {
        return Err(Error::RankDeficient {
            columns: (rows..k).collect(),
        });
    }
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let mut order = DMatrix::from_fn(1, k, |_, j| j as f64);
    qr.p().permute_columns(&mut order);
    let r00 = r[(0, 0)].abs();
    let tol = 1e-10 * r00.max(f64::MIN_POSITIVE);
    let deficient: Vec<usize> = (0..k)
        .filter(|&i| !(r[(i, i)].abs() > tol))
        .map(|i| order[(0, i)] as usize)
        .collect();
    if !deficient.is_empty() || r00 == 0.0 {
        let mut columns = deficient;
        columns.sort_unstable();
        return Err(Error::RankDeficient { columns });
    }
    let qtb = qr.q().tr_mul(y);
    let zsol = r
        .solve_upper_triangular(&qtb)
        .expect("triangular factor has a nonzero diagonal");
    let mut beta = DVector::zeros(k);
    for i in 0..k {
        beta[order[(0, i)] as usize] = zsol[i];
    }
    Ok(beta)
}

/// GLS estimate of `beta` at fixed `(rho, phi1, sigma2)`.
pub fn gls_beta(
    rho: f64,
    phi1: f64,
    sigma2: f64,
    z: &DMatrix<f64>,
    ya: &DVector<f64>,
    w: &SpatialWeights,
) -> Result<DVector<f64>> {
    Aggregated::new(rho, phi1, sigma2, z, ya, w)?.gls(ya)
}

/// Value of the profiled objective.
#[derive(Debug, Clone)]
pub struct ProfiledObjective {
    pub value: f64,
    pub beta: DVector<f64>,
    /// False when the covariance was not usable and `value` is a penalty.
    pub feasible: bool,
}

/// Large finite value returned for infeasible covariance parameters.
pub const INFEASIBLE_PENALTY: f64 = 1e300;

/// Negative Gaussian log-likelihood of `Y_a` with `beta` profiled by GLS.
pub fn concentrated_negloglik(
    rho: f64,
    phi1: f64,
    sigma2: f64,
    z: &DMatrix<f64>,
    ya: &DVector<f64>,
    w: &SpatialWeights,
) -> Result<ProfiledObjective> {
    match Aggregated::new(rho, phi1, sigma2, z, ya, w) {
        Ok(agg) => {
            let beta = agg.gls(ya)?;
            Ok(ProfiledObjective {
                value: agg.negloglik(ya, &beta),
                beta,
                feasible: true,
            })
        }
        Err(Error::NotPositiveDefinite(_)) | Err(Error::NearSingular { .. }) => Ok(ProfiledObjective {
            value: INFEASIBLE_PENALTY,
            beta: DVector::zeros(z.ncols()),
            feasible: false,
        }),
        Err(e) => Err(e),
    }
}

/// Gaussian log-likelihood of `Y_a` at full parameters.
pub fn loglik(params: &ModelParams, z: &DMatrix<f64>, ya: &DVector<f64>, w: &SpatialWeights) -> Result<f64> {
    check_beta_len(params, z)?;
    let agg = Aggregated::new(params.rho, params.phi1, params.sigma2, z, ya, w)?;
    Ok(-agg.negloglik(ya, &params.beta))
}

/// Analytic gradient of [`loglik`], ordered `(beta, phi1, sigma2, rho)`.
pub fn score(params: &ModelParams, z: &DMatrix<f64>, ya: &DVector<f64>, w: &SpatialWeights) -> Result<DVector<f64>> {
    params.validate()?;
    check_beta_len(params, z)?;
    let agg = Aggregated::new(params.rho, params.phi1, params.sigma2, z, ya, w)?;
    Ok(agg.score(z, ya, &params.beta))
}

fn check_beta_len(params: &ModelParams, z: &DMatrix<f64>) -> Result<()> {
    if params.beta.len() != z.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "beta has {} entries but Z has {} columns",
            params.beta.len(),
            z.ncols()
        )));
    }
    Ok(())
}

fn params_to_vec(p: &ModelParams) -> DVector<f64> {
    let k = p.beta.len();
    let mut v = DVector::zeros(k + 3);
    v.rows_mut(0, k).copy_from(&p.beta);
    v[k] = p.phi1;
    v[k + 1] = p.sigma2;
    v[k + 2] = p.rho;
    v
}

fn vec_to_params(v: &DVector<f64>) -> ModelParams {
    let k = v.len() - 3;
    ModelParams {
        beta: v.rows(0, k).into_owned(),
        phi1: v[k],
        sigma2: v[k + 1],
        rho: v[k + 2],
    }
}

/// Observed information `-H` of the full log-likelihood, from central
/// differences of the analytic score.
pub fn observed_information(
    params: &ModelParams,
    z: &DMatrix<f64>,
    ya: &DVector<f64>,
    w: &SpatialWeights,
) -> Result<DMatrix<f64>> {
    let theta = params_to_vec(params);
    let p = theta.len();
    let mut h = DMatrix::zeros(p, p);
    for j in 0..p {
        let step = 1e-5 * theta[j].abs().max(1.0);
        let step = if j == p - 3 || j == p - 1 {
            // keep phi1 / rho strictly inside (-1, 1)
            step.min(0.5 * (1.0 - theta[j].abs()))
        } else if j == p - 2 {
            step.min(0.5 * theta[j])
        } else {
            step
        };
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[j] += step;
        dn[j] -= step;
        let gu = score(&vec_to_params(&up), z, ya, w)?;
        let gd = score(&vec_to_params(&dn), z, ya, w)?;
        h.set_column(j, &((gu - gd) / (2.0 * step)));
    }
    let sym = (&h + h.transpose()) * 0.5;
    Ok(-sym)
}

fn std_errors_at(
    params: &ModelParams,
    z: &DMatrix<f64>,
    ya: &DVector<f64>,
    w: &SpatialWeights,
) -> Option<(StdErrors, DMatrix<f64>)> {
    let info = observed_information(params, z, ya, w).ok()?;
    let cov = Cholesky::new(info)?.inverse();
    let k = params.beta.len();
    let se: Vec<f64> = cov.diagonal().iter().map(|v| v.sqrt()).collect();
    if se.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return None;
    }
    let se = StdErrors {
        beta: se[..k].to_vec(),
        phi1: se[k],
        sigma2: se[k + 1],
        rho: se[k + 2],
    };
    Some((se, cov))
}

fn start_points(config: &EstimationConfig) -> Vec<(f64, f64)> {
    const LATTICE: [(f64, f64); 9] = [
        (0.0, 0.0),
        (0.5, 0.5),
        (-0.5, 0.5),
        (0.5, -0.5),
        (-0.5, -0.5),
        (0.0, 0.5),
        (0.5, 0.0),
        (-0.5, 0.0),
        (0.0, -0.5),
    ];
    let clamp = |x: f64, (lo, hi): (f64, f64)| x.clamp(lo, hi);
    let mut pts: Vec<(f64, f64)> = LATTICE
        .iter()
        .take(config.multistart)
        .map(|&(r, p)| (clamp(r, config.rho_bounds), clamp(p, config.phi_bounds)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    while pts.len() < config.multistart {
        let r = rng.random_range(config.rho_bounds.0..config.rho_bounds.1);
        let p = rng.random_range(config.phi_bounds.0..config.phi_bounds.1);
        pts.push((r, p));
    }
    pts
}

/// Fit the model to an observed aggregate.
pub fn fit(z: &DMatrix<f64>, ya: &DVector<f64>, w: &SpatialWeights, config: &EstimationConfig) -> Result<FitResult> {
    config.validate()?;
    let n = w.n();
    let t = ya.len();
    let k = z.ncols();
    if z.nrows() != n * t {
        return Err(Error::DimensionMismatch(format!(
            "Z has {} rows, expected n*T = {}",
            z.nrows(),
            n * t
        )));
    }
    let mut warnings = Vec::new();
    if t <= k + 3 {
        warnings.push(format!("few periods: T = {t} with {} parameters", k + 3));
    }
    let col_scale: Vec<f64> = z.column_iter().map(|c| c.amax()).filter(|m| *m > 0.0).collect();
    if let (Some(lo), Some(hi)) = (
        col_scale.iter().copied().reduce(f64::min),
        col_scale.iter().copied().reduce(f64::max),
    ) {
        if hi / lo > 1e6 {
            warnings.push(format!("covariate columns differ in scale by {:.1e}; consider standardizing", hi / lo));
        }
    }
    if let Some(msg) = check_identifiability(w).warning {
        warnings.push(msg);
    }

    // Surface design problems up front rather than as failed starts.
    let probe = Aggregated::new(0.0, 0.0, 1.0, z, ya, w)?;
    probe.gls(ya)?;

    let lower = [config.rho_bounds.0, config.phi_bounds.0, config.sigma2_min.ln()];
    let upper = [config.rho_bounds.1, config.phi_bounds.1, f64::INFINITY];
    let optimizer = BoxLbfgs {
        max_iter: config.max_iter,
        grad_tol: config.grad_tol,
        ..BoxLbfgs::default()
    };

    let objective = |x: &[f64]| -> (f64, Vec<f64>) {
        let (rho, phi, ls2) = (x[0], x[1], x[2]);
        let sigma2 = ls2.exp();
        let Ok(agg) = Aggregated::new(rho, phi, sigma2, z, ya, w) else {
            return (f64::INFINITY, vec![0.0; 3]);
        };
        let Ok(beta) = agg.gls(ya) else {
            return (f64::INFINITY, vec![0.0; 3]);
        };
        let f = agg.negloglik(ya, &beta);
        // beta-score vanishes at the GLS solution, so the full score gives
        // the gradient of the profiled objective.
        let g = agg.score(z, ya, &beta);
        (f, vec![-g[k + 2], -g[k], -g[k + 1] * sigma2])
    };

    let starts = start_points(config);
    let outcomes: Vec<(f64, Option<optimize::Minimum>)> = starts
        .par_iter()
        .map(|&(r0, p0)| {
            let Ok(agg) = Aggregated::new(r0, p0, 1.0, z, ya, w) else {
                return (f64::NAN, None);
            };
            let Ok(beta) = agg.gls(ya) else {
                return (f64::NAN, None);
            };
            let e = ya - &agg.x * &beta;
            let s2 = (agg.whiten_vec(&e).norm_squared() / t as f64).max(config.sigma2_min * 10.0);
            (s2, optimizer.minimize(objective, &[r0, p0, s2.ln()], &lower, &upper))
        })
        .collect();

    let summaries: Vec<StartSummary> = starts
        .iter()
        .zip(&outcomes)
        .map(|(&(r, p), (s2, o))| match o {
            Some(m) => StartSummary {
                start: [r, p, *s2],
                negloglik: m.f,
                gradient_norm: m.projected_grad_norm,
                iterations: m.iterations,
                converged: m.converged,
            },
            None => StartSummary {
                start: [r, p, *s2],
                negloglik: f64::INFINITY,
                gradient_norm: f64::INFINITY,
                iterations: 0,
                converged: false,
            },
        })
        .collect();

    let best = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, (_, o))| o.as_ref().filter(|m| m.f.is_finite()).map(|m| (i, m)))
        .min_by(|a, b| a.1.f.total_cmp(&b.1.f).then(a.0.cmp(&b.0)));
    let Some((_, best)) = best else {
        let traces = outcomes
            .iter()
            .map(|(_, o)| o.as_ref().map(|m| m.trace.clone()).unwrap_or_default())
            .collect();
        return Err(Error::NonConvergence { traces });
    };

    let (rho, phi1, sigma2) = (best.x[0], best.x[1], best.x[2].exp());
    let agg = Aggregated::new(rho, phi1, sigma2, z, ya, w)?;
    let beta = agg.gls(ya)?;
    let loglik = -agg.negloglik(ya, &beta);
    let params = ModelParams { beta, phi1, sigma2, rho };

    if rho.abs() > 0.95 || rho <= config.rho_bounds.0 || rho >= config.rho_bounds.1 {
        warnings.push(format!("boundary: rho-hat = {rho:.4} is near the unit-root boundary; estimates may be unstable"));
    }
    if phi1.abs() > 0.99 || phi1 <= config.phi_bounds.0 || phi1 >= config.phi_bounds.1 {
        warnings.push(format!("boundary: phi1-hat = {phi1:.4} is near the unit-root boundary"));
    }
    if !best.converged {
        warnings.push(format!(
            "optimizer stopped with projected gradient {:.3e} > tolerance {:.1e}",
            best.projected_grad_norm, config.grad_tol
        ));
    }
    for msg in &warnings {
        debug!("{msg}");
    }

    let (std_errors, covariance) = match (config.std_errors && best.converged)
        .then(|| std_errors_at(&params, z, ya, w))
        .flatten()
    {
        Some((se, cov)) => (Some(se), Some(cov)),
        None => (None, None),
    };

    Ok(FitResult {
        params,
        loglik,
        std_errors,
        covariance,
        gradient_norm: best.projected_grad_norm,
        converged: best.converged,
        condition_warnings: warnings,
        optimizer_trace: best.trace.iter().map(|x| [x[0], x[1], x[2].exp()]).collect(),
        starts: summaries,
    })
}

#[cfg(test)]
mod tests;

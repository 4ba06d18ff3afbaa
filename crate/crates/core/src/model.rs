//! Covariance algebra of the spatial autoregressive panel with AR(1) errors.
//!
//! Panels are stacked region-fastest: entry `t * n + i` holds region `i` at
//! period `t` (both 0-based). Under this layout
//!
//! * `A = I_T ⊗ (I_n - rho W)`,
//! * `Cov(U) = Sigma_U ⊗ I_n`,
//! * `Cov(Y) = Sigma_U ⊗ G` with `G = (I - rho W)^{-1} (I - rho W)^{-T}`,
//! * `C = I_T ⊗ 1_n'` sums each period,
//! * `C Cov(Y) C' = s * Sigma_U` with `s = |(I - rho W)^{-T} 1|^2`.
//!
//! The last identity is what keeps estimation cheap: the aggregated
//! covariance is a scalar multiple of the `T x T` AR(1) covariance.

use nalgebra::{DMatrix, DVector, LU};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weights::SpatialWeights;

/// Default upper bound on `n * T` for routines that build `nT x nT` matrices.
pub const DEFAULT_DENSE_CAP: usize = 5000;

/// Smallest acceptable reciprocal 1-norm condition number of `I - rho W`.
pub const MIN_RCOND: f64 = 1e-12;

/// An `n x T` panel stored as a region-fastest vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedPanel {
    values: DVector<f64>,
    n: usize,
    t: usize,
}

impl StackedPanel {
    pub fn new(values: DVector<f64>, n: usize, t: usize) -> Result<Self> {
        if values.len() != n * t {
            return Err(Error::DimensionMismatch(format!(
                "panel of {n} regions x {t} periods needs {} values, got {}",
                n * t,
                values.len()
            )));
        }
        Ok(StackedPanel { values, n, t })
    }

    pub fn from_fn(n: usize, t: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let values = DVector::from_fn(n * t, |k, _| f(k % n, k / n));
        StackedPanel { values, n, t }
    }

    #[inline]
    pub fn index(&self, region: usize, time: usize) -> usize {
        time * self.n + region
    }

    #[inline]
    pub fn get(&self, region: usize, time: usize) -> f64 {
        self.values[self.index(region, time)]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn periods(&self) -> usize {
        self.t
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    /// One region's series over time.
    pub fn region_series(&self, region: usize) -> Vec<f64> {
        (0..self.t).map(|t| self.get(region, t)).collect()
    }

    /// Per-period totals, i.e. `C y`.
    pub fn totals(&self) -> DVector<f64> {
        Aggregation::new(self.n, self.t).apply(&self.values)
    }
}

/// Parameters `(beta, phi1, sigma2, rho)` of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: DVector<f64>,
    pub phi1: f64,
    pub sigma2: f64,
    pub rho: f64,
}

impl ModelParams {
    pub fn new(beta: impl Into<Vec<f64>>, phi1: f64, sigma2: f64, rho: f64) -> Self {
        ModelParams {
            beta: DVector::from_vec(beta.into()),
            phi1,
            sigma2,
            rho,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi1.abs() < 1.0) {
            return Err(Error::Domain(format!("|phi1| < 1 required, got {}", self.phi1)));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Domain(format!("|rho| < 1 required, got {}", self.rho)));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::Domain(format!("sigma2 > 0 required, got {}", self.sigma2)));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Domain("beta must be finite".into()));
        }
        Ok(())
    }
}

fn check_phi(phi1: f64) -> Result<()> {
    if !(phi1.abs() < 1.0) {
        return Err(Error::Domain(format!("|phi1| < 1 required, got {phi1}")));
    }
    Ok(())
}

/// Stationary AR(1) covariance, entry `(i, j) = sigma2 * phi1^|i-j| / (1 - phi1^2)`.
pub fn sigma_u(phi1: f64, sigma2: f64, t: usize) -> Result<DMatrix<f64>> {
    check_phi(phi1)?;
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("sigma2 > 0 required, got {sigma2}")));
    }
    Ok(ar1_correlation(phi1, t) * sigma2)
}

/// `sigma_u` with unit innovation variance.
pub(crate) fn ar1_correlation(phi1: f64, t: usize) -> DMatrix<f64> {
    let scale = 1.0 / (1.0 - phi1 * phi1);
    let powers: Vec<f64> = (0..t).map(|d| phi1.powi(d as i32) * scale).collect();
    DMatrix::from_fn(t, t, |i, j| powers[i.abs_diff(j)])
}

/// Derivative of [`ar1_correlation`] with respect to `phi1`.
pub(crate) fn ar1_correlation_dphi(phi1: f64, t: usize) -> DMatrix<f64> {
    let q = 1.0 - phi1 * phi1;
    let d: Vec<f64> = (0..t)
        .map(|lag| {
            let lead = if lag == 0 {
                0.0
            } else {
                lag as f64 * phi1.powi(lag as i32 - 1) / q
            };
            lead + 2.0 * phi1.powi(lag as i32 + 1) / (q * q)
        })
        .collect();
    DMatrix::from_fn(t, t, |i, j| d[i.abs_diff(j)])
}

/// One LU factorization of `I_n - rho W` plus the derived vectors the
/// aggregated model needs.
#[derive(Debug, Clone)]
pub struct SpatialFactor {
    rho: f64,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    inverse: DMatrix<f64>,
    w: DMatrix<f64>,
    rcond: f64,
    /// `(I - rho W)^{-T} 1`: the aggregation weights of each region.
    v: DVector<f64>,
}

impl SpatialFactor {
    pub fn new(rho: f64, w: &SpatialWeights) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(Error::Domain(format!("|rho| < 1 required, got {rho}")));
        }
        let n = w.n();
        let m = DMatrix::identity(n, n) - w.matrix() * rho;
        let lu = m.clone().lu();
        let inverse = lu
            .try_inverse()
            .ok_or(Error::NearSingular { rcond: 0.0 })?;
        let rcond = 1.0 / (one_norm(&m) * one_norm(&inverse));
        if !(rcond >= MIN_RCOND) {
            return Err(Error::NearSingular { rcond });
        }
        let v = inverse.tr_mul(&DVector::from_element(n, 1.0));
        Ok(SpatialFactor {
            rho,
            lu,
            inverse,
            w: w.matrix().clone(),
            rcond,
            v,
        })
    }

    pub fn n(&self) -> usize {
        self.inverse.nrows()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn rcond(&self) -> f64 {
        self.rcond
    }

    /// `(I - rho W)^{-1}`.
    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    /// `(I - rho W)^{-T} 1`.
    pub fn aggregation_weights(&self) -> &DVector<f64> {
        &self.v
    }

    /// `s = 1' (I - rho W)^{-1} (I - rho W)^{-T} 1`.
    pub fn scale(&self) -> f64 {
        self.v.norm_squared()
    }

    /// Derivative of the aggregation weights in `rho`: `(I - rho W)^{-T} W' v`.
    pub fn aggregation_weights_drho(&self) -> DVector<f64> {
        self.inverse.tr_mul(&self.w.tr_mul(&self.v))
    }

    /// `G = (I - rho W)^{-1} (I - rho W)^{-T}`, the spatial block of `Cov(Y)`.
    pub fn spatial_covariance(&self) -> DMatrix<f64> {
        &self.inverse * self.inverse.transpose()
    }

    /// `G 1 = (I - rho W)^{-1} v`; sums to `s`.
    pub fn spatial_covariance_rowsums(&self) -> DVector<f64> {
        &self.inverse * &self.v
    }

    /// Solve `(I - rho W) x = b` for an `n x m` right-hand side.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lu.solve(b).expect("factor verified nonsingular")
    }

    /// Apply `A^{-1} = I_T ⊗ (I - rho W)^{-1}` to an `nT x m` matrix.
    pub fn apply_a_inverse(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.n();
        if !x.nrows().is_multiple_of(n) {
            return Err(Error::DimensionMismatch(format!(
                "{} rows is not a multiple of n = {n}",
                x.nrows()
            )));
        }
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for t in 0..x.nrows() / n {
            let block = x.rows(t * n, n).into_owned();
            out.rows_mut(t * n, n).copy_from(&self.solve(&block));
        }
        Ok(out)
    }

    /// `C A^{-1} X` for an `nT x m` matrix: row `t` is `v' X_t`.
    pub fn aggregate_a_inverse(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.n();
        if !x.nrows().is_multiple_of(n) {
            return Err(Error::DimensionMismatch(format!(
                "{} rows is not a multiple of n = {n}",
                x.nrows()
            )));
        }
        let t = x.nrows() / n;
        Ok(DMatrix::from_fn(t, x.ncols(), |r, c| {
            (0..n).map(|i| self.v[i] * x[(r * n + i, c)]).sum()
        }))
    }
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Apply `A^{-1}` to a stacked panel (or any `nT x m` matrix).
pub fn apply_a_inverse(x: &DMatrix<f64>, rho: f64, w: &SpatialWeights) -> Result<DMatrix<f64>> {
    SpatialFactor::new(rho, w)?.apply_a_inverse(x)
}

/// The implicit aggregation operator `C = I_T ⊗ 1_n'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Aggregation {
    pub n: usize,
    pub t: usize,
}

impl Aggregation {
    pub fn new(n: usize, t: usize) -> Self {
        Aggregation { n, t }
    }

    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y.len(), self.n * self.t, "aggregation input length");
        DVector::from_fn(self.t, |t, _| y.rows(t * self.n, self.n).sum())
    }

    pub fn apply_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.n * self.t, "aggregation input rows");
        DMatrix::from_fn(self.t, x.ncols(), |t, c| {
            x.view((t * self.n, c), (self.n, 1)).sum()
        })
    }

    /// Dense `T x nT` matrix.
    pub fn dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.t, self.n * self.t, |t, k| {
            if k / self.n == t {
                1.0
            } else {
                0.0
            }
        })
    }
}

pub fn build_c(n: usize, t: usize) -> Aggregation {
    Aggregation::new(n, t)
}

/// Everything second-order about the panel at fixed parameters.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    sigma_u: DMatrix<f64>,
    factor: SpatialFactor,
    dense_cap: usize,
}

impl CovarianceModel {
    pub fn new(params: &ModelParams, w: &SpatialWeights, t: usize) -> Result<Self> {
        Self::from_parts(params.phi1, params.sigma2, params.rho, w, t)
    }

    pub fn from_parts(phi1: f64, sigma2: f64, rho: f64, w: &SpatialWeights, t: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::InvalidArgument("T must be at least 1".into()));
        }
        Ok(CovarianceModel {
            sigma_u: sigma_u(phi1, sigma2, t)?,
            factor: SpatialFactor::new(rho, w)?,
            dense_cap: DEFAULT_DENSE_CAP,
        })
    }

    pub fn with_dense_cap(mut self, cap: usize) -> Self {
        self.dense_cap = cap;
        self
    }

    pub fn dense_cap(&self) -> usize {
        self.dense_cap
    }

    pub fn n(&self) -> usize {
        self.factor.n()
    }

    pub fn periods(&self) -> usize {
        self.sigma_u.nrows()
    }

    pub fn sigma_u(&self) -> &DMatrix<f64> {
        &self.sigma_u
    }

    pub fn factor(&self) -> &SpatialFactor {
        &self.factor
    }

    /// `C Cov(Y) C' = s * Sigma_U`.
    pub fn aggregated_cov(&self) -> DMatrix<f64> {
        &self.sigma_u * self.factor.scale()
    }

    /// Dense `Cov(Y) = A^{-1} (Sigma_U ⊗ I_n) A^{-T}`.
    pub fn cov_y(&self) -> Result<DMatrix<f64>> {
        let (n, t) = (self.n(), self.periods());
        if n * t > self.dense_cap {
            return Err(Error::TooLarge {
                what: "Cov(Y)",
                size: n * t,
                cap: self.dense_cap,
            });
        }
        let g = self.factor.spatial_covariance();
        Ok(DMatrix::from_fn(n * t, n * t, |a, b| {
            self.sigma_u[(a / n, b / n)] * g[(a % n, b % n)]
        }))
    }
}

pub fn cov_y(params: &ModelParams, w: &SpatialWeights, t: usize) -> Result<DMatrix<f64>> {
    CovarianceModel::new(params, w, t)?.cov_y()
}

pub fn aggregated_cov(params: &ModelParams, w: &SpatialWeights, t: usize) -> Result<DMatrix<f64>> {
    Ok(CovarianceModel::new(params, w, t)?.aggregated_cov())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::{build_grid_adjacency, row_standardize};
    use approx::assert_abs_diff_eq;

    fn pair() -> SpatialWeights {
        row_standardize(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap()
    }

    #[test]
    fn sigma_u_examples() {
        assert_eq!(sigma_u(0.0, 1.0, 3).unwrap(), DMatrix::identity(3, 3));
        let s = sigma_u(0.5, 1.0, 2).unwrap();
        assert_abs_diff_eq!(s, DMatrix::from_row_slice(2, 2, &[4.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 4.0 / 3.0]), epsilon = 1e-15);
        let s = sigma_u(-0.5, 2.0, 2).unwrap();
        assert_abs_diff_eq!(s, DMatrix::from_row_slice(2, 2, &[8.0 / 3.0, -4.0 / 3.0, -4.0 / 3.0, 8.0 / 3.0]), epsilon = 1e-15);
        assert!(matches!(sigma_u(1.0, 1.0, 2), Err(Error::Domain(_))));
        assert!(matches!(sigma_u(-1.2, 1.0, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn sigma_u_dphi_matches_finite_difference() {
        let h = 1e-6;
        for &phi in &[-0.8, -0.3, 0.0, 0.4, 0.9] {
            let num = (ar1_correlation(phi + h, 5) - ar1_correlation(phi - h, 5)) / (2.0 * h);
            assert_abs_diff_eq!(num, ar1_correlation_dphi(phi, 5), epsilon = 1e-6);
        }
    }

    #[test]
    fn a_inverse_examples() {
        let w = pair();
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(apply_a_inverse(&x, 0.0, &w).unwrap(), x);

        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let y = apply_a_inverse(&e1, 0.5, &w).unwrap();
        assert_abs_diff_eq!(y[(0, 0)], 4.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(y[(1, 0)], 2.0 / 3.0, epsilon = 1e-14);

        let slices = DMatrix::from_column_slice(6, 1, &[1.0, -2.0, 1.0, -2.0, 1.0, -2.0]);
        let y = apply_a_inverse(&slices, 0.3, &w).unwrap();
        assert_eq!(y.rows(0, 2), y.rows(2, 2));
        assert_eq!(y.rows(0, 2), y.rows(4, 2));
    }

    #[test]
    fn near_singular_factor_is_rejected() {
        // W with eigenvalue 1: I - rho W singular only at |rho| = 1, which is
        // already out of domain; force singularity through a raw matrix.
        let w = pair();
        assert!(matches!(SpatialFactor::new(1.0, &w), Err(Error::Domain(_))));
        assert!(SpatialFactor::new(0.999_999, &w).is_ok());
    }

    #[test]
    fn aggregation_examples() {
        let c = build_c(2, 2);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(c.apply(&y), DVector::from_vec(vec![3.0, 7.0]));
        assert_eq!(build_c(1, 3).dense(), DMatrix::identity(3, 3));
        assert_eq!(c.dense() * &y, c.apply(&y));
    }

    #[test]
    fn aggregated_a_inverse_matches_dense() {
        let w = build_grid_adjacency(2).unwrap();
        let (n, t) = (4, 2);
        let z = DMatrix::from_fn(n * t, 2, |r, c| if c == 0 { 1.0 } else { (r as f64 * 0.37).sin() });
        let f = SpatialFactor::new(0.4, &w).unwrap();
        let dense = build_c(n, t).dense() * f.apply_a_inverse(&z).unwrap();
        assert_abs_diff_eq!(dense, f.aggregate_a_inverse(&z).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn covariance_special_cases() {
        let w = build_grid_adjacency(2).unwrap();
        let p = ModelParams::new(vec![1.0], 0.6, 1.5, 0.0);
        let cy = cov_y(&p, &w, 3).unwrap();
        let su = sigma_u(0.6, 1.5, 3).unwrap();
        assert_abs_diff_eq!(cy, su.kronecker(&DMatrix::identity(4, 4)), epsilon = 1e-14);
        assert_abs_diff_eq!(aggregated_cov(&p, &w, 3).unwrap(), &su * 4.0, epsilon = 1e-13);

        let p = ModelParams::new(vec![1.0], 0.0, 2.0, 0.5);
        let cy = cov_y(&p, &w, 3).unwrap();
        let blk = cy.view((0, 0), (4, 4)).into_owned();
        assert_abs_diff_eq!(cy.view((4, 4), (4, 4)).into_owned(), blk, epsilon = 0.0);
        assert_abs_diff_eq!(cy.view((0, 4), (4, 4)).abs().max(), 0.0);
    }

    #[test]
    fn dense_cap() {
        let w = build_grid_adjacency(3).unwrap();
        let m = CovarianceModel::from_parts(0.1, 1.0, 0.1, &w, 10).unwrap().with_dense_cap(50);
        assert!(matches!(m.cov_y(), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn panel_layout() {
        let p = StackedPanel::from_fn(3, 2, |i, t| (10 * t + i) as f64);
        assert_eq!(p.values().as_slice(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(p.totals().as_slice(), &[3.0, 33.0]);
        assert!(StackedPanel::new(DVector::zeros(5), 2, 3).is_err());
    }
}

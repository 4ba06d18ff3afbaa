//! Constrained best linear unbiased prediction of the disaggregated panel.
//!
//! Given parameters, the latent panel has mean `m = A^{-1} Z beta` and
//! covariance `B = Sigma_U ⊗ G`. Conditioning on the linear constraints
//! `C~ Y = Y~` (period totals, optionally stacked with anchored cells) gives
//!
//! ```text
//! Y-hat = m + B C~' (C~ B C~')^{-1} (Y~ - C~ m)
//! Var   = B - B C~' (C~ B C~')^{-1} C~ B
//! ```
//!
//! Nothing of size `nT x nT` is formed: every covariance between a panel cell
//! and a constraint row is one product of a `Sigma_U` entry and an entry of
//! `G` or `g = G 1`.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, info};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::io::fmt_sig;
use crate::model::{CovarianceModel, ModelParams, StackedPanel};
use crate::weights::SpatialWeights;

/// Tolerance below which a negative variance is treated as roundoff.
const NEGATIVE_VAR_TOL: f64 = 1e-10;

/// A known panel value `Y[region, time] = value` (0-based indices).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Anchor {
    pub region: usize,
    pub time: usize,
    pub value: f64,
}

impl Anchor {
    pub fn new(region: usize, time: usize, value: f64) -> Self {
        Anchor { region, time, value }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Row {
    Period(usize),
    Cell(usize, usize),
}

/// Period totals stacked with anchored cells.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    n: usize,
    t: usize,
    rows: Vec<Row>,
    targets: DVector<f64>,
    anchors: Vec<Anchor>,
    dropped_periods: Vec<usize>,
}

impl ConstraintSystem {
    /// Validate anchors against the aggregate and build the stacked system.
    ///
    /// A period whose every region is anchored makes its aggregate row
    /// redundant; that row is dropped after checking the anchors add up to
    /// the observed total.
    pub fn new(n: usize, ya: &DVector<f64>, anchors: &[Anchor]) -> Result<Self> {
        let t = ya.len();
        let mut by_cell: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (k, a) in anchors.iter().enumerate() {
            if a.region >= n || a.time >= t {
                return Err(Error::InvalidArgument(format!(
                    "anchor (region {}, time {}) outside the {n} x {t} panel",
                    a.region, a.time
                )));
            }
            if !a.value.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "anchor (region {}, time {}) is not finite",
                    a.region, a.time
                )));
            }
            by_cell.entry((a.region, a.time)).or_default().push(k);
        }
        let duplicates: Vec<(usize, usize)> = by_cell
            .iter()
            .filter(|(_, idx)| idx.len() > 1)
            .map(|(&cell, _)| cell)
            .collect();
        if !duplicates.is_empty() {
            return Err(Error::RedundantAnchor { cells: duplicates });
        }

        let mut per_period = vec![0usize; t];
        let mut per_period_sum = vec![0.0; t];
        for a in anchors {
            per_period[a.time] += 1;
            per_period_sum[a.time] += a.value;
        }
        let mut rows = Vec::with_capacity(t + anchors.len());
        let mut targets = Vec::with_capacity(t + anchors.len());
        let mut dropped_periods = Vec::new();
        for time in 0..t {
            if per_period[time] == n {
                let total = ya[time];
                let tol = 1e-8 * total.abs().max(1.0);
                if (per_period_sum[time] - total).abs() > tol {
                    return Err(Error::InfeasibleAnchor {
                        time,
                        anchored: per_period_sum[time],
                        total,
                    });
                }
                info!("period {time} is fully anchored; dropping its aggregate constraint");
                dropped_periods.push(time);
            } else {
                rows.push(Row::Period(time));
                targets.push(ya[time]);
            }
        }
        let mut sorted: Vec<Anchor> = anchors.to_vec();
        sorted.sort_by_key(|a| (a.time, a.region));
        for a in &sorted {
            rows.push(Row::Cell(a.region, a.time));
            targets.push(a.value);
        }
        Ok(ConstraintSystem {
            n,
            t,
            rows,
            targets: DVector::from_vec(targets),
            anchors: sorted,
            dropped_periods,
        })
    }

    pub fn aggregate_only(n: usize, ya: &DVector<f64>) -> Self {
        Self::new(n, ya, &[]).expect("no anchors cannot conflict")
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn dropped_periods(&self) -> &[usize] {
        &self.dropped_periods
    }

    /// Dense `(T + m) x nT` stacked constraint matrix.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.rows.len(), self.n * self.t);
        for (r, row) in self.rows.iter().enumerate() {
            match *row {
                Row::Period(t) => {
                    for i in 0..self.n {
                        c[(r, t * self.n + i)] = 1.0;
                    }
                }
                Row::Cell(i, t) => c[(r, t * self.n + i)] = 1.0,
            }
        }
        c
    }

    fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|row| match *row {
                Row::Period(t) => y.rows(t * self.n, self.n).sum(),
                Row::Cell(i, t) => y[t * self.n + i],
            }),
        )
    }
}

/// Structured covariance pieces used by the conditional formulas.
struct Pieces<'a> {
    sigma_u: &'a DMatrix<f64>,
    g_mat: DMatrix<f64>,
    g_vec: DVector<f64>,
    scale: f64,
}

impl<'a> Pieces<'a> {
    fn new(model: &'a CovarianceModel) -> Self {
        let f = model.factor();
        Pieces {
            sigma_u: model.sigma_u(),
            g_mat: f.spatial_covariance(),
            g_vec: f.spatial_covariance_rowsums(),
            scale: f.scale(),
        }
    }

    /// `Cov(Y[i, t], row)`.
    fn cell_row(&self, i: usize, t: usize, row: Row) -> f64 {
        match row {
            Row::Period(s) => self.sigma_u[(t, s)] * self.g_vec[i],
            Row::Cell(j, s) => self.sigma_u[(t, s)] * self.g_mat[(i, j)],
        }
    }

    /// `Cov(row_a, row_b)`.
    fn row_row(&self, a: Row, b: Row) -> f64 {
        match (a, b) {
            (Row::Period(t), Row::Period(s)) => self.sigma_u[(t, s)] * self.scale,
            (Row::Period(t), Row::Cell(j, s)) | (Row::Cell(j, s), Row::Period(t)) => {
                self.sigma_u[(t, s)] * self.g_vec[j]
            }
            (Row::Cell(i, t), Row::Cell(j, s)) => self.sigma_u[(t, s)] * self.g_mat[(i, j)],
        }
    }
}

/// Output of the predictor.
#[derive(Debug, Clone, Serialize)]
pub struct DisaggregationResult {
    pub yhat: StackedPanel,
    pub pointwise_var: Vec<f64>,
    /// `max_t |sum_i yhat[i, t] - Y_a[t]|`.
    pub coherence_residual: f64,
    pub anchored_cells: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

/// Optional extras for [`blup_with`].
#[derive(Debug, Clone, Default)]
pub struct BlupOptions {
    /// Covariance of `beta-hat`; when set, the delta-method variance of the
    /// `beta`-dependent part of the predictor is added to `pointwise_var`.
    pub beta_cov: Option<DMatrix<f64>>,
}

fn mean_panel(model: &CovarianceModel, params: &ModelParams, z: &DMatrix<f64>) -> Result<DVector<f64>> {
    if z.ncols() != params.beta.len() {
        return Err(Error::DimensionMismatch(format!(
            "beta has {} entries but Z has {} columns",
            params.beta.len(),
            z.ncols()
        )));
    }
    let zb = DMatrix::from_column_slice(z.nrows(), 1, (z * &params.beta).as_slice());
    Ok(model.factor().apply_a_inverse(&zb)?.column(0).into_owned())
}

fn check_shapes(w: &SpatialWeights, z: &DMatrix<f64>, ya: &DVector<f64>) -> Result<(usize, usize)> {
    let (n, t) = (w.n(), ya.len());
    if z.nrows() != n * t {
        return Err(Error::DimensionMismatch(format!(
            "Z has {} rows, expected n*T = {}",
            z.nrows(),
            n * t
        )));
    }
    Ok((n, t))
}

/// BLUP under the aggregation constraint only.
pub fn blup(params: &ModelParams, z: &DMatrix<f64>, ya: &DVector<f64>, w: &SpatialWeights) -> Result<DisaggregationResult> {
    params.validate()?;
    let (n, t) = check_shapes(w, z, ya)?;
    let model = CovarianceModel::new(params, w, t)?;
    let m = mean_panel(&model, params, z)?;
    let p = Pieces::new(&model);
    if !(p.scale > 0.0) || Cholesky::new(model.aggregated_cov()).is_none() {
        return Err(Error::NotPositiveDefinite("aggregated covariance".into()));
    }
    // B C' (C B C')^{-1} = Sigma_U ⊗ g times (s Sigma_U)^{-1}: each period's
    // residual is spread in proportion to g / s.
    let share = &p.g_vec / p.scale;
    let mut yhat = m.clone();
    let mut var = vec![0.0; n * t];
    for time in 0..t {
        let resid = ya[time] - m.rows(time * n, n).sum();
        for i in 0..n {
            let k = time * n + i;
            yhat[k] += share[i] * resid;
            var[k] = p.sigma_u[(time, time)] * (p.g_mat[(i, i)] - p.g_vec[i] * share[i]);
        }
    }
    finish(yhat, var, n, t, ya, vec![])
}

/// BLUP against the period totals stacked with anchored cells.
pub fn anchored_blup(
    params: &ModelParams,
    z: &DMatrix<f64>,
    ya: &DVector<f64>,
    anchors: &[Anchor],
    w: &SpatialWeights,
) -> Result<DisaggregationResult> {
    blup_with(params, z, ya, anchors, w, &BlupOptions::default())
}

/// General constrained predictor.
pub fn blup_with(
    params: &ModelParams,
    z: &DMatrix<f64>,
    ya: &DVector<f64>,
    anchors: &[Anchor],
    w: &SpatialWeights,
    options: &BlupOptions,
) -> Result<DisaggregationResult> {
    params.validate()?;
    let (n, t) = check_shapes(w, z, ya)?;
    let system = ConstraintSystem::new(n, ya, anchors)?;
    let model = CovarianceModel::new(params, w, t)?;
    let m = mean_panel(&model, params, z)?;
    let cond = Conditioner::new(&model, &system)?;

    let resid = &system.targets - system.apply(&m);
    let alpha = cond.chol.solve(&resid);
    let mut yhat = m;
    for k in 0..n * t {
        let (i, time) = (k % n, k / n);
        yhat[k] += cond.cross(i, time).dot(&alpha);
    }
    let mut var = cond.conditional_variances();

    let mut warnings = Vec::new();
    if let Some(cov_beta) = &options.beta_cov {
        let k = params.beta.len();
        if cov_beta.shape() != (k, k) {
            return Err(Error::DimensionMismatch(format!(
                "beta covariance must be {k}x{k}"
            )));
        }
        // d yhat / d beta = (I - B C~' K^{-1} C~) A^{-1} Z
        let az = model.factor().apply_a_inverse(z)?;
        let caz = DMatrix::from_fn(system.len(), k, |r, c| {
            let col = az.column(c).into_owned();
            system.apply(&col)[r]
        });
        let k_inv_caz = cond.chol.solve(&caz);
        for cell in 0..n * t {
            let (i, time) = (cell % n, cell / n);
            let b = cond.cross(i, time);
            let d = az.row(cell).transpose() - k_inv_caz.tr_mul(&b);
            var[cell] += d.dot(&(cov_beta * &d));
        }
        warnings.push("pointwise variances include beta-hat uncertainty (delta method)".into());
    }

    let anchored = system.anchors().iter().map(|a| (a.region, a.time)).collect();
    let mut out = finish(yhat, var, n, t, ya, anchored)?;
    out.warnings.extend(warnings);
    Ok(out)
}

/// Cholesky of `C~ B C~'` plus the row bookkeeping.
struct Conditioner<'a> {
    pieces: Pieces<'a>,
    rows: Vec<Row>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    n: usize,
    t: usize,
}

impl<'a> Conditioner<'a> {
    fn new(model: &'a CovarianceModel, system: &ConstraintSystem) -> Result<Self> {
        let pieces = Pieces::new(model);
        let rows = system.rows.clone();
        let kmat = DMatrix::from_fn(rows.len(), rows.len(), |a, b| pieces.row_row(rows[a], rows[b]));
        let chol = Cholesky::new(kmat).ok_or_else(|| {
            Error::NotPositiveDefinite("stacked constraint covariance C~ B C~'".into())
        })?;
        Ok(Conditioner {
            pieces,
            rows,
            chol,
            n: model.n(),
            t: model.periods(),
        })
    }

    fn cross(&self, i: usize, t: usize) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|&r| self.pieces.cell_row(i, t, r)))
    }

    fn conditional_variances(&self) -> Vec<f64> {
        let l = self.chol.l_dirty();
        (0..self.n * self.t)
            .map(|k| {
                let (i, t) = (k % self.n, k / self.n);
                let b = self.cross(i, t);
                let h = l.solve_lower_triangular(&b).expect("positive diagonal");
                self.pieces.sigma_u[(t, t)] * self.pieces.g_mat[(i, i)] - h.norm_squared()
            })
            .collect()
    }
}

/// Per-cell conditional variances given period totals and anchored cells.
pub(crate) fn conditional_variances(model: &CovarianceModel, cells: &[(usize, usize)]) -> Result<Vec<f64>> {
    let placeholder = DVector::zeros(model.periods());
    let anchors: Vec<Anchor> = cells.iter().map(|&(i, t)| Anchor::new(i, t, 0.0)).collect();
    // Values are irrelevant for variances, but a fully anchored period must
    // still pass the consistency check, so give it zero totals.
    let system = ConstraintSystem::new(model.n(), &placeholder, &anchors)?;
    let cond = Conditioner::new(model, &system)?;
    Ok(cond.conditional_variances())
}

fn finish(
    yhat: DVector<f64>,
    mut var: Vec<f64>,
    n: usize,
    t: usize,
    ya: &DVector<f64>,
    anchored_cells: Vec<(usize, usize)>,
) -> Result<DisaggregationResult> {
    let mut warnings = Vec::new();
    let worst = var.iter().copied().fold(0.0, f64::min);
    if worst < -NEGATIVE_VAR_TOL {
        let msg = format!("negative prediction variance {worst:.3e} clamped to zero");
        debug!("{msg}");
        warnings.push(msg);
    }
    for v in &mut var {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let yhat = StackedPanel::new(yhat, n, t)?;
    let totals = yhat.totals();
    let coherence_residual = (0..t)
        .map(|time| (totals[time] - ya[time]).abs())
        .fold(0.0, f64::max);
    Ok(DisaggregationResult {
        yhat,
        pointwise_var: var,
        coherence_residual,
        anchored_cells,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Two-sided standard normal quantile for a central coverage `level`.
pub fn normal_half_width(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("interval level must be in (0, 1), got {level}")));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    Ok(z)
}

/// Gaussian pointwise intervals `yhat ± z * sqrt(var)`.
pub fn pointwise_intervals(result: &DisaggregationResult, level: f64) -> Result<Vec<Interval>> {
    let z = normal_half_width(level)?;
    Ok(result
        .yhat
        .values()
        .iter()
        .zip(&result.pointwise_var)
        .map(|(&y, &v)| {
            let h = z * v.max(0.0).sqrt();
            Interval { lo: y - h, hi: y + h }
        })
        .collect())
}

pub const EXPORT_LEVELS: [f64; 3] = [0.90, 0.95, 0.99];

/// Write `region,time,yhat,var,lo90,hi90,lo95,hi95,lo99,hi99`.
///
/// Labels default to 1-based indices.
pub fn write_result_csv(
    path: &Path,
    result: &DisaggregationResult,
    region_labels: Option<&[String]>,
    period_labels: Option<&[String]>,
) -> Result<()> {
    let n = result.yhat.n();
    let t = result.yhat.periods();
    let intervals: Vec<Vec<Interval>> = EXPORT_LEVELS
        .iter()
        .map(|&l| pointwise_intervals(result, l))
        .collect::<Result<_>>()?;
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["region", "time", "yhat", "var", "lo90", "hi90", "lo95", "hi95", "lo99", "hi99"])?;
    for time in 0..t {
        for i in 0..n {
            let k = time * n + i;
            let region = region_labels.map(|l| l[i].clone()).unwrap_or_else(|| (i + 1).to_string());
            let period = period_labels.map(|l| l[time].clone()).unwrap_or_else(|| (time + 1).to_string());
            let mut rec = vec![
                region,
                period,
                fmt_sig(result.yhat.values()[k]),
                fmt_sig(result.pointwise_var[k]),
            ];
            for iv in &intervals {
                rec.push(fmt_sig(iv[k].lo));
                rec.push(fmt_sig(iv[k].hi));
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

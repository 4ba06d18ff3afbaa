//! Theoretical explained variance and RMSE at given parameters, and
//! empirical fit metrics of an estimated panel against the truth.

use std::fs::OpenOptions;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::fmt_sig;
use crate::model::{CovarianceModel, ModelParams, StackedPanel, DEFAULT_DENSE_CAP};
use crate::predictor::conditional_variances;
use crate::weights::SpatialWeights;

/// Cells whose truth is smaller than this in magnitude are left out of MAPE.
pub const MAPE_ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoreticalSummary {
    pub r2_disagg: f64,
    pub r2_agg: f64,
    pub rmse_disagg: f64,
    pub rmse_agg: f64,
}

/// Theoretical summary given the period totals only.
pub fn theoretical_summary(params: &ModelParams, w: &SpatialWeights, t: usize) -> Result<TheoreticalSummary> {
    theoretical_summary_with(params, w, t, &[], DEFAULT_DENSE_CAP)
}

/// Theoretical summary when anchored cells `(region, time)` are conditioned
/// on as well. `cap` bounds `n T`.
///
/// `Var(Y)` is `Sigma_U ⊗ G`; `Var(Y | Z, Y_a)` is its conditional version
/// given the stacked constraints. At the aggregate level the unconditional
/// and covariate-conditional variances coincide at `C Var(Y) C'`, so
/// `r2_agg` is 0 and `rmse_agg` is the scale of the aggregate noise.
pub fn theoretical_summary_with(
    params: &ModelParams,
    w: &SpatialWeights,
    t: usize,
    anchored: &[(usize, usize)],
    cap: usize,
) -> Result<TheoreticalSummary> {
    params.validate()?;
    let n = w.n();
    if n * t > cap {
        return Err(Error::TooLarge {
            what: "panel for theoretical traces",
            size: n * t,
            cap,
        });
    }
    let model = CovarianceModel::new(params, w, t)?;
    let f = model.factor();
    let trace_sigma_u = model.sigma_u().trace();
    let trace_var_y = trace_sigma_u * f.spatial_covariance().trace();
    let trace_cond: f64 = conditional_variances(&model, anchored)?
        .into_iter()
        .map(|v| v.max(0.0))
        .sum();

    let trace_var_ya = f.scale() * trace_sigma_u;
    let trace_ya_given_z = trace_var_ya;
    Ok(TheoreticalSummary {
        r2_disagg: 1.0 - trace_cond / trace_var_y,
        r2_agg: 1.0 - trace_ya_given_z / trace_var_ya,
        rmse_disagg: (trace_cond / (n * t) as f64).sqrt(),
        rmse_agg: (trace_ya_given_z / t as f64).sqrt(),
    })
}

/// How the chi-square discrepancy sums its per-region terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Chi2Mode {
    /// `sum_i (sum_t e_it / sum_t Y_it)^2`.
    #[default]
    Squared,
    /// The signed sum `sum_i sum_t e_it / sum_t Y_it`.
    AsWritten,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionMetrics {
    pub region: usize,
    pub mape: f64,
    pub rrmse: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub r2: f64,
    /// Percent.
    pub mape: f64,
    /// `rmse / mean(Y)`; NaN when the mean is zero.
    pub rrmse: f64,
    pub rmse: f64,
    pub chi2: f64,
    /// Cells left out of MAPE because the truth is numerically zero.
    pub mape_excluded: usize,
    pub per_region: Vec<RegionMetrics>,
}

pub const METRIC_CSV_HEADER: [&str; 6] = ["r2", "mape", "rrmse", "rmse", "chi2", "mape_excluded"];

impl MetricReport {
    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            fmt_sig(self.r2),
            fmt_sig(self.mape),
            fmt_sig(self.rrmse),
            fmt_sig(self.rmse),
            fmt_sig(self.chi2),
            self.mape_excluded.to_string(),
        ]
    }

    /// Append one row to `path`, writing the header when the file is new or
    /// empty.
    pub fn append_csv_row(&self, path: &Path) -> Result<()> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut wtr = csv::Writer::from_writer(file);
        if fresh {
            wtr.write_record(METRIC_CSV_HEADER)?;
        }
        wtr.write_record(self.csv_fields())?;
        wtr.flush()?;
        Ok(())
    }
}

/// Empirical metrics of `estimate` against `truth`.
pub fn empirical_metrics(truth: &StackedPanel, estimate: &StackedPanel, chi2_mode: Chi2Mode) -> Result<MetricReport> {
    let (n, t) = (truth.n(), truth.periods());
    if estimate.n() != n || estimate.periods() != t {
        return Err(Error::DimensionMismatch(format!(
            "truth is {n} x {t} but estimate is {} x {}",
            estimate.n(),
            estimate.periods()
        )));
    }
    let y = truth.values();
    let yhat = estimate.values();
    let cells = (n * t) as f64;
    let mean = y.mean();
    let sse: f64 = y.iter().zip(yhat.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let sst: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
    if !(sst > 0.0) {
        return Err(Error::UndefinedMetric("R2: truth has zero total variance".into()));
    }
    let (ape_sum, included) = ape(y.iter().copied().zip(yhat.iter().copied()));
    if included == 0 {
        return Err(Error::UndefinedMetric("MAPE: every truth value is zero".into()));
    }
    let rmse = (sse / cells).sqrt();

    let mut chi2 = 0.0;
    let mut per_region = Vec::with_capacity(n);
    for i in 0..n {
        let ys = truth.region_series(i);
        let hs = estimate.region_series(i);
        let total: f64 = ys.iter().sum();
        if total == 0.0 {
            return Err(Error::UndefinedMetric(format!("chi2: region {} has a zero total", i + 1)));
        }
        let err: f64 = ys.iter().zip(&hs).map(|(a, b)| a - b).sum();
        let term = err / total;
        chi2 += match chi2_mode {
            Chi2Mode::Squared => term * term,
            Chi2Mode::AsWritten => term,
        };

        let m = total / t as f64;
        let sse_i: f64 = ys.iter().zip(&hs).map(|(a, b)| (a - b).powi(2)).sum();
        let sst_i: f64 = ys.iter().map(|a| (a - m).powi(2)).sum();
        let (ape_i, inc_i) = ape(ys.iter().copied().zip(hs.iter().copied()));
        per_region.push(RegionMetrics {
            region: i,
            mape: if inc_i > 0 { ape_i / inc_i as f64 * 100.0 } else { f64::NAN },
            rrmse: ratio((sse_i / t as f64).sqrt(), m),
            r2: if sst_i > 0.0 { 1.0 - sse_i / sst_i } else { f64::NAN },
        });
    }

    Ok(MetricReport {
        r2: 1.0 - sse / sst,
        mape: ape_sum / included as f64 * 100.0,
        rrmse: ratio(rmse, mean),
        rmse,
        chi2,
        mape_excluded: n * t - included,
        per_region,
    })
}

fn ape(pairs: impl Iterator<Item = (f64, f64)>) -> (f64, usize) {
    pairs
        .filter(|(y, _)| y.abs() >= MAPE_ZERO_TOL)
        .fold((0.0, 0), |(s, c), (y, h)| (s + ((y - h) / y).abs(), c + 1))
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::NAN
    } else {
        num / den
    }
}

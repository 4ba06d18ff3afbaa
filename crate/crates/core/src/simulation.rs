//! Synthetic panels on a square grid and a parallel parameter sweep.
//!
//! A scenario draws `Z = [1, U(0, 1)]`, independent stationary AR(1) error
//! paths per region, and sets `Y = A^{-1} (Z beta + U)`. The sweep runs the
//! cartesian product of parameter lists, fits and disaggregates each run, and
//! summarizes metrics by signal-to-noise category.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Median, OrderStatistics};

use crate::diagnostics::{empirical_metrics, Chi2Mode, MetricReport};
use crate::error::{Error, Result};
use crate::estimator::{fit, EstimationConfig, FitResult};
use crate::io::{fmt_sig, open};
use crate::model::{ModelParams, SpatialFactor, StackedPanel};
use crate::predictor::{anchored_blup, Anchor};
use crate::weights::{build_grid_adjacency, SpatialWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Grid side; the panel has `k^2` regions.
    pub k: usize,
    pub t: usize,
    pub rho: f64,
    pub phi: f64,
    pub beta0: f64,
    pub beta1: f64,
    /// Innovation standard deviation.
    pub sigma: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn n(&self) -> usize {
        self.k * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("grid side k must be at least 2, got {}", self.k)));
        }
        if self.t < 2 {
            return Err(Error::InvalidArgument(format!("T must be at least 2, got {}", self.t)));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!("|rho| < 1 required, got rho = {}", self.rho)));
        }
        if !(self.phi.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!("|phi| < 1 required, got phi = {}", self.phi)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if !self.beta0.is_finite() || !self.beta1.is_finite() {
            return Err(Error::InvalidArgument("beta must be finite".into()));
        }
        Ok(())
    }

    /// `beta1 / sigma^2`.
    pub fn ratio(&self) -> f64 {
        self.beta1 / (self.sigma * self.sigma)
    }

    pub fn category(&self) -> RatioCategory {
        RatioCategory::from_ratio(self.ratio())
    }

    pub fn params(&self) -> ModelParams {
        ModelParams::new(vec![self.beta0, self.beta1], self.phi, self.sigma * self.sigma, self.rho)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RatioCategory {
    Low,
    Medium,
    High,
    VeryHigh,
}

impl RatioCategory {
    /// Low below 5, Medium below 50, High up to 500, Very High above.
    pub fn from_ratio(ratio: f64) -> Self {
        if ratio < 5.0 {
            RatioCategory::Low
        } else if ratio < 50.0 {
            RatioCategory::Medium
        } else if ratio <= 500.0 {
            RatioCategory::High
        } else {
            RatioCategory::VeryHigh
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RatioCategory::Low => "Low",
            RatioCategory::Medium => "Medium",
            RatioCategory::High => "High",
            RatioCategory::VeryHigh => "Very High",
        }
    }
}

impl fmt::Display for RatioCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub spec: ScenarioSpec,
    pub w: SpatialWeights,
    /// `nT x 2`, intercept first.
    pub z: DMatrix<f64>,
    pub u: StackedPanel,
    pub y_true: StackedPanel,
    pub ya: DVector<f64>,
}

/// Draw one synthetic panel. Identical specs give bit-identical output.
pub fn generate(spec: &ScenarioSpec) -> Result<SimulatedData> {
    spec.validate()?;
    let w = build_grid_adjacency(spec.k)?;
    let (n, t) = (spec.n(), spec.t);
    let factor = SpatialFactor::new(spec.rho, &w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut z = DMatrix::from_element(n * t, 2, 1.0);
    for r in 0..n * t {
        z[(r, 1)] = rng.random::<f64>();
    }

    let mut u = DVector::zeros(n * t);
    if spec.sigma > 0.0 {
        let innov = Normal::new(0.0, spec.sigma).expect("sigma is positive");
        let stationary = Normal::new(0.0, spec.sigma / (1.0 - spec.phi * spec.phi).sqrt()).expect("sd is positive");
        for i in 0..n {
            let mut prev = stationary.sample(&mut rng);
            u[i] = prev;
            for time in 1..t {
                prev = spec.phi * prev + innov.sample(&mut rng);
                u[time * n + i] = prev;
            }
        }
    }

    let beta = DVector::from_vec(vec![spec.beta0, spec.beta1]);
    let rhs = &z * &beta + &u;
    let y = factor
        .apply_a_inverse(&DMatrix::from_column_slice(n * t, 1, rhs.as_slice()))?
        .column(0)
        .into_owned();
    let y_true = StackedPanel::new(y, n, t)?;
    let ya = y_true.totals();
    Ok(SimulatedData {
        spec: *spec,
        w,
        z,
        u: StackedPanel::new(u, n, t)?,
        y_true,
        ya,
    })
}

/// Outcome of one generate-fit-disaggregate-score run.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub spec: ScenarioSpec,
    pub fit: FitResult,
    pub yhat: StackedPanel,
    pub pointwise_var: Vec<f64>,
    pub coherence_residual: f64,
    pub metrics: MetricReport,
}

/// Simulate, fit, predict and score against the truth. Anchored cells
/// `(region, time)` take their values from the simulated truth.
pub fn run_scenario(
    spec: &ScenarioSpec,
    anchor_cells: &[(usize, usize)],
    config: &EstimationConfig,
    chi2_mode: Chi2Mode,
) -> Result<ScenarioRun> {
    let data = generate(spec)?;
    run_on(&data, anchor_cells, config, chi2_mode)
}

/// Same as [`run_scenario`] on already generated data.
pub fn run_on(
    data: &SimulatedData,
    anchor_cells: &[(usize, usize)],
    config: &EstimationConfig,
    chi2_mode: Chi2Mode,
) -> Result<ScenarioRun> {
    let fit = fit(&data.z, &data.ya, &data.w, config)?;
    let anchors: Vec<Anchor> = anchor_cells
        .iter()
        .map(|&(i, time)| Anchor::new(i, time, data.y_true.get(i, time)))
        .collect();
    let pred = anchored_blup(&fit.params, &data.z, &data.ya, &anchors, &data.w)?;
    let metrics = empirical_metrics(&data.y_true, &pred.yhat, chi2_mode)?;
    Ok(ScenarioRun {
        spec: data.spec,
        fit,
        yhat: pred.yhat,
        pointwise_var: pred.pointwise_var,
        coherence_residual: pred.coherence_residual,
        metrics,
    })
}

/// Parameter lists whose cartesian product defines a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    /// Region counts; each must be a perfect square.
    pub n: Vec<usize>,
    pub t: Vec<usize>,
    pub rho: Vec<f64>,
    pub phi: Vec<f64>,
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
    pub sigma: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            n: vec![9],
            t: vec![24],
            rho: vec![0.0],
            phi: vec![0.5],
            beta0: vec![1.0],
            beta1: vec![1.0],
            sigma: vec![0.1],
            replications: 1,
            seed: 1,
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| Error::Parse(format!("{key}: cannot parse '{s}'")))
        })
        .collect()
}

fn parse_single<T: FromStr + Copy>(key: &str, value: &str) -> Result<T> {
    match parse_list::<T>(key, value)?.as_slice() {
        [v] => Ok(*v),
        _ => Err(Error::Parse(format!("{key} takes a single value"))),
    }
}

impl FromStr for SweepGrid {
    type Err = Error;

    /// `key = v1, v2, ...` lines; `#` starts a comment. Keys not given keep
    /// their defaults.
    fn from_str(text: &str) -> Result<Self> {
        let mut grid = SweepGrid::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected 'key = values'", lineno + 1)))?;
            let key = key.trim();
            match key {
                "n" => grid.n = parse_list(key, value)?,
                "T" | "t" => grid.t = parse_list(key, value)?,
                "rho" => grid.rho = parse_list(key, value)?,
                "phi" => grid.phi = parse_list(key, value)?,
                "beta0" => grid.beta0 = parse_list(key, value)?,
                "beta1" => grid.beta1 = parse_list(key, value)?,
                "sigma" => grid.sigma = parse_list(key, value)?,
                "replications" => grid.replications = parse_single(key, value)?,
                "seed" => grid.seed = parse_single(key, value)?,
                other => {
                    return Err(Error::Parse(format!("line {}: unknown key '{other}'", lineno + 1)));
                }
            }
        }
        Ok(grid)
    }
}

impl SweepGrid {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut text = String::new();
        open(path)?.read_to_string(&mut text)?;
        text.parse()
    }

    pub fn len(&self) -> usize {
        self.n.len()
            * self.t.len()
            * self.rho.len()
            * self.phi.len()
            * self.beta0.len()
            * self.beta1.len()
            * self.sigma.len()
            * self.replications
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("sweep grid is empty".into()));
        }
        for &n in &self.n {
            let k = (n as f64).sqrt().round() as usize;
            if k * k != n || k < 2 {
                return Err(Error::InvalidArgument(format!("n = {n} is not a square grid size")));
            }
        }
        Ok(())
    }

    /// Expand into specs. Run `r` gets its seed from stream `r` of a
    /// generator keyed by the base seed, so seeds do not depend on
    /// execution order.
    pub fn specs(&self) -> Result<Vec<ScenarioSpec>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.len());
        for &n in &self.n {
            let k = (n as f64).sqrt().round() as usize;
            for &t in &self.t {
                for &rho in &self.rho {
                    for &phi in &self.phi {
                        for &beta0 in &self.beta0 {
                            for &beta1 in &self.beta1 {
                                for &sigma in &self.sigma {
                                    for _ in 0..self.replications {
                                        let seed = run_seed(self.seed, out.len() as u64);
                                        out.push(ScenarioSpec { k, t, rho, phi, beta0, beta1, sigma, seed });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Seed of run `index` under base seed `base`.
pub fn run_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.next_u64()
}

/// One row of the tidy per-run table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub spec: ScenarioSpec,
    pub ratio: f64,
    pub category: RatioCategory,
    pub rmse: f64,
    pub rrmse: f64,
    pub mape: f64,
    pub r2: f64,
    pub chi2: f64,
    pub rho_hat: f64,
    pub phi_hat: f64,
    pub sigma2_hat: f64,
    pub converged: bool,
}

pub const SWEEP_CSV_HEADER: [&str; 18] = [
    "n", "T", "rho", "phi", "beta1", "sigma", "seed", "ratio", "category", "rmse", "rrmse", "mape", "r2", "chi2",
    "rho_hat", "phi_hat", "sigma2_hat", "converged",
];

impl SweepRow {
    fn from_run(run: &ScenarioRun) -> Self {
        let s = run.spec;
        let m = &run.metrics;
        SweepRow {
            spec: s,
            ratio: s.ratio(),
            category: s.category(),
            rmse: m.rmse,
            rrmse: m.rrmse,
            mape: m.mape,
            r2: m.r2,
            chi2: m.chi2,
            rho_hat: run.fit.params.rho,
            phi_hat: run.fit.params.phi1,
            sigma2_hat: run.fit.params.sigma2,
            converged: run.fit.converged,
        }
    }

    fn record(&self) -> Vec<String> {
        let s = &self.spec;
        vec![
            s.n().to_string(),
            s.t.to_string(),
            fmt_sig(s.rho),
            fmt_sig(s.phi),
            fmt_sig(s.beta1),
            fmt_sig(s.sigma),
            s.seed.to_string(),
            fmt_sig(self.ratio),
            self.category.to_string(),
            fmt_sig(self.rmse),
            fmt_sig(self.rrmse),
            fmt_sig(self.mape),
            fmt_sig(self.r2),
            fmt_sig(self.chi2),
            fmt_sig(self.rho_hat),
            fmt_sig(self.phi_hat),
            fmt_sig(self.sigma2_hat),
            self.converged.to_string(),
        ]
    }
}

/// A run that produced no metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailedRun {
    pub spec: ScenarioSpec,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricStats {
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl MetricStats {
    fn of(values: &[f64]) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return MetricStats { mean: f64::NAN, median: f64::NAN, q1: f64::NAN, q3: f64::NAN };
        }
        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
        let mut data = Data::new(finite);
        MetricStats {
            mean,
            median: data.median(),
            q1: data.lower_quartile(),
            q3: data.upper_quartile(),
        }
    }
}

pub const SUMMARY_METRICS: [&str; 5] = ["rmse", "rrmse", "mape", "r2", "chi2"];

/// Metrics of one group of runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub keys: Vec<(String, String)>,
    pub runs: usize,
    pub failures: usize,
    /// In the order of [`SUMMARY_METRICS`].
    pub stats: Vec<MetricStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryTable {
    pub key_names: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = self.key_names.clone();
        header.push("runs".into());
        header.push("failures".into());
        for m in SUMMARY_METRICS {
            for s in ["mean", "median", "q1", "q3"] {
                header.push(format!("{m}_{s}"));
            }
        }
        wtr.write_record(&header)?;
        for row in &self.rows {
            let mut rec: Vec<String> = row.keys.iter().map(|(_, v)| v.clone()).collect();
            rec.push(row.runs.to_string());
            rec.push(row.failures.to_string());
            for s in &row.stats {
                rec.extend([fmt_sig(s.mean), fmt_sig(s.median), fmt_sig(s.q1), fmt_sig(s.q3)]);
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Row whose keys equal `keys`, in key order.
    pub fn find(&self, keys: &[&str]) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.keys.iter().map(|(_, v)| v.as_str()).eq(keys.iter().copied()))
    }

    pub fn stat(&self, keys: &[&str], metric: &str) -> Option<MetricStats> {
        let idx = SUMMARY_METRICS.iter().position(|m| *m == metric)?;
        self.find(keys).map(|r| r.stats[idx])
    }
}

/// Per-run rows, failures and the grouped tables.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<FailedRun>,
    /// Grouped by category and `n`.
    pub by_category: SummaryTable,
    /// Grouped by `n`, `T` and category.
    pub by_size: SummaryTable,
    /// Grouped by `n`, `T`, `rho` and category.
    pub by_rho: SummaryTable,
}

impl SweepSummary {
    pub fn write_rows_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(SWEEP_CSV_HEADER)?;
        for row in &self.rows {
            wtr.write_record(row.record())?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_failures_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["n", "T", "rho", "phi", "beta1", "sigma", "seed", "error"])?;
        for f in &self.failures {
            let s = &f.spec;
            wtr.write_record([
                s.n().to_string(),
                s.t.to_string(),
                fmt_sig(s.rho),
                fmt_sig(s.phi),
                fmt_sig(s.beta1),
                fmt_sig(s.sigma),
                s.seed.to_string(),
                f.error.clone(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
    pub estimation: EstimationConfig,
    pub chi2_mode: Chi2Mode,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            jobs: 0,
            estimation: EstimationConfig {
                std_errors: false,
                ..EstimationConfig::default()
            },
            chi2_mode: Chi2Mode::Squared,
        }
    }
}

/// Run the grid. Failed runs are logged and kept out of the per-run rows.
pub fn sweep(grid: &SweepGrid, options: &SweepOptions) -> Result<SweepSummary> {
    let specs = grid.specs()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<std::result::Result<SweepRow, FailedRun>> = pool.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                let config = EstimationConfig {
                    seed: spec.seed,
                    ..options.estimation.clone()
                };
                run_scenario(spec, &[], &config, options.chi2_mode)
                    .map(|run| SweepRow::from_run(&run))
                    .map_err(|e| FailedRun { spec: *spec, error: e.to_string() })
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => rows.push(r),
            Err(f) => {
                warn!("run failed ({:?}): {}", f.spec, f.error);
                failures.push(f);
            }
        }
    }

    let by_category = summarize(&rows, &failures, &["category", "n"], |s| {
        vec![s.category().to_string(), s.n().to_string()]
    });
    let by_size = summarize(&rows, &failures, &["n", "T", "category"], |s| {
        vec![s.n().to_string(), s.t.to_string(), s.category().to_string()]
    });
    let by_rho = summarize(&rows, &failures, &["n", "T", "rho", "category"], |s| {
        vec![s.n().to_string(), s.t.to_string(), fmt_sig(s.rho), s.category().to_string()]
    });
    Ok(SweepSummary { rows, failures, by_category, by_size, by_rho })
}

/// Sort key that orders categories by strength and numbers numerically.
fn sort_key(spec: &ScenarioSpec, names: &[&str]) -> Vec<i64> {
    names
        .iter()
        .map(|name| match *name {
            "category" => spec.category() as i64,
            "n" => spec.n() as i64,
            "T" => spec.t as i64,
            "rho" => (spec.rho * 1e9).round() as i64,
            _ => 0,
        })
        .collect()
}

fn summarize(
    rows: &[SweepRow],
    failures: &[FailedRun],
    names: &[&str],
    key: impl Fn(&ScenarioSpec) -> Vec<String>,
) -> SummaryTable {
    #[derive(Default)]
    struct Acc {
        keys: Vec<String>,
        values: Vec<Vec<f64>>,
        failures: usize,
    }
    let mut groups: BTreeMap<Vec<i64>, Acc> = BTreeMap::new();
    for r in rows {
        let acc = groups.entry(sort_key(&r.spec, names)).or_default();
        acc.keys = key(&r.spec);
        acc.values.push(vec![r.rmse, r.rrmse, r.mape, r.r2, r.chi2]);
    }
    for f in failures {
        let acc = groups.entry(sort_key(&f.spec, names)).or_default();
        acc.keys = key(&f.spec);
        acc.failures += 1;
    }
    let rows = groups
        .into_values()
        .map(|acc| {
            let stats = (0..SUMMARY_METRICS.len())
                .map(|m| MetricStats::of(&acc.values.iter().map(|v| v[m]).collect::<Vec<_>>()))
                .collect();
            SummaryRow {
                keys: names.iter().map(|s| s.to_string()).zip(acc.keys).collect(),
                runs: acc.values.len(),
                failures: acc.failures,
                stats,
            }
        })
        .collect();
    SummaryTable {
        key_names: names.iter().map(|s| s.to_string()).collect(),
        rows,
    }
}

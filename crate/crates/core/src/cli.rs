//! Batch commands behind the `spdisagg` binary: `simulate`, `disaggregate`
//! and `sweep`. Every command writes a `manifest.json` next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::dataprep::{pca_fit, pca_transform, read_panel_values, select_components, with_intercept, PanelDataset, PcaModel};
use crate::diagnostics::{empirical_metrics, theoretical_summary_with, Chi2Mode, MetricReport, TheoreticalSummary};
use crate::error::{Error, Result};
use crate::estimator::{fit, EstimationConfig};
use crate::io::{bytes_digest, file_digest, fmt_sig, write_dense_csv, write_json};
use crate::model::DEFAULT_DENSE_CAP;
use crate::predictor::{blup_with, write_result_csv, BlupOptions};
use crate::simulation::{generate, sweep, ScenarioSpec, SweepGrid, SweepOptions};
use crate::weights::{
    build_grid_adjacency, from_edge_list, gower_weights, read_dense, read_edge_pairs, read_gower_csv, SpatialWeights,
};

pub const JOBS_ENV: &str = "SPDISAGG_JOBS";

#[derive(Debug, Parser, Serialize)]
#[command(name = "spdisagg", version, about = "Spatio-temporal disaggregation of aggregate time series")]
pub struct Cli {
    /// Use the signed, unsquared chi-square discrepancy.
    #[arg(long, global = true)]
    pub chi2_as_written: bool,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Generate a synthetic panel on a k x k grid.
    Simulate(SimulateArgs),
    /// Fit the model to an aggregate and predict the regional panel.
    Disaggregate(DisaggregateArgs),
    /// Run a simulation grid from a config file.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Grid side; the panel has k^2 regions.
    #[arg(long)]
    pub k: usize,
    #[arg(long = "T")]
    pub t: usize,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub phi: f64,
    /// Intercept and slope, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,1", allow_hyphen_values = true)]
    pub beta: Vec<f64>,
    /// Innovation standard deviation.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group(ArgGroup::new("weights").required(true).args(["grid", "edges", "weights_dense", "gower"])))]
pub struct DisaggregateArgs {
    /// Long covariate CSV `region,period,variable,value`.
    #[arg(long)]
    pub panel: PathBuf,
    /// Aggregate CSV `period,total`.
    #[arg(long)]
    pub aggregate: PathBuf,
    /// Known cells `region,period,value`.
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    /// True panel `region,period,value` for empirical metrics.
    #[arg(long)]
    pub truth: Option<PathBuf>,

    /// Queen-contiguity weights on a k x k grid.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Undirected edge list `i,j` with 1-based indices in panel region order.
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// Dense nonnegative weight matrix, headerless.
    #[arg(long = "weights")]
    pub weights_dense: Option<PathBuf>,
    /// Region profiles for Gower similarity weights.
    #[arg(long)]
    pub gower: Option<PathBuf>,

    /// Keep the principal components reaching this cumulative percentage.
    #[arg(long, conflicts_with = "pca_components")]
    pub pca_threshold: Option<f64>,
    /// Keep this many principal components.
    #[arg(long)]
    pub pca_components: Option<usize>,
    /// Reuse a saved PCA model instead of fitting one.
    #[arg(long)]
    pub pca_model: Option<PathBuf>,

    #[arg(long, default_value_t = 5)]
    pub multistart: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    /// Add the uncertainty of beta-hat to the prediction variances.
    #[arg(long)]
    pub delta_method: bool,

    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    /// Grid file with `key = v1, v2, ...` lines.
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = JOBS_ENV, default_value_t = 0)]
    #[serde(skip)]
    pub jobs: usize,
    #[arg(long, default_value_t = 5)]
    pub multistart: usize,
    /// Exit with a failure code when any run fails.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the canonical JSON of the parsed arguments and config,
    /// leaving out the output directory and thread count.
    pub config_hash: String,
    pub input_digests: BTreeMap<String, String>,
    pub output_digests: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub version: String,
    pub wall_time_secs: f64,
    pub warnings: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            config_hash: bytes_digest(&serde_json::to_vec(config)?),
            input_digests: BTreeMap::new(),
            output_digests: BTreeMap::new(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_secs: 0.0,
            warnings: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.input_digests.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.output_digests.insert(name, file_digest(path)?);
        Ok(())
    }

    fn finish(mut self, out: &Path, started: Instant) -> Result<Self> {
        self.wall_time_secs = started.elapsed().as_secs_f64();
        write_json(&out.join("manifest.json"), &self)?;
        Ok(self)
    }
}

fn chi2_mode(as_written: bool) -> Chi2Mode {
    if as_written {
        Chi2Mode::AsWritten
    } else {
        Chi2Mode::Squared
    }
}

/// Dispatch a parsed command line.
pub fn run(cli: &Cli) -> Result<RunManifest> {
    let mode = chi2_mode(cli.chi2_as_written);
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Disaggregate(a) => cmd_disaggregate(a, mode),
        Command::Sweep(a) => cmd_sweep(a, mode),
    }
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Write `z.csv`, `panel.csv`, `y_true.csv`, `ya.csv`, `w.csv`.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<RunManifest> {
    let started = Instant::now();
    let [beta0, beta1] = args.beta[..] else {
        return Err(Error::InvalidArgument(format!(
            "--beta takes exactly two values (intercept, slope), got {}",
            args.beta.len()
        )));
    };
    let spec = ScenarioSpec {
        k: args.k,
        t: args.t,
        rho: args.rho,
        phi: args.phi,
        beta0,
        beta1,
        sigma: args.sigma,
        seed: args.seed,
    };
    let data = generate(&spec)?;
    ensure_dir(&args.out)?;
    let mut manifest = RunManifest::new("simulate", args, Some(args.seed))?;
    let (n, t) = (spec.n(), spec.t);

    let z_path = args.out.join("z.csv");
    let mut wtr = csv::Writer::from_path(&z_path)?;
    wtr.write_record(["region", "period", "intercept", "z1"])?;
    for time in 0..t {
        for i in 0..n {
            let r = time * n + i;
            wtr.write_record([(i + 1).to_string(), (time + 1).to_string(), fmt_sig(data.z[(r, 0)]), fmt_sig(data.z[(r, 1)])])?;
        }
    }
    wtr.flush()?;

    let panel_path = args.out.join("panel.csv");
    let mut wtr = csv::Writer::from_path(&panel_path)?;
    wtr.write_record(["region", "period", "variable", "value"])?;
    for time in 0..t {
        for i in 0..n {
            wtr.write_record([(i + 1).to_string(), (time + 1).to_string(), "z1".into(), fmt_sig(data.z[(time * n + i, 1)])])?;
        }
    }
    wtr.flush()?;

    let y_path = args.out.join("y_true.csv");
    let mut wtr = csv::Writer::from_path(&y_path)?;
    wtr.write_record(["region", "period", "value"])?;
    for time in 0..t {
        for i in 0..n {
            wtr.write_record([(i + 1).to_string(), (time + 1).to_string(), fmt_sig(data.y_true.get(i, time))])?;
        }
    }
    wtr.flush()?;

    let ya_path = args.out.join("ya.csv");
    let mut wtr = csv::Writer::from_path(&ya_path)?;
    wtr.write_record(["period", "total"])?;
    for time in 0..t {
        wtr.write_record([(time + 1).to_string(), fmt_sig(data.ya[time])])?;
    }
    wtr.flush()?;

    let w_path = args.out.join("w.csv");
    write_dense_csv(&w_path, data.w.matrix())?;

    for p in [&z_path, &panel_path, &y_path, &ya_path, &w_path] {
        manifest.output(p)?;
    }
    info!("simulated {n} regions x {t} periods into {}", args.out.display());
    manifest.finish(&args.out, started)
}

fn load_weights(args: &DisaggregateArgs, regions: &[String], manifest: &mut RunManifest) -> Result<SpatialWeights> {
    let n = regions.len();
    let w = if let Some(k) = args.grid {
        build_grid_adjacency(k)?
    } else if let Some(path) = &args.edges {
        manifest.input(path)?;
        from_edge_list(n, &read_edge_pairs(path)?)?
    } else if let Some(path) = &args.weights_dense {
        manifest.input(path)?;
        read_dense(path)?
    } else if let Some(path) = &args.gower {
        manifest.input(path)?;
        let (labels, records) = read_gower_csv(path)?;
        let ordered = regions
            .iter()
            .map(|r| {
                labels
                    .iter()
                    .position(|l| l == r)
                    .map(|i| records[i].clone())
                    .ok_or_else(|| Error::Parse(format!("{}: no profile for region '{r}'", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        let g = gower_weights(&ordered)?;
        manifest.warnings.extend(g.warnings);
        g.weights
    } else {
        return Err(Error::InvalidArgument("one weights source is required".into()));
    };
    if w.n() != n {
        return Err(Error::DimensionMismatch(format!("weights cover {} regions but the panel has {n}", w.n())));
    }
    Ok(w)
}

#[derive(Debug, Serialize)]
struct DiagnosticsFile {
    coherence_residual: f64,
    theoretical: Option<TheoreticalSummary>,
    empirical: Option<MetricReport>,
    warnings: Vec<String>,
}

/// Fit and predict from files; writes `result.csv`, `fit.json`,
/// `diagnostics.json` and, with PCA, `pca.json`.
pub fn cmd_disaggregate(args: &DisaggregateArgs, chi2: Chi2Mode) -> Result<RunManifest> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("disaggregate", args, Some(args.seed))?;
    manifest.input(&args.panel)?;
    manifest.input(&args.aggregate)?;
    if let Some(p) = &args.anchors {
        manifest.input(p)?;
    }
    let data = PanelDataset::read(&args.panel, &args.aggregate, args.anchors.as_deref())?;
    let w = load_weights(args, &data.regions, &mut manifest)?;
    ensure_dir(&args.out)?;

    let use_pca = args.pca_threshold.is_some() || args.pca_components.is_some() || args.pca_model.is_some();
    let z = if use_pca {
        let model = match &args.pca_model {
            Some(p) => {
                manifest.input(p)?;
                PcaModel::read_json(p)?
            }
            None => pca_fit(&data.covariates, &data.variables)?,
        };
        let m = match (args.pca_components, args.pca_threshold) {
            (Some(m), _) => m,
            (None, Some(th)) => select_components(&model, th)?,
            (None, None) => model.n_components_selected,
        };
        let cum: f64 = model.explained_variance_pct.iter().take(m).sum();
        info!("PCA: keeping {m} of {} components ({cum:.1}% of variance)", model.variables.len());
        let mut saved = model.clone();
        saved.n_components_selected = m;
        let pca_path = args.out.join("pca.json");
        saved.write_json(&pca_path)?;
        manifest.output(&pca_path)?;
        with_intercept(&pca_transform(&model, &data.covariates, m)?)
    } else {
        data.design()
    };

    let config = EstimationConfig {
        multistart: args.multistart,
        seed: args.seed,
        max_iter: args.max_iter,
        ..EstimationConfig::default()
    };
    let fitted = fit(&z, &data.aggregate, &w, &config)?;
    manifest.warnings.extend(fitted.condition_warnings.iter().cloned());
    let fit_path = args.out.join("fit.json");
    write_json(&fit_path, &fitted)?;

    let mut options = BlupOptions::default();
    if args.delta_method {
        match fitted.beta_covariance() {
            Some(c) => options.beta_cov = Some(c),
            None => manifest
                .warnings
                .push("delta method requested but no parameter covariance is available".into()),
        }
    }
    let pred = blup_with(&fitted.params, &z, &data.aggregate, &data.anchors, &w, &options)?;
    manifest.warnings.extend(pred.warnings.iter().cloned());
    info!("coherence residual {:.3e}", pred.coherence_residual);
    let result_path = args.out.join("result.csv");
    write_result_csv(&result_path, &pred, Some(&data.regions), Some(&data.periods))?;

    let mut diag_warnings = Vec::new();
    let cells: Vec<(usize, usize)> = data.anchors.iter().map(|a| (a.region, a.time)).collect();
    let theoretical = match theoretical_summary_with(&fitted.params, &w, data.periods_len(), &cells, DEFAULT_DENSE_CAP) {
        Ok(s) => Some(s),
        Err(e) => {
            diag_warnings.push(format!("theoretical summary skipped: {e}"));
            None
        }
    };
    let empirical = match &args.truth {
        Some(p) => {
            manifest.input(p)?;
            let truth = read_panel_values(p, &data.regions, &data.periods)?;
            Some(empirical_metrics(&truth, &pred.yhat, chi2)?)
        }
        None => None,
    };
    let diag_path = args.out.join("diagnostics.json");
    write_json(
        &diag_path,
        &DiagnosticsFile {
            coherence_residual: pred.coherence_residual,
            theoretical,
            empirical,
            warnings: diag_warnings.clone(),
        },
    )?;
    manifest.warnings.extend(diag_warnings);
    for p in [&fit_path, &result_path, &diag_path] {
        manifest.output(p)?;
    }
    for w in &manifest.warnings {
        warn!("{w}");
    }
    manifest.finish(&args.out, started)
}

/// Run a sweep; writes `runs.csv`, `failures.csv` and three summary tables.
pub fn cmd_sweep(args: &SweepArgs, chi2: Chi2Mode) -> Result<RunManifest> {
    let started = Instant::now();
    let grid = SweepGrid::from_file(&args.config)?;
    if grid.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: the sweep grid is empty", args.config.display())));
    }
    let mut manifest = RunManifest::new("sweep", &(args, &grid), Some(grid.seed))?;
    manifest.input(&args.config)?;
    ensure_dir(&args.out)?;
    let options = SweepOptions {
        jobs: args.jobs,
        estimation: EstimationConfig {
            multistart: args.multistart,
            std_errors: false,
            ..EstimationConfig::default()
        },
        chi2_mode: chi2,
    };
    info!("sweep: {} runs", grid.len());
    let summary = sweep(&grid, &options)?;

    let path = |name: &str| args.out.join(name);
    summary.write_rows_csv(&path("runs.csv"))?;
    summary.write_failures_csv(&path("failures.csv"))?;
    summary.by_category.write_csv(&path("summary_by_category.csv"))?;
    summary.by_size.write_csv(&path("summary_by_size.csv"))?;
    summary.by_rho.write_csv(&path("summary_by_rho.csv"))?;
    for name in ["runs.csv", "failures.csv", "summary_by_category.csv", "summary_by_size.csv", "summary_by_rho.csv"] {
        manifest.output(&path(name))?;
    }
    let failed = summary.failures.len();
    if failed > 0 {
        manifest.warnings.push(format!("{failed} of {} runs failed", grid.len()));
    }
    let manifest = manifest.finish(&args.out, started)?;
    if failed > 0 && args.strict {
        return Err(Error::RunFailures { failed, total: grid.len() });
    }
    Ok(manifest)
}

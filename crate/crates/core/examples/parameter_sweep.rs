//! Run a small Monte Carlo sweep and print the summary by ratio category.

use spatial_disagg::simulation::{sweep, SweepGrid, SweepOptions, SUMMARY_METRICS};

fn main() -> spatial_disagg::Result<()> {
    let grid: SweepGrid = "
        n = 9
        T = 24
        rho = 0, 0.5
        phi = 0.5
        beta0 = 1
        beta1 = 0, 1, 10
        sigma = 0.3
        replications = 3
        seed = 99
    "
    .parse()?;
    println!("{} runs", grid.len());
    let summary = sweep(&grid, &SweepOptions::default())?;
    println!("{} succeeded, {} failed", summary.rows.len(), summary.failures.len());
    for row in &summary.by_category.rows {
        let stat = |name: &str| row.stats[SUMMARY_METRICS.iter().position(|m| *m == name).unwrap()];
        let (mape, r2) = (stat("mape"), stat("r2"));
        println!(
            "{:?}: runs {}, mape median {:.3}% (IQR {:.3}-{:.3}), r2 median {:.3}",
            row.keys, row.runs, mape.median, mape.q1, mape.q3, r2.median
        );
    }
    Ok(())
}

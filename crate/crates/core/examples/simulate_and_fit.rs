//! Simulate one scenario, estimate the model from the aggregate alone and
//! disaggregate it.

use spatial_disagg::diagnostics::{empirical_metrics, theoretical_summary, Chi2Mode};
use spatial_disagg::estimator::{fit, EstimationConfig};
use spatial_disagg::predictor::{blup, pointwise_intervals};
use spatial_disagg::simulation::{generate, ScenarioSpec};

fn main() -> spatial_disagg::Result<()> {
    let spec = ScenarioSpec { k: 3, t: 48, rho: 0.25, phi: 0.5, beta0: 1.0, beta1: 10.0, sigma: 0.5, seed: 7 };
    let data = generate(&spec)?;
    println!("scenario: n = {}, T = {}, ratio {} ({})", spec.n(), spec.t, spec.ratio(), spec.category());

    let f = fit(&data.z, &data.ya, &data.w, &EstimationConfig::default())?;
    let p = &f.params;
    println!("estimates: beta = {:.4?}, phi1 = {:.4}, sigma2 = {:.4}, rho = {:.4}", p.beta.as_slice(), p.phi1, p.sigma2, p.rho);
    if let Some(se) = &f.std_errors {
        println!("std errors: beta = {:?}, rho = {:.4}", se.beta, se.rho);
    }
    for w in &f.condition_warnings {
        println!("warning: {w}");
    }

    let pred = blup(p, &data.z, &data.ya, &data.w)?;
    println!("coherence residual {:.2e}", pred.coherence_residual);
    let ci = pointwise_intervals(&pred, 0.95)?;
    for i in 0..3 {
        let idx = pred.yhat.index(i, 0);
        println!(
            "region {i}, t = 0: truth {:.3}, estimate {:.3}, 95% [{:.3}, {:.3}]",
            data.y_true.get(i, 0),
            pred.yhat.get(i, 0),
            ci[idx].lo,
            ci[idx].hi
        );
    }

    let m = empirical_metrics(&data.y_true, &pred.yhat, Chi2Mode::Squared)?;
    let th = theoretical_summary(p, &data.w, spec.t)?;
    println!("empirical: rmse {:.4}, mape {:.3}%, r2 {:.4}", m.rmse, m.mape, m.r2);
    println!("theoretical: rmse {:.4}, r2 {:.4}", th.rmse_disagg, th.r2_disagg);
    Ok(())
}

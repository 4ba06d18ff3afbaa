//! Impute gaps, reduce correlated covariates with PCA and select components.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use spatial_disagg::dataprep::{impute_linear, pca_fit, pca_transform, select_components, with_intercept};

fn main() -> spatial_disagg::Result<()> {
    let series = [None, Some(2.0), Some(2.4), None, None, Some(3.5), None];
    let filled = impute_linear(&series, "employment")?;
    println!("imputed series {:?}, filled {:?}", filled.values, filled.imputed);

    // two latent drivers behind five indicators
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let rows = 200;
    let x = DMatrix::from_fn(rows, 5, |r, c| {
        let a = (r as f64 * 0.11).sin();
        let b = (r as f64 * 0.037).cos();
        let signal = match c {
            0 | 1 => a,
            2 | 3 => b,
            _ => a - b,
        };
        signal + noise.sample(&mut rng)
    });
    let names: Vec<String> = ["gva", "jobs", "exports", "energy", "credit"].iter().map(|s| s.to_string()).collect();

    let model = pca_fit(&x, &names)?;
    println!("explained variance %: {:.3?}", model.explained_variance_pct);
    let m = select_components(&model, 95.0)?;
    println!("components needed for 95%: {m}");
    let scores = pca_transform(&model, &x, m)?;
    let z = with_intercept(&scores);
    println!("design matrix with intercept: {} x {}", z.nrows(), z.ncols());
    Ok(())
}

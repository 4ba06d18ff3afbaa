//! Build spatial weights three ways and check whether `rho` is identifiable.

use spatial_disagg::weights::{build_grid_adjacency, check_identifiability, from_edge_list, gower_weights, MixedRecord};

fn main() -> spatial_disagg::Result<()> {
    let grid = build_grid_adjacency(3)?;
    let report = check_identifiability(&grid);
    println!("3x3 queen grid, column sums {:?}", report.column_sums);
    println!("  identifiable: {}", report.passed);

    let square = build_grid_adjacency(2)?;
    let report = check_identifiability(&square);
    println!("2x2 queen grid identifiable: {}", report.passed);
    if let Some(w) = report.warning {
        println!("  {w}");
    }

    // a path with a chord
    let path = from_edge_list(5, &[(1, 2), (2, 3), (3, 4), (4, 5), (1, 3)])?;
    println!("edge list weights, row 1: {}", path.matrix().row(0));

    let num = |v: f64| Some(v);
    let cat = |s: &str| Some(s.to_string());
    let profiles = vec![
        MixedRecord { numeric: vec![num(1.2), num(30.0)], categorical: vec![cat("coast")] },
        MixedRecord { numeric: vec![num(0.4), num(55.0)], categorical: vec![cat("inland")] },
        MixedRecord { numeric: vec![num(2.9), None], categorical: vec![cat("coast")] },
        MixedRecord { numeric: vec![num(1.0), num(41.0)], categorical: vec![cat("inland")] },
    ];
    let gower = gower_weights(&profiles)?;
    println!("Gower dissimilarities:{}", gower.distances);
    println!("Gower weights:{}", gower.weights.matrix());
    Ok(())
}

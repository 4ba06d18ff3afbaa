//! Spatial weight matrices.
//!
//! Three construction paths are provided: queen contiguity on a square grid,
//! explicit adjacency (edge list or dense matrix), and similarity weights
//! derived from Gower dissimilarities over mixed numeric/categorical region
//! profiles. Every path ends in [`row_standardize`], so all weights share the
//! same invariants: zero diagonal, nonnegative entries, unit row sums.

use std::collections::BTreeSet;
use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{is_missing, open, parse_f64, read_dense_csv};

const COLUMN_SUM_TOL: f64 = 1e-9;

/// A row-standardized spatial weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpatialWeights {
    w: DMatrix<f64>,
    row_standardized: bool,
    column_sum_heterogeneous: bool,
}

impl SpatialWeights {
    /// Weights for a single region, which has no neighbours.
    ///
    /// The matrix is `[[0]]`; row standardization is vacuous. Useful for the
    /// degenerate `n = 1` case where the aggregate equals the only series.
    pub fn single_region() -> Self {
        SpatialWeights {
            w: DMatrix::zeros(1, 1),
            row_standardized: true,
            column_sum_heterogeneous: false,
        }
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn row_standardized(&self) -> bool {
        self.row_standardized
    }

    pub fn column_sum_heterogeneous(&self) -> bool {
        self.column_sum_heterogeneous
    }

    pub fn column_sums(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.w.column_iter().map(|c| c.sum()))
    }

    /// Indices `j` with a positive weight in row `i`.
    pub fn neighbours(&self, i: usize) -> Vec<usize> {
        (0..self.n()).filter(|&j| self.w[(i, j)] > 0.0).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_dense_csv(path, &self.w)
    }
}

fn heterogeneous_columns(w: &DMatrix<f64>) -> bool {
    let sums: Vec<f64> = w.column_iter().map(|c| c.sum()).collect();
    let (lo, hi) = sums
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    sums.len() > 1 && hi - lo > COLUMN_SUM_TOL
}

/// Scale each row of a nonnegative matrix to sum to one.
///
/// The diagonal is ignored and forced to zero.
pub fn row_standardize(raw: &DMatrix<f64>) -> Result<SpatialWeights> {
    let n = raw.nrows();
    if n == 0 || raw.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "weight matrix must be square and non-empty, got {}x{}",
            raw.nrows(),
            raw.ncols()
        )));
    }
    let mut w = raw.clone();
    for i in 0..n {
        w[(i, i)] = 0.0;
    }
    if let Some(bad) = w.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "weights must be finite and nonnegative, found {bad}"
        )));
    }
    for i in 0..n {
        let s: f64 = w.row(i).sum();
        if s <= 0.0 {
            return Err(Error::IsolatedRegion { index: i });
        }
        for j in 0..n {
            w[(i, j)] /= s;
        }
    }
    let column_sum_heterogeneous = heterogeneous_columns(&w);
    Ok(SpatialWeights {
        w,
        row_standardized: true,
        column_sum_heterogeneous,
    })
}

/// Raw 0/1 queen-contiguity adjacency of a `k x k` grid laid out row-major.
pub fn grid_adjacency_raw(k: usize) -> DMatrix<f64> {
    let n = k * k;
    let mut a = DMatrix::zeros(n, n);
    for r in 0..k {
        for c in 0..k {
            let i = r * k + c;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && cc >= 0 && rr < k as i64 && cc < k as i64 {
                        a[(i, rr as usize * k + cc as usize)] = 1.0;
                    }
                }
            }
        }
    }
    a
}

/// Row-standardized queen (8-neighbour) contiguity weights on a `k x k` grid.
pub fn build_grid_adjacency(k: usize) -> Result<SpatialWeights> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid side must be at least 2, got {k}"
        )));
    }
    row_standardize(&grid_adjacency_raw(k))
}

/// Result of the column-sum heterogeneity check.
#[derive(Debug, Clone, Serialize)]
pub struct IdentifiabilityReport {
    pub column_sums: Vec<f64>,
    pub passed: bool,
    pub warning: Option<String>,
}

/// Check that a row-standardized `W` has unequal column sums.
///
/// When every column sums to the same value, `1' (I - rho W)^{-1}` is
/// proportional to `1'` and `rho` cannot be separated from the regression
/// scale in the aggregated model. A failure is reported as a warning only.
pub fn check_identifiability(w: &SpatialWeights) -> IdentifiabilityReport {
    let column_sums: Vec<f64> = w.column_sums().iter().copied().collect();
    let passed = w.column_sum_heterogeneous();
    let warning = (!passed).then(|| {
        "all column sums of W are equal: rho is not identifiable from the aggregate \
         (estimation will proceed but rho-hat is arbitrary)"
            .to_string()
    });
    IdentifiabilityReport {
        column_sums,
        passed,
        warning,
    }
}

/// Build weights from an undirected edge list with 1-based region indices.
pub fn from_edge_list(n: usize, edges: &[(usize, usize)]) -> Result<SpatialWeights> {
    let mut a = DMatrix::zeros(n, n);
    for &(i, j) in edges {
        if i == 0 || j == 0 || i > n || j > n {
            return Err(Error::InvalidArgument(format!(
                "edge ({i},{j}) out of range for {n} regions (indices are 1-based)"
            )));
        }
        a[(i - 1, j - 1)] = 1.0;
        a[(j - 1, i - 1)] = 1.0;
    }
    row_standardize(&a)
}

/// Read an edge-list CSV (`i,j` per line, 1-based, optional header). The
/// region count is the largest index.
pub fn read_edge_list(path: &Path) -> Result<SpatialWeights> {
    let edges = read_edge_pairs(path)?;
    let n = edges.iter().map(|&(a, b)| a.max(b)).max().unwrap_or(0);
    from_edge_list(n, &edges)
}

/// Raw `(i, j)` pairs of an edge-list CSV.
pub fn read_edge_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let mut edges = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Parse(format!("{}:{}: expected i,j", path.display(), line + 1)));
        }
        let (a, b) = (rec[0].parse::<usize>(), rec[1].parse::<usize>());
        match (a, b) {
            (Ok(a), Ok(b)) => edges.push((a, b)),
            _ if line == 0 => continue, // header
            _ => {
                return Err(Error::Parse(format!(
                    "{}:{}: edge indices must be positive integers",
                    path.display(),
                    line + 1
                )))
            }
        }
    }
    Ok(edges)
}

/// Read a dense raw adjacency / weight matrix and row-standardize it.
pub fn read_dense(path: &Path) -> Result<SpatialWeights> {
    row_standardize(&read_dense_csv(path)?)
}

/// One region's profile for Gower dissimilarity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MixedRecord {
    pub numeric: Vec<Option<f64>>,
    pub categorical: Vec<Option<String>>,
}

/// Gower similarity weights together with the intermediate dissimilarities.
#[derive(Debug, Clone)]
pub struct GowerWeights {
    pub weights: SpatialWeights,
    pub distances: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// Pairwise Gower dissimilarities with equal variable weights.
///
/// Numeric variables contribute `|x_i - x_j| / range`, categorical variables
/// `0` when equal and `1` otherwise. Variables missing for either record are
/// left out of that pair's average. A numeric variable with zero range
/// contributes `0` and produces a warning.
pub fn gower_distances(records: &[MixedRecord]) -> Result<(DMatrix<f64>, Vec<String>)> {
    let n = records.len();
    let (p_num, p_cat) = match records.first() {
        Some(r) => (r.numeric.len(), r.categorical.len()),
        None => return Err(Error::InvalidArgument("no records".into())),
    };
    if records
        .iter()
        .any(|r| r.numeric.len() != p_num || r.categorical.len() != p_cat)
    {
        return Err(Error::DimensionMismatch(
            "all records must have the same variables".into(),
        ));
    }
    let mut warnings = Vec::new();
    let ranges: Vec<f64> = (0..p_num)
        .map(|v| {
            let vals: Vec<f64> = records.iter().filter_map(|r| r.numeric[v]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = if vals.is_empty() { 0.0 } else { hi - lo };
            if range <= 0.0 {
                let msg = format!("numeric variable {v} has zero range; it contributes 0");
                debug!("{msg}");
                warnings.push(msg);
            }
            range
        })
        .collect();

    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&records[i], &records[j]);
            let mut total = 0.0;
            let mut count = 0usize;
            for v in 0..p_num {
                if let (Some(x), Some(y)) = (a.numeric[v], b.numeric[v]) {
                    if ranges[v] > 0.0 {
                        total += (x - y).abs() / ranges[v];
                    }
                    count += 1;
                }
            }
            for v in 0..p_cat {
                if let (Some(x), Some(y)) = (&a.categorical[v], &b.categorical[v]) {
                    if x != y {
                        total += 1.0;
                    }
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::NoOverlap { i, j });
            }
            let dij = (total / count as f64).clamp(0.0, 1.0);
            d[(i, j)] = dij;
            d[(j, i)] = dij;
        }
    }
    Ok((d, warnings))
}

/// Row-standardized similarity weights `1 - d_ij` from Gower dissimilarities.
pub fn gower_weights(records: &[MixedRecord]) -> Result<GowerWeights> {
    if records.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "Gower weights need at least 3 regions, got {}",
            records.len()
        )));
    }
    let (distances, warnings) = gower_distances(records)?;
    let n = records.len();
    let sim = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 - distances[(i, j)] });
    let weights = row_standardize(&sim)?;
    Ok(GowerWeights {
        weights,
        distances,
        warnings,
    })
}

/// Read a Gower profile table.
///
/// The first column holds region labels; every other header must carry a
/// `num:` or `cat:` prefix declaring the variable type. Empty cells and `NA`
/// are missing.
pub fn read_gower_csv(path: &Path) -> Result<(Vec<String>, Vec<MixedRecord>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let headers = rdr.headers()?.clone();
    let mut kinds = Vec::new();
    for h in headers.iter().skip(1) {
        if h.starts_with("num:") {
            kinds.push(true);
        } else if h.starts_with("cat:") {
            kinds.push(false);
        } else {
            return Err(Error::Parse(format!(
                "column '{h}' lacks a num:/cat: type prefix"
            )));
        }
    }
    let mut labels = Vec::new();
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let label = rec[0].to_string();
        if !seen.insert(label.clone()) {
            return Err(Error::Parse(format!("duplicate region label '{label}'")));
        }
        let mut r = MixedRecord::default();
        for (c, &numeric) in kinds.iter().enumerate() {
            let field = rec.get(c + 1).unwrap_or("");
            if numeric {
                r.numeric.push(if is_missing(field) {
                    None
                } else {
                    Some(parse_f64(field, &format!("{}: region {label}", path.display()))?)
                });
            } else {
                r.categorical
                    .push((!is_missing(field)).then(|| field.to_string()));
            }
        }
        labels.push(label);
        records.push(r);
    }
    Ok((labels, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn num(vals: &[f64]) -> MixedRecord {
        MixedRecord {
            numeric: vals.iter().map(|&v| Some(v)).collect(),
            categorical: vec![],
        }
    }

    #[test]
    fn grid_neighbours_of_region_six_on_four_by_four() {
        let w = build_grid_adjacency(4).unwrap();
        // 1-based region 6 is index 5
        let nb: Vec<usize> = w.neighbours(5).iter().map(|j| j + 1).collect();
        assert_eq!(nb, vec![1, 2, 3, 5, 7, 9, 10, 11]);
    }

    #[test]
    fn two_by_two_corner() {
        let w = build_grid_adjacency(2).unwrap();
        assert_eq!(w.neighbours(0), vec![1, 2, 3]);
        for j in 1..4 {
            assert_abs_diff_eq!(w.matrix()[(0, j)], 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn three_by_three_centre_and_corners() {
        let w = build_grid_adjacency(3).unwrap();
        assert_eq!(w.neighbours(4).len(), 8);
        for j in w.neighbours(4) {
            assert_abs_diff_eq!(w.matrix()[(4, j)], 0.125, epsilon = 1e-15);
        }
        for corner in [0, 2, 6, 8] {
            let nb = w.neighbours(corner);
            assert_eq!(nb.len(), 3);
            for j in nb {
                assert_abs_diff_eq!(w.matrix()[(corner, j)], 1.0 / 3.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn grid_too_small() {
        assert!(matches!(build_grid_adjacency(1), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_grid_adjacency(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn standardize_two_by_two() {
        let raw = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 3.0, 0.0]);
        let w = row_standardize(&raw).unwrap();
        assert_eq!(w.matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn standardize_ignores_diagonal_and_flags_isolated_row() {
        let raw = DMatrix::from_row_slice(3, 3, &[5.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 7.0]);
        match row_standardize(&raw) {
            Err(Error::IsolatedRegion { index }) => assert_eq!(index, 2),
            other => panic!("expected isolated region, got {other:?}"),
        }
    }

    #[test]
    fn ring_of_four_is_half_and_fails_heterogeneity() {
        let w = from_edge_list(4, &[(1, 2), (2, 3), (3, 4), (4, 1)]).unwrap();
        for i in 0..4 {
            for j in w.neighbours(i) {
                assert_eq!(w.matrix()[(i, j)], 0.5);
            }
        }
        let rep = check_identifiability(&w);
        assert!(!rep.passed);
        assert!(rep.warning.is_some());
    }

    #[test]
    fn heterogeneity_on_grids() {
        assert!(check_identifiability(&build_grid_adjacency(3).unwrap()).passed);
        assert!(!check_identifiability(&build_grid_adjacency(2).unwrap()).passed);
    }

    #[test]
    fn gower_identical_and_extreme() {
        let (d, _) = gower_distances(&[num(&[0.3]), num(&[0.3])]).unwrap();
        assert_eq!(d[(0, 1)], 0.0);
        let (d, _) = gower_distances(&[num(&[0.0]), num(&[1.0])]).unwrap();
        assert_eq!(d[(0, 1)], 1.0);
    }

    #[test]
    fn gower_three_records() {
        let g = gower_weights(&[num(&[0.0]), num(&[0.5]), num(&[1.0])]).unwrap();
        assert_abs_diff_eq!(g.distances[(0, 1)], 0.5);
        assert_abs_diff_eq!(g.distances[(0, 2)], 1.0);
        assert_abs_diff_eq!(g.distances[(1, 2)], 0.5);
        let w = g.weights.matrix();
        assert_eq!(w.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
        assert_eq!(w.row(1).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn gower_mixed_missing_and_zero_range() {
        let recs = vec![
            MixedRecord {
                numeric: vec![Some(1.0), Some(5.0)],
                categorical: vec![Some("a".into())],
            },
            MixedRecord {
                numeric: vec![None, Some(5.0)],
                categorical: vec![Some("b".into())],
            },
            MixedRecord {
                numeric: vec![Some(3.0), Some(5.0)],
                categorical: vec![None],
            },
        ];
        let (d, warnings) = gower_distances(&recs).unwrap();
        assert_eq!(warnings.len(), 1);
        // pair (0,1): var0 missing, var1 zero range -> 0, cat differs -> 1; mean over 2
        assert_abs_diff_eq!(d[(0, 1)], 0.5);
        // pair (0,2): var0 |1-3|/2 = 1, var1 0, cat missing; mean over 2
        assert_abs_diff_eq!(d[(0, 2)], 0.5);
    }

    #[test]
    fn gower_no_overlap() {
        let recs = vec![
            MixedRecord { numeric: vec![Some(1.0), None], categorical: vec![] },
            MixedRecord { numeric: vec![None, Some(1.0)], categorical: vec![] },
            MixedRecord { numeric: vec![Some(1.0), Some(2.0)], categorical: vec![] },
        ];
        assert!(matches!(gower_distances(&recs), Err(Error::NoOverlap { i: 0, j: 1 })));
    }

    #[test]
    fn gower_needs_three_regions() {
        assert!(gower_weights(&[num(&[0.0]), num(&[1.0])]).is_err());
    }

    #[test]
    fn edge_list_out_of_range() {
        assert!(from_edge_list(3, &[(0, 1)]).is_err());
        assert!(from_edge_list(3, &[(1, 4)]).is_err());
    }
}

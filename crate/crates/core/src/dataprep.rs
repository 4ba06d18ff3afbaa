//! Panel ingestion, gap filling, standardization and PCA of covariates.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use log::info;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{is_missing, open, parse_f64, write_json};
use crate::model::StackedPanel;
use crate::predictor::Anchor;

/// Eigenvalues of the correlation matrix above this negative value are
/// treated as roundoff and set to zero.
const EIGEN_NEG_TOL: f64 = -1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedSeries {
    pub values: Vec<f64>,
    /// True where the value was filled in.
    pub imputed: Vec<bool>,
}

/// Fill gaps in one series: interior gaps by linear interpolation between
/// the surrounding observations, leading and trailing gaps by the nearest
/// observation. Needs at least two observed values.
pub fn impute_linear(series: &[Option<f64>], name: &str) -> Result<ImputedSeries> {
    let observed: Vec<usize> = (0..series.len()).filter(|&i| series[i].is_some()).collect();
    if observed.len() < 2 {
        return Err(Error::InsufficientData { series: name.to_string() });
    }
    let mut values = vec![0.0; series.len()];
    let mut imputed = vec![false; series.len()];
    let first = observed[0];
    let last = *observed.last().expect("at least two observations");
    for (i, v) in series.iter().enumerate() {
        match v {
            Some(x) => values[i] = *x,
            None => {
                imputed[i] = true;
                values[i] = if i < first {
                    series[first].unwrap()
                } else if i > last {
                    series[last].unwrap()
                } else {
                    let hi = observed.partition_point(|&o| o < i);
                    let (a, b) = (observed[hi - 1], observed[hi]);
                    let (ya, yb) = (series[a].unwrap(), series[b].unwrap());
                    ya + (yb - ya) * (i - a) as f64 / (b - a) as f64
                };
            }
        }
    }
    Ok(ImputedSeries { values, imputed })
}

/// Column means and sample standard deviations.
pub fn column_moments(x: &DMatrix<f64>, names: &[String]) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = x.nrows();
    if rows < 2 {
        return Err(Error::InvalidArgument("standardization needs at least two rows".into()));
    }
    let mut means = Vec::with_capacity(x.ncols());
    let mut sds = Vec::with_capacity(x.ncols());
    for (j, col) in x.column_iter().enumerate() {
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (rows - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            let column = names.get(j).cloned().unwrap_or_else(|| format!("#{}", j + 1));
            return Err(Error::ZeroVariance { column });
        }
        means.push(mean);
        sds.push(sd);
    }
    Ok((means, sds))
}

fn apply_standardization(x: &DMatrix<f64>, means: &[f64], sds: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - means[j]) / sds[j])
}

/// Pooled standardization of every column to mean 0 and sample sd 1.
pub fn standardize(x: &DMatrix<f64>, names: &[String]) -> Result<DMatrix<f64>> {
    let (means, sds) = column_moments(x, names)?;
    Ok(apply_standardization(x, &means, &sds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub variables: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Columns are components, ordered by decreasing eigenvalue.
    pub loadings: DMatrix<f64>,
    /// Eigenvalues of the sample correlation matrix; equal to the sample
    /// variances of the component scores on the fitting data.
    pub eigenvalues: Vec<f64>,
    pub explained_variance_pct: Vec<f64>,
    pub n_components_selected: usize,
}

impl PcaModel {
    pub fn component_sds(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|v| v.sqrt()).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let model: PcaModel = serde_json::from_reader(open(path)?)?;
        let k = model.variables.len();
        if model.loadings.shape() != (k, k) || model.means.len() != k || model.sds.len() != k {
            return Err(Error::Parse(format!("{}: inconsistent PCA model dimensions", path.display())));
        }
        Ok(model)
    }
}

/// Principal components of the correlation matrix of `x` (raw or already
/// standardized columns). Each component's largest-magnitude loading is made
/// positive. Selects components at the 95% cumulative threshold.
pub fn pca_fit(x: &DMatrix<f64>, names: &[String]) -> Result<PcaModel> {
    let k = x.ncols();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least two covariates, got {k}")));
    }
    if names.len() != k {
        return Err(Error::DimensionMismatch(format!("{} names for {k} columns", names.len())));
    }
    let (means, sds) = column_moments(x, names)?;
    let xs = apply_standardization(x, &means, &sds);
    let corr = xs.tr_mul(&xs) / (x.nrows() - 1) as f64;
    let eig = SymmetricEigen::new(corr);

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut eigenvalues = Vec::with_capacity(k);
    let mut loadings = DMatrix::zeros(k, k);
    for (c, &src) in order.iter().enumerate() {
        let mut ev = eig.eigenvalues[src];
        if ev < 0.0 {
            if ev < EIGEN_NEG_TOL {
                return Err(Error::NotPositiveDefinite(format!("correlation eigenvalue {ev:.3e}")));
            }
            ev = 0.0;
        }
        eigenvalues.push(ev);
        let mut col = eig.eigenvectors.column(src).into_owned();
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col = -col;
        }
        loadings.set_column(c, &col);
    }
    let total: f64 = eigenvalues.iter().sum();
    let explained_variance_pct: Vec<f64> = eigenvalues.iter().map(|v| v / total * 100.0).collect();
    let n_components_selected = select_from_percentages(&explained_variance_pct, 95.0)?;
    Ok(PcaModel {
        variables: names.to_vec(),
        means,
        sds,
        loadings,
        eigenvalues,
        explained_variance_pct,
        n_components_selected,
    })
}

/// Scores on the first `m` components.
pub fn pca_transform(model: &PcaModel, x: &DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
    let k = model.variables.len();
    if x.ncols() != k {
        return Err(Error::DimensionMismatch(format!(
            "PCA model has {k} variables but the data has {} columns",
            x.ncols()
        )));
    }
    if m == 0 || m > k {
        return Err(Error::InvalidArgument(format!("component count must be in 1..={k}, got {m}")));
    }
    let xs = apply_standardization(x, &model.means, &model.sds);
    Ok(xs * model.loadings.columns(0, m))
}

/// Smallest number of components reaching `threshold_pct` cumulative
/// explained variance.
pub fn select_components(model: &PcaModel, threshold_pct: f64) -> Result<usize> {
    select_from_percentages(&model.explained_variance_pct, threshold_pct)
}

/// [`select_components`] on a bare list of explained percentages. The list
/// is rescaled to sum to 100 first, so rounded percentages behave like
/// exact ones.
pub fn select_from_percentages(pct: &[f64], threshold_pct: f64) -> Result<usize> {
    if !(threshold_pct > 0.0 && threshold_pct <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be in (0, 100], got {threshold_pct}"
        )));
    }
    if pct.is_empty() {
        return Err(Error::InvalidArgument("no components".into()));
    }
    let total: f64 = pct.iter().sum();
    if !(total > 0.0) || pct.iter().any(|p| *p < 0.0) {
        return Err(Error::InvalidArgument("explained percentages must be nonnegative with a positive sum".into()));
    }
    let mut cum = 0.0;
    for (i, p) in pct.iter().enumerate() {
        cum += p / total * 100.0;
        if cum >= threshold_pct - 1e-9 {
            return Ok(i + 1);
        }
    }
    Ok(pct.len())
}

/// A region-by-period panel of covariates with its aggregate series.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    pub regions: Vec<String>,
    pub periods: Vec<String>,
    pub variables: Vec<String>,
    /// `nT x k`, row `t n + i`.
    pub covariates: DMatrix<f64>,
    /// Same shape as `covariates`; true where a value was imputed.
    pub imputed: Vec<Vec<bool>>,
    pub aggregate: DVector<f64>,
    pub anchors: Vec<Anchor>,
}

impl PanelDataset {
    pub fn n(&self) -> usize {
        self.regions.len()
    }

    pub fn periods_len(&self) -> usize {
        self.periods.len()
    }

    pub fn imputed_count(&self) -> usize {
        self.imputed.iter().flatten().filter(|b| **b).count()
    }

    /// Build from long records `(region, period, variable, value)`. Period
    /// order follows `aggregate`; region order follows first appearance.
    pub fn from_records(
        records: &[(String, String, String, Option<f64>)],
        aggregate: &[(String, f64)],
        anchors: &[(String, String, f64)],
    ) -> Result<Self> {
        let periods: Vec<String> = aggregate.iter().map(|(p, _)| p.clone()).collect();
        let period_idx = index_of(&periods, "aggregate period")?;
        let mut regions = Vec::new();
        let mut variables = Vec::new();
        for (r, _, v, _) in records {
            if !regions.contains(r) {
                regions.push(r.clone());
            }
            if !variables.contains(v) {
                variables.push(v.clone());
            }
        }
        if regions.is_empty() || variables.is_empty() {
            return Err(Error::Parse("panel file has no records".into()));
        }
        let region_idx = index_of(&regions, "region")?;
        let var_idx = index_of(&variables, "variable")?;
        let (n, t, k) = (regions.len(), periods.len(), variables.len());

        let mut raw: Vec<Vec<Option<f64>>> = vec![vec![None; n * t]; k];
        let mut seen = BTreeSet::new();
        for (r, p, v, val) in records {
            let ti = *period_idx
                .get(p)
                .ok_or_else(|| Error::Parse(format!("period '{p}' is not in the aggregate file")))?;
            let (ri, vi) = (region_idx[r], var_idx[v]);
            if !seen.insert((ri, ti, vi)) {
                return Err(Error::Parse(format!("duplicate record for ({r}, {p}, {v})")));
            }
            raw[vi][ti * n + ri] = *val;
        }

        let mut covariates = DMatrix::zeros(n * t, k);
        let mut imputed = vec![vec![false; k]; n * t];
        for vi in 0..k {
            for ri in 0..n {
                let series: Vec<Option<f64>> = (0..t).map(|ti| raw[vi][ti * n + ri]).collect();
                let name = format!("{}/{}", regions[ri], variables[vi]);
                let filled = impute_linear(&series, &name)?;
                for ti in 0..t {
                    covariates[(ti * n + ri, vi)] = filled.values[ti];
                    imputed[ti * n + ri][vi] = filled.imputed[ti];
                }
            }
        }

        let anchors = anchors
            .iter()
            .map(|(r, p, v)| {
                let ri = *region_idx
                    .get(r)
                    .ok_or_else(|| Error::Parse(format!("anchor region '{r}' is unknown")))?;
                let ti = *period_idx
                    .get(p)
                    .ok_or_else(|| Error::Parse(format!("anchor period '{p}' is unknown")))?;
                Ok(Anchor::new(ri, ti, *v))
            })
            .collect::<Result<Vec<_>>>()?;

        let out = PanelDataset {
            regions,
            periods,
            variables,
            covariates,
            imputed,
            aggregate: DVector::from_iterator(t, aggregate.iter().map(|(_, v)| *v)),
            anchors,
        };
        info!(
            "panel: {n} regions, {t} periods, {k} variables, {} imputed cells",
            out.imputed_count()
        );
        Ok(out)
    }

    /// Read the long panel CSV `region,period,variable,value`, the
    /// aggregate CSV `period,total` and optionally anchors
    /// `region,period,value`.
    pub fn read(panel: &Path, aggregate: &Path, anchors: Option<&Path>) -> Result<Self> {
        let mut records = Vec::new();
        for (line, rec) in read_rows(panel, &["region", "period", "variable", "value"])?.into_iter().enumerate() {
            let value = if is_missing(&rec[3]) {
                None
            } else {
                Some(parse_f64(&rec[3], &format!("{}: row {}", panel.display(), line + 2))?)
            };
            let [r, p, v, _] = rec;
            records.push((r, p, v, value));
        }
        let agg = read_rows(aggregate, &["period", "total"])?
            .into_iter()
            .enumerate()
            .map(|(line, [p, v])| Ok((p, parse_f64(&v, &format!("{}: row {}", aggregate.display(), line + 2))?)))
            .collect::<Result<Vec<_>>>()?;
        let anchors = match anchors {
            Some(path) => read_rows(path, &["region", "period", "value"])?
                .into_iter()
                .enumerate()
                .map(|(line, [r, p, v])| Ok((r, p, parse_f64(&v, &format!("{}: row {}", path.display(), line + 2))?)))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Self::from_records(&records, &agg, &anchors)
    }

    /// Intercept followed by the raw covariates.
    pub fn design(&self) -> DMatrix<f64> {
        with_intercept(&self.covariates)
    }
}

/// Read `region,period,value` rows into a full panel over the given labels.
pub fn read_panel_values(path: &Path, regions: &[String], periods: &[String]) -> Result<StackedPanel> {
    let region_idx = index_of(regions, "region")?;
    let period_idx = index_of(periods, "period")?;
    let (n, t) = (regions.len(), periods.len());
    let mut values = vec![None; n * t];
    for (line, [r, p, v]) in read_rows(path, &["region", "period", "value"])?.into_iter().enumerate() {
        let ctx = format!("{}: row {}", path.display(), line + 2);
        let ri = *region_idx.get(&r).ok_or_else(|| Error::Parse(format!("{ctx}: unknown region '{r}'")))?;
        let ti = *period_idx.get(&p).ok_or_else(|| Error::Parse(format!("{ctx}: unknown period '{p}'")))?;
        if values[ti * n + ri].replace(parse_f64(&v, &ctx)?).is_some() {
            return Err(Error::Parse(format!("{ctx}: duplicate cell ({r}, {p})")));
        }
    }
    let missing = values.iter().filter(|v| v.is_none()).count();
    if missing > 0 {
        return Err(Error::Parse(format!("{}: {missing} panel cells are missing", path.display())));
    }
    StackedPanel::new(DVector::from_iterator(n * t, values.into_iter().flatten()), n, t)
}

/// Prepend a column of ones.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(0, 1.0)
}

fn index_of(labels: &[String], what: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        if map.insert(l.clone(), i).is_some() {
            return Err(Error::Parse(format!("duplicate {what} '{l}'")));
        }
    }
    Ok(map)
}

/// Rows of a headed CSV whose header must be exactly `columns`.
fn read_rows<const N: usize>(path: &Path, columns: &[&str; N]) -> Result<Vec<[String; N]>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_lowercase()).collect();
    if header.len() != N || header.iter().zip(columns).any(|(h, c)| h != c) {
        return Err(Error::Parse(format!(
            "{}: expected columns {}, found {}",
            path.display(),
            columns.join(","),
            header.join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(std::array::from_fn(|j| rec.get(j).unwrap_or("").to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn imputation_examples() {
        let mid = impute_linear(&[Some(1.0), None, Some(3.0)], "a").unwrap();
        assert_eq!(mid.values, vec![1.0, 2.0, 3.0]);
        assert_eq!(mid.imputed, vec![false, true, false]);
        let ends = impute_linear(&[None, Some(2.0), Some(4.0), None], "b").unwrap();
        assert_eq!(ends.values, vec![2.0, 2.0, 4.0, 4.0]);
        let full = impute_linear(&[Some(5.0), Some(-1.0)], "c").unwrap();
        assert_eq!(full.values, vec![5.0, -1.0]);
        assert!(full.imputed.iter().all(|b| !b));
        let long = impute_linear(&[Some(0.0), None, None, None, Some(8.0)], "d").unwrap();
        assert_eq!(long.values, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        match impute_linear(&[None, Some(1.0), None], "region 3/gdp") {
            Err(Error::InsufficientData { series }) => assert_eq!(series, "region 3/gdp"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_column_is_rejected() {
        let x = DMatrix::from_fn(5, 2, |i, j| if j == 0 { i as f64 } else { 3.0 });
        match pca_fit(&x, &names(2)) {
            Err(Error::ZeroVariance { column }) => assert_eq!(column, "x1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn perfectly_correlated_pair() {
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { i as f64 } else { 2.0 * i as f64 + 1.0 });
        let m = pca_fit(&x, &names(2)).unwrap();
        assert_abs_diff_eq!(m.explained_variance_pct[0], 100.0, epsilon = 1e-9);
        assert_eq!(m.n_components_selected, 1);
    }

    fn random_matrix(rows: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = DMatrix::from_fn(rows, k, |_, _| rng.random::<f64>());
        // mix columns so they correlate
        let mix = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.3 * ((i + 2 * j) % 3) as f64 });
        base * mix
    }

    #[test]
    fn pca_structure() {
        let x = random_matrix(80, 6, 1);
        let m = pca_fit(&x, &names(6)).unwrap();
        assert_abs_diff_eq!(m.explained_variance_pct.iter().sum::<f64>(), 100.0, epsilon = 1e-9);
        for w in m.explained_variance_pct.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let gram = m.loadings.tr_mul(&m.loadings);
        assert_abs_diff_eq!(gram, DMatrix::identity(6, 6), epsilon = 1e-10);
        for c in 0..6 {
            let col = m.loadings.column(c);
            assert!(col[col.iamax()] > 0.0);
        }
    }

    #[test]
    fn scores_have_eigenvalue_variance_and_reconstruct() {
        let x = random_matrix(50, 4, 2);
        let m = pca_fit(&x, &names(4)).unwrap();
        let s = pca_transform(&m, &x, 4).unwrap();
        for c in 0..4 {
            let col = s.column(c);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 49.0;
            assert_abs_diff_eq!(var, m.eigenvalues[c], epsilon = 1e-10);
        }
        let recon = &s * m.loadings.transpose();
        let xs = standardize(&x, &names(4)).unwrap();
        assert_abs_diff_eq!(recon, xs, epsilon = 1e-8);
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(pca_transform(&m, &x.columns(0, 3).into_owned(), 2).is_err());
    }

    #[test]
    fn standardized_input_is_a_fixed_point() {
        let x = random_matrix(30, 3, 3);
        let xs = standardize(&x, &names(3)).unwrap();
        let again = standardize(&xs, &names(3)).unwrap();
        assert_abs_diff_eq!(xs, again, epsilon = 1e-12);
        let a = pca_fit(&x, &names(3)).unwrap();
        let b = pca_fit(&xs, &names(3)).unwrap();
        assert_abs_diff_eq!(a.loadings, b.loadings, epsilon = 1e-10);
    }

    #[test]
    fn selection_on_printed_spectrum() {
        let pct = [80.4, 11.7, 5.7, 1.7, 0.6, 0.2];
        assert_eq!(select_from_percentages(&pct, 95.0).unwrap(), 3);
        assert_eq!(select_from_percentages(&pct, 80.0).unwrap(), 1);
        assert_eq!(select_from_percentages(&pct, 100.0).unwrap(), 6);
        assert!(select_from_percentages(&pct, 0.0).is_err());
        assert!(select_from_percentages(&pct, 100.5).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let x = random_matrix(20, 3, 4);
        let m = pca_fit(&x, &names(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pca.json");
        m.write_json(&p).unwrap();
        let back = PcaModel::read_json(&p).unwrap();
        assert_eq!(back.variables, m.variables);
        assert_abs_diff_eq!(back.loadings, m.loadings, epsilon = 1e-15);
    }

    fn rec(r: &str, p: &str, v: &str, x: Option<f64>) -> (String, String, String, Option<f64>) {
        (r.into(), p.into(), v.into(), x)
    }

    #[test]
    fn panel_assembly_and_imputation() {
        let records = vec![
            rec("A", "2001", "gdp", Some(1.0)),
            rec("A", "2003", "gdp", Some(3.0)),
            rec("B", "2001", "gdp", Some(5.0)),
            rec("B", "2002", "gdp", None),
            rec("B", "2003", "gdp", Some(9.0)),
        ];
        let agg = vec![("2001".into(), 6.0), ("2002".into(), 8.0), ("2003".into(), 12.0)];
        let anchors = vec![("B".to_string(), "2002".to_string(), 7.5)];
        let d = PanelDataset::from_records(&records, &agg, &anchors).unwrap();
        assert_eq!(d.regions, vec!["A", "B"]);
        // rows are t n + i
        let col: Vec<f64> = d.covariates.column(0).iter().copied().collect();
        assert_eq!(col, vec![1.0, 5.0, 2.0, 7.0, 3.0, 9.0]);
        assert_eq!(d.imputed_count(), 2);
        assert_eq!(d.anchors, vec![Anchor::new(1, 1, 7.5)]);
        assert_eq!(d.design().ncols(), 2);

        let bad = vec![rec("A", "1999", "gdp", Some(1.0))];
        assert!(PanelDataset::from_records(&bad, &agg, &[]).is_err());
        let dup = vec![rec("A", "2001", "gdp", Some(1.0)), rec("A", "2001", "gdp", Some(2.0))];
        assert!(PanelDataset::from_records(&dup, &agg, &[]).is_err());
    }

    #[test]
    fn series_are_imputed_independently() {
        let mk = |b2: f64| {
            vec![
                rec("A", "1", "x", Some(1.0)),
                rec("A", "3", "x", Some(3.0)),
                rec("B", "1", "x", Some(0.0)),
                rec("B", "2", "x", Some(b2)),
                rec("B", "3", "x", Some(1.0)),
            ]
        };
        let agg = vec![("1".into(), 1.0), ("2".into(), 1.0), ("3".into(), 1.0)];
        let a = PanelDataset::from_records(&mk(0.5), &agg, &[]).unwrap();
        let b = PanelDataset::from_records(&mk(40.0), &agg, &[]).unwrap();
        for t in 0..3 {
            assert_eq!(a.covariates[(t * 2, 0)], b.covariates[(t * 2, 0)]);
        }
    }

    #[test]
    fn csv_reading() {
        let dir = tempfile::tempdir().unwrap();
        let panel = dir.path().join("panel.csv");
        let agg = dir.path().join("agg.csv");
        let anc = dir.path().join("anchors.csv");
        std::fs::write(&panel, "region,period,variable,value\nA,1,x,1\nA,2,x,NA\nA,3,x,3\nB,1,x,2\nB,2,x,4\nB,3,x,5\n").unwrap();
        std::fs::write(&agg, "period,total\n1,3\n2,6\n3,8\n").unwrap();
        std::fs::write(&anc, "region,period,value\nA,1,1.0\n").unwrap();
        let d = PanelDataset::read(&panel, &agg, Some(&anc)).unwrap();
        assert_eq!(d.covariates[(2, 0)], 2.0);
        assert_eq!(d.aggregate.as_slice(), &[3.0, 6.0, 8.0]);
        assert_eq!(d.anchors.len(), 1);
        std::fs::write(&agg, "when,total\n1,3\n").unwrap();
        assert!(matches!(PanelDataset::read(&panel, &agg, None), Err(Error::Parse(_))));
    }
}

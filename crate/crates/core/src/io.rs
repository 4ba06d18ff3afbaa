//! Small CSV helpers shared by the file-facing parts of the crate.
//!
//! Every real number written by this crate goes through [`fmt_sig`], which
//! rounds to 15 significant digits and prints the shortest decimal that
//! round-trips the rounded value. Outputs are therefore byte-stable across
//! platforms for identical inputs.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SIGNIFICANT_DIGITS: usize = 15;

/// Open a file for reading, keeping the path in the error.
pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| Error::Open {
        path: path.display().to_string(),
        source,
    })
}

/// Format `x` with 15 significant digits, in exponent form outside
/// `[1e-5, 1e15)`.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "NaN".to_string()
        } else if x > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        };
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let rounded: f64 = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .expect("formatted float parses");
    let mag = rounded.abs();
    if (1e-5..1e15).contains(&mag) {
        format!("{rounded}")
    } else {
        format!("{rounded:e}")
    }
}

pub fn parse_f64(field: &str, context: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("{context}: cannot parse '{field}' as a number")))
}

/// Missing markers accepted in value columns.
pub fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "na" | "NaN" | "nan" | "null" | ".")
}

pub fn write_dense_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_sig(m[(i, j)])).collect();
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a headerless dense numeric CSV into a matrix.
pub fn read_dense_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, f)| parse_f64(f, &format!("{}:{}:{}", path.display(), r + 1, c + 1)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: empty matrix", path.display())));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse(format!("{}: ragged rows", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut buf = Vec::new();
    open(path)?.read_to_end(&mut buf)?;
    Ok(bytes_digest(&buf))
}

pub fn bytes_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

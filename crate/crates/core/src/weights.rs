//! Reading, writing and normalizing spatial weight matrices.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{with_file, Error, Result};

/// On-disk layout of a weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFormat {
    /// `d` rows of `d` comma-separated values.
    #[default]
    DenseCsv,
    /// `i,j,w` rows with one-based indices; absent entries are zero.
    TripletCsv,
}

/// Divide each row whose absolute sum exceeds one by that sum.
///
/// Rows already summing to at most one are left alone, so a row of zeros
/// (an isolated unit) stays zero.
pub fn row_normalize(w: &mut DMatrix<f64>) {
    for mut row in w.row_iter_mut() {
        let sum: f64 = row.iter().map(|v| v.abs()).sum();
        if sum > 1.0 {
            row /= sum;
        }
    }
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
}

fn parse_value(field: &str, line: u64) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("not a number: {field:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("non-finite value {field:?}") });
    }
    Ok(v)
}

fn parse_index(field: &str, d: usize, line: u64) -> Result<usize> {
    let i: usize = field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("not an index: {field:?}"),
    })?;
    if i == 0 || i > d {
        return Err(Error::Parse {
            line,
            message: format!("index {i} outside 1..={d}"),
        });
    }
    Ok(i - 1)
}

fn line_of(record: &csv::StringRecord, fallback: u64) -> u64 {
    record.position().map_or(fallback, |p| p.line())
}

fn zero_diagonal(w: &mut DMatrix<f64>) {
    let d = w.nrows();
    if (0..d).any(|i| w[(i, i)] != 0.0) {
        warn!("weight matrix has a nonzero diagonal; setting it to zero");
        w.fill_diagonal(0.0);
    }
}

/// Parse a weight matrix from text.
///
/// `d` is required for triplets and checked against dense input when given.
pub fn parse_weights(text: &str, format: WeightFormat, d: Option<usize>) -> Result<DMatrix<f64>> {
    let mut w = match format {
        WeightFormat::DenseCsv => parse_dense(text, d)?,
        WeightFormat::TripletCsv => {
            let d = d.ok_or_else(|| Error::Config("triplet weights need the dimension d".into()))?;
            parse_triplets(text, d)?
        }
    };
    zero_diagonal(&mut w);
    Ok(w)
}

fn parse_dense(text: &str, d: Option<usize>) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, record) in reader(text).records().enumerate() {
        let record = record?;
        let line = line_of(&record, n as u64 + 1);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let row = record
            .iter()
            .map(|f| parse_value(f, line))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("row has {} values, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::Parse { line: 1, message: "empty weight matrix".into() });
    }
    if rows[0].len() != n {
        return Err(Error::Parse {
            line: 1,
            message: format!("matrix is {n}x{}, not square", rows[0].len()),
        });
    }
    if let Some(d) = d {
        if d != n {
            return Err(Error::Dimension(format!("weight matrix is {n}x{n}, expected d = {d}")));
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, k| rows[i][k]))
}

fn parse_triplets(text: &str, d: usize) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Err(Error::Config("d must be positive".into()));
    }
    let mut w = DMatrix::zeros(d, d);
    let mut seen = std::collections::HashSet::new();
    for (n, record) in reader(text).records().enumerate() {
        let record = record?;
        let line = line_of(&record, n as u64 + 1);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected i,j,w but found {} fields", record.len()),
            });
        }
        let i = parse_index(&record[0], d, line)?;
        let k = parse_index(&record[1], d, line)?;
        let v = parse_value(&record[2], line)?;
        if !seen.insert((i, k)) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate entry ({}, {})", i + 1, k + 1),
            });
        }
        w[(i, k)] = v;
    }
    Ok(w)
}

/// Load a weight matrix from disk, optionally row normalizing it.
pub fn load_weights(
    path: &Path,
    format: WeightFormat,
    d: Option<usize>,
    normalize: bool,
) -> Result<DMatrix<f64>> {
    let mut w = with_file(path, |text| parse_weights(text, format, d))?;
    if normalize {
        row_normalize(&mut w);
    }
    Ok(w)
}

/// Dense CSV with shortest round-trip formatting.
pub fn format_dense(w: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in w.row_iter() {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn save_weights(path: &Path, w: &DMatrix<f64>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(format_dense(w).as_bytes())?;
    Ok(())
}

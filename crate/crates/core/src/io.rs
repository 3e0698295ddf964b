//! Panel and series CSV files.
//!
//! A panel file is long format with header `t,unit,y,x1..xr[,u1..us]`, one
//! row per `(t, unit)` sorted by period then unit, both one-based. A series
//! file has header `t,name1,..` and one row per period. Numbers are written
//! in shortest round-trip form, so a write followed by a read is bit-exact.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{with_file, Error, Result};
use crate::model::{BasisBlock, DynamicBasis, PanelData};

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn number(field: &str, column: &str, line: u64) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| parse_err(line, format!("column {column}: not a number: {field:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("column {column}: non-finite value {field:?}")));
    }
    Ok(v)
}

fn index(field: &str, column: &str, line: u64) -> Result<usize> {
    match field.parse::<usize>() {
        Ok(i) if i >= 1 => Ok(i),
        _ => Err(parse_err(line, format!("column {column}: expected a positive integer, found {field:?}"))),
    }
}

/// Count of consecutive headers `prefix1, prefix2, ..` starting at `from`.
fn numbered(headers: &csv::StringRecord, from: usize, prefix: &str) -> Result<usize> {
    let mut n = 0;
    while let Some(h) = headers.get(from + n) {
        if h != format!("{prefix}{}", n + 1) {
            if h.starts_with(prefix) && h[prefix.len()..].parse::<usize>().is_ok() {
                return Err(parse_err(1, format!("header {h:?} out of order, expected {prefix}{}", n + 1)));
            }
            break;
        }
        n += 1;
    }
    Ok(n)
}

/// Parse a long-format panel.
pub fn parse_panel_str(text: &str) -> Result<PanelData> {
    let mut rdr = reader(text);
    let headers = rdr.headers()?.clone();
    let head: Vec<&str> = headers.iter().take(3).collect();
    if head != ["t", "unit", "y"] {
        return Err(parse_err(1, format!("header must start with t,unit,y; found {head:?}")));
    }
    let r = numbered(&headers, 3, "x")?;
    if r == 0 {
        return Err(parse_err(1, "panel needs at least one covariate column x1"));
    }
    let s = numbered(&headers, 3 + r, "u")?;
    let width = 3 + r + s;
    if headers.len() != width {
        return Err(parse_err(1, format!("unexpected column {:?}", &headers[width])));
    }
    let names: Vec<String> = headers.iter().map(str::to_string).collect();

    let mut rows: Vec<(u64, usize, usize, Vec<f64>)> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != width {
            return Err(parse_err(line, format!("{} fields, expected {width}", record.len())));
        }
        let t = index(&record[0], "t", line)?;
        let unit = index(&record[1], "unit", line)?;
        let values = (2..width)
            .map(|c| number(&record[c], &names[c], line))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, t, unit, values));
    }
    if rows.is_empty() {
        return Err(parse_err(2, "panel has no rows"));
    }
    let d = rows.iter().take_while(|row| row.1 == 1).count();
    if d == 0 || !rows.len().is_multiple_of(d) {
        return Err(parse_err(rows[0].0, "panel is not balanced"));
    }
    let t_len = rows.len() / d;
    for (n, (line, t, unit, _)) in rows.iter().enumerate() {
        let (want_t, want_unit) = (n / d + 1, n % d + 1);
        if (*t, *unit) != (want_t, want_unit) {
            return Err(parse_err(
                *line,
                format!("found (t, unit) = ({t}, {unit}), expected ({want_t}, {want_unit}); rows must be sorted and balanced"),
            ));
        }
    }
    let mut y = DMatrix::zeros(d, t_len);
    let mut x = vec![DMatrix::zeros(d, r); t_len];
    let mut u = vec![DMatrix::zeros(d, s); t_len];
    for (n, (_, _, _, v)) in rows.iter().enumerate() {
        let (t, i) = (n / d, n % d);
        y[(i, t)] = v[0];
        for c in 0..r {
            x[t][(i, c)] = v[1 + c];
        }
        for c in 0..s {
            u[t][(i, c)] = v[1 + r + c];
        }
    }
    PanelData::new(y, x, (s > 0).then_some(u))
}

pub fn read_panel(path: &Path) -> Result<PanelData> {
    with_file(path, parse_panel_str)
}

pub fn format_panel(data: &PanelData) -> String {
    let (d, r) = (data.d(), data.r());
    let s = data.u.as_ref().map_or(0, |u| u[0].ncols());
    let mut header = vec!["t".to_string(), "unit".into(), "y".into()];
    header.extend((1..=r).map(|c| format!("x{c}")));
    header.extend((1..=s).map(|c| format!("u{c}")));
    let mut out = header.join(",");
    out.push('\n');
    for t in 0..data.t_len() {
        for i in 0..d {
            let mut fields = vec![(t + 1).to_string(), (i + 1).to_string(), data.y[(i, t)].to_string()];
            fields.extend((0..r).map(|c| data.x[t][(i, c)].to_string()));
            if let Some(u) = &data.u {
                fields.extend((0..s).map(|c| u[t][(i, c)].to_string()));
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
    }
    out
}

pub fn write_panel(path: &Path, data: &PanelData) -> Result<()> {
    Ok(fs::write(path, format_panel(data))?)
}

/// Named columns indexed by period.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub names: Vec<String>,
    /// One entry per name, each of length `T`.
    pub columns: Vec<Vec<f64>>,
}

impl SeriesTable {
    pub fn t_len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|k| self.columns[k].as_slice())
    }
}

/// Parse a `t,name..` file with periods `1..=T` in order.
pub fn parse_series_str(text: &str) -> Result<SeriesTable> {
    let mut rdr = reader(text);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("t") {
        return Err(parse_err(1, "first column must be t"));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if names.is_empty() {
        return Err(parse_err(1, "no series columns"));
    }
    for (k, name) in names.iter().enumerate() {
        if name.is_empty() || names[..k].contains(name) {
            return Err(parse_err(1, format!("empty or repeated column name {name:?}")));
        }
    }
    let mut columns = vec![Vec::new(); names.len()];
    let mut expected = 1;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != names.len() + 1 {
            return Err(parse_err(line, format!("{} fields, expected {}", record.len(), names.len() + 1)));
        }
        let t = index(&record[0], "t", line)?;
        if t != expected {
            return Err(parse_err(line, format!("period {t}, expected {expected}")));
        }
        for (k, col) in columns.iter_mut().enumerate() {
            col.push(number(&record[k + 1], &names[k], line)?);
        }
        expected += 1;
    }
    if expected == 1 {
        return Err(parse_err(2, "series file has no rows"));
    }
    Ok(SeriesTable { names, columns })
}

pub fn read_series(path: &Path) -> Result<SeriesTable> {
    with_file(path, parse_series_str)
}

pub fn format_series(table: &SeriesTable) -> String {
    let mut out = format!("t,{}\n", table.names.join(","));
    for t in 0..table.t_len() {
        out.push_str(&(t + 1).to_string());
        for col in &table.columns {
            out.push(',');
            out.push_str(&col[t].to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_series(path: &Path, table: &SeriesTable) -> Result<()> {
    Ok(fs::write(path, format_series(table))?)
}

fn basis_column(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("z_")?;
    let (j, k) = rest.split_once('_')?;
    match (j.parse::<usize>().ok()?, k.parse::<usize>().ok()?) {
        (j, k) if j >= 1 && k >= 1 => Some((j, k)),
        _ => None,
    }
}

/// Build a basis from columns named `z_j_k` (one-based matrix `j`, term `k`).
///
/// Terms of each matrix must run `1..=l_j` without gaps; a matrix with no
/// columns gets only its constant. `constants[j]` says whether matrix `j`
/// carries the constant term.
pub fn basis_from_series(table: &SeriesTable, constants: &[bool]) -> Result<DynamicBasis> {
    let p = constants.len();
    let mut series: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); p];
    for (name, col) in table.names.iter().zip(&table.columns) {
        let (j, k) = basis_column(name)
            .ok_or_else(|| parse_err(1, format!("basis column {name:?} is not of the form z_j_k")))?;
        if j > p {
            return Err(parse_err(1, format!("basis column {name} refers to matrix {j} of {p}")));
        }
        series[j - 1].push((k, col.clone()));
    }
    let mut blocks = Vec::with_capacity(p);
    for (j, mut terms) in series.into_iter().enumerate() {
        terms.sort_by_key(|(k, _)| *k);
        for (n, (k, _)) in terms.iter().enumerate() {
            if *k != n + 1 {
                return Err(parse_err(1, format!("matrix {} has terms {:?}; expected 1..", j + 1, terms.iter().map(|t| t.0).collect::<Vec<_>>())));
            }
        }
        blocks.push(BasisBlock { constant: constants[j], series: terms.into_iter().map(|t| t.1).collect() });
    }
    DynamicBasis::new(table.t_len(), blocks)
}

/// The non-constant columns of a basis as a series table.
pub fn basis_to_series(basis: &DynamicBasis) -> SeriesTable {
    let mut names = Vec::new();
    let mut columns = Vec::new();
    for (j, block) in basis.blocks().iter().enumerate() {
        for (k, s) in block.series.iter().enumerate() {
            names.push(format!("z_{}_{}", j + 1, k + 1));
            columns.push(s.clone());
        }
    }
    SeriesTable { names, columns }
}

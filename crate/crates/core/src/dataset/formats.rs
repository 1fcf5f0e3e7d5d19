//! Plain-text file formats: ROI tables, single-column traces, `t,value` series.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::SampledSeries;

/// Column-named numeric table, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: usize,
    pub values: Vec<f64>,
}

impl Table {
    pub fn column(&self, j: usize) -> Vec<f64> {
        let c = self.columns.len();
        (0..self.rows).map(|i| self.values[i * c + j]).collect()
    }

    pub fn from_columns(columns: Vec<String>, data: &[Vec<f64>]) -> Result<Self> {
        let rows = data.first().map_or(0, Vec::len);
        if columns.len() != data.len() || data.iter().any(|c| c.len() != rows) {
            return Err(Error::invalid("table columns must share one length"));
        }
        let mut values = Vec::with_capacity(rows * columns.len());
        for i in 0..rows {
            values.extend(data.iter().map(|c| c[i]));
        }
        Ok(Self {
            columns,
            rows,
            values,
        })
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_number(path: &Path, line: usize, column: &str, field: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| {
        Error::parse(
            path,
            format!("line {line}, column '{column}': cannot parse '{field}' as a number"),
        )
    })?;
    if !v.is_finite() {
        return Err(Error::parse(
            path,
            format!("line {line}, column '{column}': non-finite value"),
        ));
    }
    Ok(v)
}

/// Reads a CSV whose first row names the columns. Rows must be rectangular
/// and every field a finite number.
pub fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if columns.is_empty() || columns.iter().all(String::is_empty) {
        return Err(Error::parse(path, "missing header row"));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
        if record.len() != columns.len() {
            return Err(Error::parse(
                path,
                format!(
                    "line {line}: ragged row with {} fields, header has {}",
                    record.len(),
                    columns.len()
                ),
            ));
        }
        for (field, name) in record.iter().zip(&columns) {
            values.push(parse_number(path, line, name, field)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::parse(path, "table has no data rows"));
    }
    Ok(Table {
        columns,
        rows,
        values,
    })
}

/// Writes `table` with full round-trip precision.
pub fn write_table(path: &Path, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let io = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(&table.columns).map_err(io)?;
    let c = table.columns.len();
    for row in table.values.chunks(c) {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One number per line; blank lines are ignored.
pub fn read_column(path: &Path) -> Result<Vec<f64>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_number(path, i + 1, "value", line)?);
    }
    if out.is_empty() {
        return Err(Error::parse(path, "file contains no samples"));
    }
    Ok(out)
}

pub fn write_column(path: &Path, values: &[f64]) -> Result<()> {
    let mut text = String::with_capacity(values.len() * 12);
    for v in values {
        text.push_str(&format!("{v:.9}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a `t,value` series; the sampling interval is taken from the span of
/// the time column and every step must agree with it.
pub fn read_series(path: &Path) -> Result<SampledSeries<f64>> {
    let table = read_table(path)?;
    if table.columns != ["t", "value"] {
        return Err(Error::parse(
            path,
            format!(
                "expected header 't,value', found '{}'",
                table.columns.join(",")
            ),
        ));
    }
    let t = table.column(0);
    if t.len() < 2 {
        return Err(Error::parse(path, "series needs at least 2 samples"));
    }
    let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    // Times are stored at microsecond precision.
    let tol = 2e-6 + 1e-9 * dt;
    if let Some(i) = t.windows(2).position(|w| ((w[1] - w[0]) - dt).abs() > tol) {
        return Err(Error::parse(
            path,
            format!("non-uniform sampling at line {}", i + 3),
        ));
    }
    SampledSeries::with_origin(table.column(1), dt, t[0])
        .map_err(|e| Error::parse(path, e.to_string()))
}

/// Writes `t,value` with t at 6 decimals and values at 9 significant digits.
pub fn write_series(path: &Path, series: &SampledSeries<f64>) -> Result<()> {
    let mut text = String::from("t,value\n");
    for (i, v) in series.values.iter().enumerate() {
        text.push_str(&format!("{:.6},{:.8e}\n", series.time(i), v));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

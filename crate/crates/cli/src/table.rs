//! Numeric tables and their CSV form.
//!
//! Cells are written with Rust's shortest round-trip formatting, so reading
//! a file back yields the same bits and rewriting it yields the same bytes.

use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        let i = self.column_index(name)?;
        self.rows.last().map(|r| r[i])
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|x| format_cell(*x)))?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let columns: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != columns.len() {
                bail!("{}: row width {} != {}", path.display(), rec.len(), columns.len());
            }
            rows.push(rec.iter().map(parse_cell).collect::<Result<_>>()?);
        }
        Ok(Self { columns, rows })
    }
}

pub fn format_cell(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x}")
    }
}

fn parse_cell(s: &str) -> Result<f64> {
    s.parse::<f64>().with_context(|| format!("bad number `{s}`"))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Stats {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Values that entered the statistics (NaN entries are skipped).
    pub count: usize,
}

impl Stats {
    /// Population statistics over the non-NaN entries of `xs`, summed in order.
    pub fn of(xs: &[f64]) -> Self {
        let vals: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
        if vals.is_empty() {
            return Self {
                mean: None,
                std: None,
                min: None,
                max: None,
                count: 0,
            };
        }
        let (mean, std) = gio_core::numeric::mean_std(&vals);
        Self {
            mean: Some(mean),
            std: Some(std),
            min: Some(vals.iter().copied().fold(f64::INFINITY, f64::min)),
            max: Some(vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            count: vals.len(),
        }
    }
}

/// NaN becomes `null` so the JSON stays valid and round-trips.
pub fn nullable(xs: &[f64]) -> Vec<Option<f64>> {
    xs.iter().map(|x| (!x.is_nan()).then_some(*x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![0.1 + 0.2, f64::NAN]);
        t.push(vec![-1e-300, 12345.678901234567]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        t.write_csv(&p).unwrap();
        let back = Table::read_csv(&p).unwrap();
        assert_eq!(back.columns, t.columns);
        for (x, y) in back.rows.iter().flatten().zip(t.rows.iter().flatten()) {
            assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
        }
        assert_eq!(back.to_csv_string().unwrap(), t.to_csv_string().unwrap());
    }

    #[test]
    fn stats_skip_nan() {
        let s = Stats::of(&[1.0, f64::NAN, 3.0]);
        assert_eq!(s.count, 2);
        assert_eq!(s.mean, Some(2.0));
        assert_eq!(s.std, Some(1.0));
        assert_eq!((s.min, s.max), (Some(1.0), Some(3.0)));
        assert_eq!(Stats::of(&[f64::NAN]).mean, None);
    }
}

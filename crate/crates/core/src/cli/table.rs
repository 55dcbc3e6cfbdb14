//! Comma-delimited metric tables and their mean ± standard error summaries.

use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::numeric::mean_and_standard_error;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid(format!("no column '{name}'")))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_error)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_error)?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()).map_err(csv_error))
            .collect::<Result<Vec<Vec<String>>>>()?;
        Ok(Self { header, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    invalid(format!("csv: {e}"))
}

pub fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub table: Table,
    pub warnings: Vec<String>,
}

/// Groups `table` by `keys` (in first-seen order) and summarises `value`
/// per group as `n, mean, standard_error`. A single-row group has an empty
/// error field and produces a warning.
pub fn emit_plot_data(table: &Table, keys: &[&str], value: &str) -> Result<PlotData> {
    let key_idx = keys.iter().map(|k| table.column(k)).collect::<Result<Vec<_>>>()?;
    let v_idx = table.column(value)?;
    let mut groups: Vec<(Vec<String>, Vec<f64>)> = Vec::new();
    for row in &table.rows {
        let key: Vec<String> = key_idx.iter().map(|i| row[*i].clone()).collect();
        let v: f64 = row[v_idx]
            .parse()
            .map_err(|_| invalid(format!("column '{value}' holds non-numeric '{}'", row[v_idx])))?;
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, vs)) => vs.push(v),
            None => groups.push((key, vec![v])),
        }
    }
    let mut header: Vec<&str> = keys.to_vec();
    header.extend(["n", "mean", "standard_error"]);
    let mut out = Table::new(&header);
    let mut warnings = Vec::new();
    for (key, vs) in groups {
        let (mean, se) = mean_and_standard_error(&vs);
        if se.is_none() {
            warnings.push(format!("{} = {}: single seed, no standard error", keys.join("/"), key.join("/")));
        }
        let mut row = key;
        row.extend([vs.len().to_string(), fmt(mean), fmt_opt(se)]);
        out.push(row);
    }
    Ok(PlotData { table: out, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(values: &[(&str, f64)]) -> Table {
        let mut t = Table::new(&["condition", "seed", "accuracy"]);
        for (i, (c, v)) in values.iter().enumerate() {
            t.push(vec![c.to_string(), i.to_string(), fmt(*v)]);
        }
        t
    }

    #[test]
    fn ten_seed_summary() {
        let vals: Vec<f64> = (0..10).map(|i| 0.5 + 0.01 * i as f64).collect();
        let t = table(&vals.iter().map(|v| ("a", *v)).collect::<Vec<_>>());
        let p = emit_plot_data(&t, &["condition"], "accuracy").unwrap();
        let mean: f64 = vals.iter().sum::<f64>() / 10.0;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
        let row = &p.table.rows[0];
        assert_eq!(row[1], "10");
        assert!((row[2].parse::<f64>().unwrap() - mean).abs() < 1e-12);
        assert!((row[3].parse::<f64>().unwrap() - sd / 10f64.sqrt()).abs() < 1e-12);
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn constant_series_has_zero_error() {
        let t = table(&[("a", 0.7), ("a", 0.7), ("a", 0.7)]);
        let p = emit_plot_data(&t, &["condition"], "accuracy").unwrap();
        assert_eq!(p.table.rows[0][3].parse::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn single_seed_warns_with_empty_error() {
        let t = table(&[("a", 0.7), ("b", 0.1), ("b", 0.3)]);
        let p = emit_plot_data(&t, &["condition"], "accuracy").unwrap();
        assert_eq!(p.table.rows[0][3], "");
        assert_eq!(p.warnings.len(), 1);
        assert_eq!(p.table.rows[1][0], "b");
    }

    #[test]
    fn csv_round_trip() {
        let t = table(&[("a", 0.25), ("b", -1e-9)]);
        assert_eq!(Table::from_csv(&t.to_csv().unwrap()).unwrap(), t);
    }
}

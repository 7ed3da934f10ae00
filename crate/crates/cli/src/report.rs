//! Tabular command output: CSV, JSON mirror and an aligned text table.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub config_hash: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Key/value lines shown under the table and kept in the JSON mirror.
    pub summary: Vec<(String, String)>,
}

impl Report {
    pub fn new(config_hash: String, columns: &[&str]) -> Self {
        Self {
            config_hash,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            summary: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn note(&mut self, key: &str, value: impl Into<String>) {
        self.summary.push((key.to_string(), value.into()));
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# config-hash: {}\n", self.config_hash);
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|c| csv_cell(c)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        let summary: serde_json::Map<String, serde_json::Value> = self
            .summary
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect();
        let value = serde_json::json!({
            "config_hash": self.config_hash,
            "columns": self.columns,
            "rows": self.rows,
            "summary": summary,
        });
        serde_json::to_string_pretty(&value).expect("report serializes") + "\n"
    }

    pub fn to_table(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(String::len).collect();
        for row in &self.rows {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect();
            padded.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&self.columns);
        for row in &self.rows {
            out.push_str(&line(row));
        }
        let key_width = self.summary.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in &self.summary {
            out.push_str(&format!("{k:<key_width$}  {v}\n"));
        }
        out
    }

    /// Writes the table to stdout and the CSV/JSON forms where requested.
    pub fn emit(&self, csv: Option<&Path>, json: Option<&Path>) -> std::io::Result<()> {
        let stdout = std::io::stdout();
        let mut stdout = stdout.lock();
        let mut table_on_stdout = true;
        for (path, body) in [(csv, self.to_csv()), (json, self.to_json())] {
            match path {
                Some(p) if p == Path::new("-") => {
                    stdout.write_all(body.as_bytes())?;
                    table_on_stdout = false;
                }
                Some(p) => std::fs::write(p, body)?,
                None => {}
            }
        }
        if table_on_stdout {
            stdout.write_all(self.to_table().as_bytes())?;
        }
        Ok(())
    }
}

fn csv_cell(c: &str) -> String {
    if c.contains([',', '"', '\n']) {
        format!("\"{}\"", c.replace('"', "\"\""))
    } else {
        c.to_string()
    }
}

/// Fixed-precision float formatting so CSV bytes are stable.
pub fn num(v: f64) -> String {
    format!("{v:.6}")
}

//! Per-molecule property sidecar: a CSV whose first column is `name`
//! (matching the XYZ comment line) followed by one column per property.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sidecar {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl Sidecar {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).with_context(|| path.display().to_string())?;
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("name") {
            bail!("{}: first column must be `name`", path.display());
        }
        let columns: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.with_context(|| format!("{}: record {}", path.display(), i + 1))?;
            let values = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| anyhow!("{}: line {}: non-numeric property", path.display(), i + 2))?;
            rows.push((rec[0].to_string(), values));
        }
        Ok(Self { columns, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
        w.write_record(std::iter::once("name").chain(self.columns.iter().map(String::as_str)))?;
        for (name, values) in &self.rows {
            w.write_record(std::iter::once(name.clone()).chain(values.iter().map(|v| v.to_string())))?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per entry of `names`, restricted to `properties` in that order.
    pub fn select(&self, names: &[String], properties: &[String]) -> Result<Vec<Vec<f64>>> {
        let cols = properties
            .iter()
            .map(|p| self.columns.iter().position(|c| c == p).ok_or_else(|| anyhow!("sidecar has no column {p:?}")))
            .collect::<Result<Vec<_>>>()?;
        let by_name: HashMap<&str, &Vec<f64>> = self.rows.iter().map(|(n, v)| (n.as_str(), v)).collect();
        names
            .iter()
            .map(|n| {
                let row = by_name.get(n.as_str()).ok_or_else(|| anyhow!("sidecar has no row for molecule {n:?}"))?;
                Ok(cols.iter().map(|&c| row[c]).collect())
            })
            .collect()
    }
}

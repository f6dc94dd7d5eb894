//! Append-only metric rows and their CSV form.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const CSV_HEADER: [&str; 5] = ["step", "seed", "variant", "metric", "value"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub seed: u64,
    pub variant: String,
    pub metric: String,
    pub value: f64,
}

/// Rows in emission order. Within one `(seed, variant)` stream steps never
/// decrease.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    rows: Vec<MetricRow>,
    last_step: HashMap<(u64, String), usize>,
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

impl MetricLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, step: usize, seed: u64, variant: &str, metric: &str, value: f64) -> Result<()> {
        let key = (seed, variant.to_string());
        if let Some(&last) = self.last_step.get(&key) {
            if step < last {
                bail!("step {step} after {last} in stream (seed {seed}, {variant})");
            }
        }
        self.last_step.insert(key, step);
        self.rows.push(MetricRow {
            step,
            seed,
            variant: variant.to_string(),
            metric: metric.to_string(),
            value,
        });
        Ok(())
    }

    /// Values of one metric in a stream, as `(step, value)`.
    pub fn series(&self, seed: u64, variant: &str, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.seed == seed && r.variant == variant && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    /// Concatenates per-worker logs and orders rows by `(seed, step)`,
    /// keeping emission order among ties.
    pub fn merge(parts: Vec<MetricLog>) -> Result<MetricLog> {
        let mut rows: Vec<MetricRow> = parts.into_iter().flat_map(|p| p.rows).collect();
        rows.sort_by_key(|r| (r.seed, r.step));
        let mut out = MetricLog::new();
        for r in rows {
            out.push(r.step, r.seed, &r.variant, &r.metric, r.value)?;
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(CSV_HEADER)?;
        for r in &self.rows {
            wr.write_record([
                r.step.to_string(),
                r.seed.to_string(),
                r.variant.clone(),
                r.metric.clone(),
                format_value(r.value),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<MetricLog> {
        let mut rd = csv::Reader::from_reader(r);
        if rd.headers()?.iter().ne(CSV_HEADER) {
            bail!("unexpected metric log header {:?}", rd.headers()?);
        }
        let mut log = MetricLog::new();
        for rec in rd.deserialize() {
            let row: MetricRow = rec?;
            log.push(row.step, row.seed, &row.variant, &row.metric, row.value)?;
        }
        Ok(log)
    }
}

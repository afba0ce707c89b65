use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One JSON-lines metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Append-only JSON-lines writer.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn append_to(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, rec: &MetricRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }

    pub fn write_all(path: &Path, records: &[MetricRecord]) -> std::io::Result<()> {
        let mut log = Self::append_to(path)?;
        records.iter().try_for_each(|r| log.write(r))
    }
}

pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::from))
        .collect()
}

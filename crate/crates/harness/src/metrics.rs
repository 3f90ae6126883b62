//! The metrics log: a header line naming the run, then one record per step.
//!
//! ```text
//! {"format":"dlpt-metrics","version":1,"command":"sft","digest":"<hex>"}
//! {"version":1,"phase":"sft","step":1,...}
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use dlpt_core::train::{MetricsRecord, METRICS_VERSION};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const METRICS_FORMAT: &str = "dlpt-metrics";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsHeader {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub digest: String,
}

impl MetricsHeader {
    pub fn new(command: &str, digest: &str) -> Self {
        Self {
            format: METRICS_FORMAT.into(),
            version: METRICS_VERSION,
            command: command.into(),
            digest: digest.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub header: MetricsHeader,
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines
            .next()
            .ok_or_else(|| HarnessError::Mismatch("metrics log has no header".into()))?;
        let header: MetricsHeader =
            serde_json::from_str(first).map_err(|e| HarnessError::Mismatch(format!("bad metrics header: {e}")))?;
        if header.format != METRICS_FORMAT || header.version != METRICS_VERSION {
            return Err(HarnessError::Mismatch(format!(
                "unsupported metrics log {} v{}",
                header.format, header.version
            )));
        }
        let mut records: Vec<MetricsRecord> = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let rec: MetricsRecord =
                serde_json::from_str(line).map_err(|e| HarnessError::Mismatch(format!("bad metrics record: {e}")))?;
            if records.last().is_some_and(|p| p.step >= rec.step) {
                return Err(HarnessError::Mismatch(format!(
                    "metrics steps out of order at step {}",
                    rec.step
                )));
            }
            records.push(rec);
        }
        Ok(Self { header, records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Appends records, flushing after each one.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Starts a fresh log.
    pub fn create(path: &Path, header: &MetricsHeader) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", serde_json::to_string(header).expect("header serializes"))?;
        out.flush()?;
        Ok(Self { out })
    }

    /// Reopens a log for a resumed run, dropping records after `step`.
    pub fn resume(path: &Path, header: &MetricsHeader, step: u64) -> Result<Self> {
        if !path.exists() {
            return Self::create(path, header);
        }
        let log = MetricsLog::read(path)?;
        if log.header != *header {
            return Err(HarnessError::Mismatch(format!(
                "{} belongs to {} run {}",
                path.display(),
                log.header.command,
                log.header.digest
            )));
        }
        let mut w = Self::create(path, header)?;
        for rec in log.records.iter().filter(|r| r.step <= step) {
            w.write(rec)?;
        }
        Ok(w)
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", rec.to_json_line())?;
        self.out.flush()?;
        Ok(())
    }
}

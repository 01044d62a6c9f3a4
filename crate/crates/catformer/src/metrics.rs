//! Metrics records: one self-describing JSON object per line, append-only.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Epoch,
    TaskDone,
    GateDone,
    Eval,
}

/// Scope of an eval record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalScope {
    /// Routed accuracy of one task (`task` field names it).
    PerTask,
    /// Routed accuracy over the union test set; `routing_acc` is set.
    Overall,
    /// Oracle-routed accuracy over the union test set.
    Oracle,
    /// Oracle-routed accuracy of one task, as measured at this point of the
    /// run (forgetting profile row).
    Profile,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub event: EventKind,
    /// Task index; -1 for aggregate records.
    pub task: i64,
    pub epoch: i64,
    pub loss: f64,
    pub acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub routing_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scope: Option<EvalScope>,
    pub trainable_params: u64,
    pub bank_bytes: u64,
    pub wall_ms: u64,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        let mut floats = vec![self.loss, self.acc];
        if let Some(r) = self.routing_acc {
            floats.push(r);
        }
        if floats.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("non-finite value in metrics record".into()));
        }
        Ok(())
    }

    pub fn to_line(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string(self)
            .map_err(|e| Error::Metrics { line: 0, msg: e.to_string() })
    }

    pub fn parse_line(line: &str, line_no: usize) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Metrics { line: line_no, msg: e.to_string() })
    }
}

/// Destination for emitted records.
pub trait MetricsSink {
    fn emit(&mut self, rec: &MetricsRecord) -> Result<()>;
}

/// Collects records in memory (library runs and tests).
#[derive(Default)]
pub struct VecSink {
    pub records: Vec<MetricsRecord>,
}

impl MetricsSink for VecSink {
    fn emit(&mut self, rec: &MetricsRecord) -> Result<()> {
        rec.validate()?;
        self.records.push(rec.clone());
        Ok(())
    }
}

/// Appends one JSON line per record to a file, also keeping a copy.
pub struct FileSink {
    file: File,
    pub records: Vec<MetricsRecord>,
}

impl FileSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(FileSink { file, records: Vec::new() })
    }
}

impl MetricsSink for FileSink {
    fn emit(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = rec.to_line()?;
        writeln!(self.file, "{line}")?;
        self.records.push(rec.clone());
        Ok(())
    }
}

/// Parse a metrics file, reporting the first malformed line by number.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path)?;
    let reader = BufReader::new(f);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(MetricsRecord::parse_line(&line, i + 1)?);
    }
    Ok(out)
}

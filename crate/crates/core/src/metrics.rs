//! Per-step training records and line-delimited sinks.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: u64,
    pub epoch: u64,
    #[serde(rename = "Q")]
    pub q: usize,
    /// Mean of `(l_plus + l_minus) / 2` over the step's queries.
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

pub trait MetricsSink {
    fn record(&mut self, rec: &StepRecord) -> io::Result<()>;

    /// Called after the last step of every epoch and at the end of a run.
    fn flush_epoch(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl MetricsSink for Vec<StepRecord> {
    fn record(&mut self, rec: &StepRecord) -> io::Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _rec: &StepRecord) -> io::Result<()> {
        Ok(())
    }
}

/// Writes one JSON object per line, buffered until the epoch boundary.
pub struct JsonlSink<W: Write> {
    out: io::BufWriter<W>,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        Self { out: io::BufWriter::new(out) }
    }

    /// Writes an arbitrary serializable line (run headers, summaries).
    pub fn write_line<T: Serialize>(&mut self, value: &T) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> io::Result<W> {
        self.out.into_inner().map_err(|e| e.into_error())
    }
}

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn record(&mut self, rec: &StepRecord) -> io::Result<()> {
        self.write_line(rec)
    }

    fn flush_epoch(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

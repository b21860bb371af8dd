//! JSON-lines progress records emitted while building an index.

use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub level: usize,
    pub iter: usize,
    pub alpha: f64,
    pub index_loss: f64,
    pub flops_penalty: f64,
    pub recon_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub round: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub inertia: Option<f64>,
}

impl ProgressRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("progress records serialize")
    }
}

/// Receiver of progress records.
pub trait ProgressSink {
    fn record(&mut self, record: &ProgressRecord);
}

impl<F: FnMut(&ProgressRecord)> ProgressSink for F {
    fn record(&mut self, record: &ProgressRecord) {
        self(record)
    }
}

/// Discards everything.
pub struct NullSink;

impl ProgressSink for NullSink {
    fn record(&mut self, _: &ProgressRecord) {}
}

/// Writes one JSON object per line; write errors are logged and dropped.
pub struct JsonLines<W: Write>(pub W);

impl<W: Write> ProgressSink for JsonLines<W> {
    fn record(&mut self, record: &ProgressRecord) {
        if let Err(e) = writeln!(self.0, "{}", record.to_json_line()) {
            log::warn!("progress stream: {e}");
        }
    }
}

//! Diagnostic result records, written one JSON object per line.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl DiagnosticRecord {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }

    /// Passes when `value < threshold`.
    pub fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value < threshold,
        }
    }
}

pub fn write_records<W: Write>(mut out: W, records: &[DiagnosticRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

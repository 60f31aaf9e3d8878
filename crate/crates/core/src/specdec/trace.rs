//! Line-delimited JSON cycle traces.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::CycleRecord;
use crate::error::{Error, Result};

/// One trace line: a cycle, optionally tagged with where it ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    /// Active slots in the scheduler step that ran this cycle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(flatten)]
    pub cycle: CycleRecord,
}

impl From<CycleRecord> for TraceLine {
    fn from(cycle: CycleRecord) -> Self {
        Self {
            request: None,
            step: None,
            batch: None,
            cycle,
        }
    }
}

pub fn write_trace<'a, W: Write>(mut w: W, lines: impl IntoIterator<Item = &'a TraceLine>) -> Result<()> {
    for line in lines {
        let json = serde_json::to_string(line).map_err(|e| Error::format("trace", e.to_string()))?;
        writeln!(w, "{json}")?;
    }
    Ok(())
}

/// Parse a trace; blank lines are skipped.
pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceLine>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine =
            serde_json::from_str(&line).map_err(|e| Error::format(format!("trace line {}", i + 1), e.to_string()))?;
        if parsed.cycle.accept_len > parsed.cycle.drafted.len() {
            return Err(Error::format(
                format!("trace line {}", i + 1),
                "accept_len exceeds drafted length",
            ));
        }
        out.push(parsed);
    }
    Ok(out)
}

//! Teleop record files: one JSON object per line, tagged by `type`.
//! `applied` lines carry the leader input in force from a given step on and
//! are what a replay scenario reads back.

use std::io::{BufRead, BufReader, Write};

use serde::{Deserialize, Serialize};

use tetherlift_core::controllers::LeaderInput;

use crate::engine::Snapshot;
use crate::error::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RecordEntry {
    Header { scenario: String, scenario_sha256: String, dt: f64, version: String },
    /// A command accepted from a client, stamped with the step it arrived at.
    Cmd { step: u64, seq: u64, t_ms: u64, phi: f64, theta: f64, thrust: f64 },
    /// Leader input applied from `step` on.
    Applied { step: u64, t: f64, phi: f64, theta: f64, thrust: f64 },
    State(Box<Snapshot>),
}

impl RecordEntry {
    pub fn applied(step: u64, t: f64, input: LeaderInput) -> Self {
        Self::Applied { step, t, phi: input.phi, theta: input.theta, thrust: input.thrust }
    }
}

pub struct RecordWriter<W: Write> {
    out: W,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, entry: &RecordEntry) -> Result<(), SimError> {
        serde_json::to_writer(&mut self.out, entry).map_err(|e| SimError::Io(e.to_string()))?;
        self.out.write_all(b"\n").map_err(|e| SimError::Io(e.to_string()))
    }

    pub fn flush(&mut self) -> Result<(), SimError> {
        self.out.flush().map_err(|e| SimError::Io(e.to_string()))
    }
}

pub fn read_record(path: &str) -> Result<Vec<RecordEntry>, SimError> {
    let f = std::fs::File::open(path).map_err(|e| SimError::Io(format!("{path}: {e}")))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(k, line)| {
            let line = line.map_err(|e| SimError::Io(format!("{path}: {e}")))?;
            serde_json::from_str(&line).map_err(|e| SimError::Scenario(format!("{path} line {}: {e}", k + 1)))
        })
        .collect()
}

/// The step-indexed leader schedule stored in a record file.
pub fn read_applied_inputs(path: &str) -> Result<Vec<(u64, LeaderInput)>, SimError> {
    let mut out: Vec<(u64, LeaderInput)> = Vec::new();
    for e in read_record(path)? {
        let RecordEntry::Applied { step, phi, theta, thrust, .. } = e else { continue };
        let input = LeaderInput { phi, theta, thrust };
        match out.last_mut() {
            Some(last) if step < last.0 => {
                return Err(SimError::Scenario(format!("{path}: applied inputs out of step order")));
            }
            Some(last) if step == last.0 => last.1 = input,
            _ => out.push((step, input)),
        }
    }
    Ok(out)
}

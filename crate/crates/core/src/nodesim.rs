//! Scenario-driven synthetic sensor node.
//!
//! A scenario is a CSV file with header `t_offset_s,sensor,raw`; lines
//! starting with `#` and blank lines are ignored. Rows may appear in any
//! order and are stably sorted by offset on load.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::domain::{NodeId, RawReading, SensorKind, Timestamp};

pub const SCENARIO_HEADER: &str = "t_offset_s,sensor,raw";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected header `{SCENARIO_HEADER}`, found `{found}`")]
    Header { line: usize, found: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown sensor `{name}`")]
    UnknownSensor { line: usize, name: String },
    #[error("line {line}: negative time offset {value}")]
    NegativeOffset { line: usize, value: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioStep {
    pub t_offset: u64,
    pub sensor: SensorKind,
    pub raw: i32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub steps: Vec<ScenarioStep>,
    /// Median spacing between distinct offsets; 0 with fewer than two.
    pub sample_interval: u64,
}

impl Scenario {
    pub fn new(name: impl Into<String>, mut steps: Vec<ScenarioStep>) -> Self {
        steps.sort_by_key(|s| s.t_offset);
        let mut offsets: Vec<u64> = steps.iter().map(|s| s.t_offset).collect();
        offsets.dedup();
        let mut gaps: Vec<u64> = offsets.windows(2).map(|w| w[1] - w[0]).collect();
        gaps.sort_unstable();
        let sample_interval = gaps.get(gaps.len() / 2).copied().unwrap_or(0);
        Scenario {
            name: name.into(),
            steps,
            sample_interval,
        }
    }

    pub fn parse(name: &str, text: &str) -> Result<Scenario, ScenarioError> {
        let mut steps = Vec::new();
        let mut header_seen = false;
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw_line.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            if !header_seen {
                let norm: String = l.chars().filter(|c| !c.is_whitespace()).collect();
                if norm != SCENARIO_HEADER {
                    return Err(ScenarioError::Header {
                        line,
                        found: l.to_string(),
                    });
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = l.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(ScenarioError::Parse {
                    line,
                    message: format!("expected 3 fields, found {}", fields.len()),
                });
            }
            let offset: i64 = fields[0].parse().map_err(|e| ScenarioError::Parse {
                line,
                message: format!("bad t_offset_s `{}`: {e}", fields[0]),
            })?;
            if offset < 0 {
                return Err(ScenarioError::NegativeOffset {
                    line,
                    value: offset,
                });
            }
            let sensor: SensorKind = fields[1].parse().map_err(|_| ScenarioError::UnknownSensor {
                line,
                name: fields[1].to_string(),
            })?;
            let raw: i32 = fields[2].parse().map_err(|e| ScenarioError::Parse {
                line,
                message: format!("bad raw `{}`: {e}", fields[2]),
            })?;
            steps.push(ScenarioStep {
                t_offset: offset as u64,
                sensor,
                raw,
            });
        }
        Ok(Scenario::new(name, steps))
    }

    /// Offset of the last step, 0 for an empty scenario.
    pub fn end_offset(&self) -> u64 {
        self.steps.last().map_or(0, |s| s.t_offset)
    }

    /// Distinct step offsets in ascending order.
    pub fn offsets(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.steps.iter().map(|s| s.t_offset).collect();
        v.dedup();
        v
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SCENARIO_HEADER}\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{}\n", s.t_offset, s.sensor, s.raw));
        }
        out
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Scenario::parse(&name, &text)
}

/// Turns scenario steps into readings as simulated time advances. Each
/// step is emitted exactly once, with gapless seq numbers from 1.
#[derive(Debug, Clone)]
pub struct Emitter {
    scenario: Scenario,
    node_id: NodeId,
    start: Timestamp,
    cursor: usize,
}

impl Emitter {
    pub fn new(scenario: Scenario, node_id: NodeId, start: Timestamp) -> Self {
        Emitter {
            scenario,
            node_id,
            start,
            cursor: 0,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Steps with `start + t_offset <= up_to` not yet emitted.
    pub fn emit_readings(&mut self, up_to: Timestamp) -> Vec<RawReading> {
        let mut out = Vec::new();
        while let Some(step) = self.scenario.steps.get(self.cursor) {
            let ts = self.start + step.t_offset;
            if ts > up_to {
                break;
            }
            self.cursor += 1;
            out.push(RawReading {
                node_id: self.node_id,
                seq: self.cursor as u32,
                timestamp: ts,
                sensor: step.sensor,
                raw: step.raw,
            });
        }
        out
    }

    pub fn emitted(&self) -> usize {
        self.cursor
    }

    pub fn is_done(&self) -> bool {
        self.cursor == self.scenario.steps.len()
    }

    /// Absolute timestamp of the next step still to be emitted.
    pub fn next_due(&self) -> Option<Timestamp> {
        self.scenario.steps.get(self.cursor).map(|s| self.start + s.t_offset)
    }
}

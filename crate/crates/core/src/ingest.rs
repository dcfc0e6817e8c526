//! Base-station data pipeline: calibration, de-duplication of retransmitted
//! batches, and the append-only reading store.
//!
//! The store is a directory holding `readings.csv`, one calibrated reading
//! per line under the header `ts_unix,node_id,sensor,seq,value`. The
//! de-duplication index and the time index are rebuilt from the file when a
//! repository is opened.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Bound;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::domain::{CalibratedReading, CalibrationConstants, NodeId, RawReading, SensorKind, Timestamp};
use crate::wire::SendDataPayload;

pub const READINGS_FILE: &str = "readings.csv";
pub const READINGS_HEADER: &str = "ts_unix,node_id,sensor,seq,value";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("calibration constants are for {constants} but reading is from {reading}")]
    SensorMismatch {
        reading: SensorKind,
        constants: SensorKind,
    },
    #[error("no calibration constants configured for {0}")]
    MissingConstants(SensorKind),
    #[error("invalid range: from {from} is after to {to}")]
    InvalidRange { from: Timestamp, to: Timestamp },
    #[error("repository opened read-only")]
    ReadOnly,
    #[error("store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub fn calibrate(r: &RawReading, c: &CalibrationConstants) -> Result<CalibratedReading, IngestError> {
    if r.sensor != c.sensor {
        return Err(IngestError::SensorMismatch {
            reading: r.sensor,
            constants: c.sensor,
        });
    }
    Ok(CalibratedReading {
        node_id: r.node_id,
        seq: r.seq,
        timestamp: r.timestamp,
        sensor: r.sensor,
        value: c.apply(r.raw),
    })
}

/// Calibration constants keyed by sensor kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationTable {
    constants: BTreeMap<SensorKind, CalibrationConstants>,
}

impl CalibrationTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, c: CalibrationConstants) {
        self.constants.insert(c.sensor, c);
    }

    pub fn get(&self, sensor: SensorKind) -> Result<&CalibrationConstants, IngestError> {
        self.constants
            .get(&sensor)
            .ok_or(IngestError::MissingConstants(sensor))
    }

    pub fn iter(&self) -> impl Iterator<Item = &CalibrationConstants> {
        self.constants.values()
    }

    /// `gain = 1, offset = 0` for every sensor.
    pub fn identity() -> Self {
        let mut t = Self::new();
        for s in SensorKind::ALL {
            t.insert(CalibrationConstants::new(s, 1.0, 0.0).expect("unit gain"));
        }
        t
    }
}

impl FromIterator<CalibrationConstants> for CalibrationTable {
    fn from_iter<I: IntoIterator<Item = CalibrationConstants>>(iter: I) -> Self {
        let mut t = Self::new();
        for c in iter {
            t.insert(c);
        }
        t
    }
}

/// Expands a SENDDATA payload into raw readings. Reading `i` carries
/// `payload.seq + i`.
pub fn payload_readings(node_id: NodeId, payload: &SendDataPayload) -> Vec<RawReading> {
    payload
        .readings
        .iter()
        .enumerate()
        .map(|(i, &(sensor, raw))| RawReading {
            node_id,
            seq: payload.seq.wrapping_add(i as u32),
            timestamp: payload.timestamp,
            sensor,
            raw,
        })
        .collect()
}

pub fn format_record(r: &CalibratedReading) -> String {
    format!("{},{},{},{},{}", r.timestamp, r.node_id, r.sensor, r.seq, r.value)
}

pub fn parse_record(line: &str) -> Result<CalibratedReading, String> {
    let fields: Vec<&str> = line.split(',').collect();
    let [ts, node, sensor, seq, value] = fields.as_slice() else {
        return Err(format!("expected 5 fields, got {}", fields.len()));
    };
    let value: f64 = value.trim().parse().map_err(|e| format!("value {value:?}: {e}"))?;
    if !value.is_finite() {
        return Err(format!("non-finite value {value}"));
    }
    Ok(CalibratedReading {
        timestamp: ts.trim().parse().map_err(|e| format!("ts_unix {ts:?}: {e}"))?,
        node_id: NodeId(node.trim().parse().map_err(|e| format!("node_id {node:?}: {e}"))?),
        sensor: sensor.parse().map_err(|e| format!("{e}"))?,
        seq: seq.trim().parse().map_err(|e| format!("seq {seq:?}: {e}"))?,
        value,
    })
}

/// Renders records in store format, header included.
pub fn records_to_csv(records: &[CalibratedReading]) -> String {
    let mut s = String::from(READINGS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", format_record(r));
    }
    s
}

/// How hard a batch append pushes data towards the disk before returning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    /// Flush to the OS; survives process kill.
    #[default]
    Flush,
    /// Also `fsync`; survives power loss.
    Sync,
}

/// Ordering key for the time index: timestamp, then node, then seq.
type RecordKey = (Timestamp, NodeId, u32);

#[derive(Debug)]
pub struct Repository {
    dir: PathBuf,
    writer: Option<BufWriter<File>>,
    durability: Durability,
    records: BTreeMap<RecordKey, CalibratedReading>,
    by_sensor: HashMap<SensorKind, BTreeMap<RecordKey, f64>>,
    seen: HashSet<(NodeId, u32)>,
}

impl Repository {
    /// Opens (creating if needed) a writable store in `dir`. A torn final
    /// line left by a crash is cut off. Returns row-level warnings for rows
    /// that could not be loaded.
    pub fn open(dir: impl AsRef<Path>) -> Result<(Self, Vec<String>), IngestError> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(READINGS_FILE);
        let io_err = |source| IngestError::Io {
            path: path.clone(),
            source,
        };
        fs::create_dir_all(&dir).map_err(io_err)?;
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io_err)?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(io_err)?;
        let mut warnings = Vec::new();
        if text.is_empty() {
            writeln!(file, "{READINGS_HEADER}").map_err(io_err)?;
            file.sync_data().map_err(io_err)?;
        } else if !text.ends_with('\n') {
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            warnings.push(format!(
                "{}: discarded torn final line {:?}",
                path.display(),
                &text[keep..]
            ));
            file.set_len(keep as u64).map_err(io_err)?;
            file.seek(SeekFrom::End(0)).map_err(io_err)?;
            text.truncate(keep);
            if text.is_empty() {
                writeln!(file, "{READINGS_HEADER}").map_err(io_err)?;
            }
        }
        let mut repo = Repository::empty(dir);
        repo.load_text(&text, &path, &mut warnings);
        repo.writer = Some(BufWriter::new(file));
        Ok((repo, warnings))
    }

    /// Loads a store for querying only. A missing file is an empty store.
    pub fn open_read_only(dir: impl AsRef<Path>) -> Result<(Self, Vec<String>), IngestError> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(READINGS_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(source) => return Err(IngestError::Io { path, source }),
        };
        let mut warnings = Vec::new();
        let mut repo = Repository::empty(dir);
        let complete = match text.rfind('\n') {
            Some(i) if i + 1 < text.len() => {
                warnings.push(format!("{}: ignoring torn final line", path.display()));
                &text[..=i]
            }
            None if !text.is_empty() => {
                warnings.push(format!("{}: ignoring torn final line", path.display()));
                ""
            }
            _ => &text[..],
        };
        repo.load_text(complete, &path, &mut warnings);
        Ok((repo, warnings))
    }

    fn empty(dir: PathBuf) -> Self {
        Repository {
            dir,
            writer: None,
            durability: Durability::default(),
            records: BTreeMap::new(),
            by_sensor: HashMap::new(),
            seen: HashSet::new(),
        }
    }

    fn load_text(&mut self, text: &str, path: &Path, warnings: &mut Vec<String>) {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || (i == 0 && line.trim() == READINGS_HEADER) {
                continue;
            }
            match parse_record(line) {
                Ok(r) if self.seen.contains(&(r.node_id, r.seq)) => warnings.push(format!(
                    "{}:{}: duplicate (node {}, seq {}) skipped",
                    path.display(),
                    i + 1,
                    r.node_id,
                    r.seq
                )),
                Ok(r) => self.index(r),
                Err(e) => warnings.push(format!("{}:{}: {e}", path.display(), i + 1)),
            }
        }
    }

    fn index(&mut self, r: CalibratedReading) {
        let key = (r.timestamp, r.node_id, r.seq);
        self.seen.insert((r.node_id, r.seq));
        self.by_sensor.entry(r.sensor).or_default().insert(key, r.value);
        self.records.insert(key, r);
    }

    pub fn set_durability(&mut self, d: Durability) {
        self.durability = d;
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, node: NodeId, seq: u32) -> bool {
        self.seen.contains(&(node, seq))
    }

    /// Calibrates and appends the new readings of `payload`, skipping
    /// `(node_id, seq)` pairs already stored. The batch is rejected as a
    /// whole if any sensor lacks calibration constants. Returns the number
    /// of records added.
    pub fn ingest_batch(
        &mut self,
        payload: &SendDataPayload,
        node_id: NodeId,
        constants: &CalibrationTable,
    ) -> Result<usize, IngestError> {
        let calibrated = payload_readings(node_id, payload)
            .iter()
            .map(|r| calibrate(r, constants.get(r.sensor)?))
            .collect::<Result<Vec<_>, _>>()?;
        let fresh: Vec<CalibratedReading> = calibrated
            .into_iter()
            .filter(|r| !self.seen.contains(&(r.node_id, r.seq)))
            .collect();
        self.append(&fresh)?;
        Ok(fresh.len())
    }

    /// Appends already-calibrated records that the caller has de-duplicated.
    fn append(&mut self, records: &[CalibratedReading]) -> Result<(), IngestError> {
        if records.is_empty() {
            return Ok(());
        }
        let path = self.dir.join(READINGS_FILE);
        let durability = self.durability;
        let writer = self.writer.as_mut().ok_or(IngestError::ReadOnly)?;
        let io = |source| IngestError::Io {
            path: path.clone(),
            source,
        };
        let mut buf = String::new();
        for r in records {
            buf.push_str(&format_record(r));
            buf.push('\n');
        }
        writer.write_all(buf.as_bytes()).map_err(io)?;
        writer.flush().map_err(io)?;
        if durability == Durability::Sync {
            writer.get_ref().sync_data().map_err(io)?;
        }
        for r in records {
            self.index(*r);
        }
        Ok(())
    }

    /// Records with `from <= timestamp <= to`, optionally restricted to one
    /// sensor, ordered by timestamp, node and seq.
    pub fn query_range(
        &self,
        from: Timestamp,
        to: Timestamp,
        sensor: Option<SensorKind>,
    ) -> Result<Vec<CalibratedReading>, IngestError> {
        if from > to {
            return Err(IngestError::InvalidRange { from, to });
        }
        let range = (
            Bound::Included((from, NodeId(0), 0)),
            Bound::Included((to, NodeId(u16::MAX), u32::MAX)),
        );
        Ok(match sensor {
            None => self.records.range(range).map(|(_, r)| *r).collect(),
            Some(s) => self
                .by_sensor
                .get(&s)
                .into_iter()
                .flat_map(|m| m.range(range))
                .map(|(k, _)| self.records[k])
                .collect(),
        })
    }

    /// Every stored record in time order.
    pub fn all(&self) -> Vec<CalibratedReading> {
        self.records.values().copied().collect()
    }

    /// `(timestamp, value)` of the most recent `n` readings of `sensor`,
    /// oldest first.
    pub fn recent(&self, sensor: SensorKind, n: usize) -> Vec<(Timestamp, f64)> {
        let Some(m) = self.by_sensor.get(&sensor) else {
            return Vec::new();
        };
        let mut v: Vec<_> = m.iter().rev().take(n).map(|(k, v)| (k.0, *v)).collect();
        v.reverse();
        v
    }

    pub fn latest(&self, sensor: SensorKind) -> Option<(Timestamp, f64)> {
        self.by_sensor
            .get(&sensor)
            .and_then(|m| m.last_key_value())
            .map(|(k, v)| (k.0, *v))
    }

    /// `(timestamp, value)` of every reading of `sensor`, oldest first.
    pub fn series(&self, sensor: SensorKind) -> Vec<(Timestamp, f64)> {
        self.by_sensor
            .get(&sensor)
            .map(|m| m.iter().map(|(k, v)| (k.0, *v)).collect())
            .unwrap_or_default()
    }

    pub fn max_timestamp(&self) -> Option<Timestamp> {
        self.records.last_key_value().map(|(k, _)| k.0)
    }

    /// Flushes and fsyncs the append handle.
    pub fn sync(&mut self) -> Result<(), IngestError> {
        let path = self.dir.join(READINGS_FILE);
        let io = |source| IngestError::Io {
            path: path.clone(),
            source,
        };
        if let Some(w) = self.writer.as_mut() {
            w.flush().map_err(io)?;
            w.get_ref().sync_all().map_err(io)?;
        }
        Ok(())
    }
}

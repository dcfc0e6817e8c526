//! Shared vocabulary: sensor kinds, readings, calibration constants and
//! alert levels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seconds since the Unix epoch.
pub type Timestamp = u64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("unknown sensor name {0:?}")]
    UnknownSensor(String),
    #[error("unknown alert level {0:?}")]
    UnknownLevel(String),
}

/// Identifier of a field node (one micro-controller board with its modem).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u16);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The five geo-technical instruments installed at a monitoring site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    RainGauge,
    Piezometer,
    Extensometer,
    Inclinometer,
    Tiltmeter,
}

impl SensorKind {
    pub const ALL: [SensorKind; 5] = [
        SensorKind::RainGauge,
        SensorKind::Piezometer,
        SensorKind::Extensometer,
        SensorKind::Inclinometer,
        SensorKind::Tiltmeter,
    ];

    /// One-byte code used on the wire.
    pub fn code(self) -> u8 {
        match self {
            SensorKind::RainGauge => 0x01,
            SensorKind::Piezometer => 0x02,
            SensorKind::Extensometer => 0x03,
            SensorKind::Inclinometer => 0x04,
            SensorKind::Tiltmeter => 0x05,
        }
    }

    pub fn from_code(code: u8) -> Option<SensorKind> {
        SensorKind::ALL.into_iter().find(|k| k.code() == code)
    }

    /// Engineering unit of a calibrated value. Rain is millimetres per
    /// reporting interval.
    pub fn unit(self) -> &'static str {
        match self {
            SensorKind::RainGauge => "mm",
            SensorKind::Piezometer => "kPa",
            SensorKind::Extensometer => "mm",
            SensorKind::Inclinometer | SensorKind::Tiltmeter => "deg",
        }
    }

    /// Stable snake_case name used in CSV files and configuration.
    pub fn name(self) -> &'static str {
        match self {
            SensorKind::RainGauge => "rain_gauge",
            SensorKind::Piezometer => "piezometer",
            SensorKind::Extensometer => "extensometer",
            SensorKind::Inclinometer => "inclinometer",
            SensorKind::Tiltmeter => "tiltmeter",
        }
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SensorKind {
    type Err = DomainError;

    /// Accepts the snake_case name or the CamelCase variant name, ignoring
    /// case, plus "crack_meter" as an alias for the extensometer.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .chars()
            .filter(|c| *c != '_' && *c != '-' && *c != ' ')
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match norm.as_str() {
            "raingauge" | "rain" => Ok(SensorKind::RainGauge),
            "piezometer" => Ok(SensorKind::Piezometer),
            "extensometer" | "crackmeter" => Ok(SensorKind::Extensometer),
            "inclinometer" => Ok(SensorKind::Inclinometer),
            "tiltmeter" => Ok(SensorKind::Tiltmeter),
            _ => Err(DomainError::UnknownSensor(s.to_string())),
        }
    }
}

/// One uncalibrated sample as produced by a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawReading {
    pub node_id: NodeId,
    pub seq: u32,
    pub timestamp: Timestamp,
    pub sensor: SensorKind,
    pub raw: i32,
}

/// A sample converted to engineering units at the base station.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedReading {
    pub node_id: NodeId,
    pub seq: u32,
    pub timestamp: Timestamp,
    pub sensor: SensorKind,
    pub value: f64,
}

/// Affine correction `value = gain * raw + offset` for one sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationConstants {
    pub sensor: SensorKind,
    pub gain: f64,
    pub offset: f64,
}

impl CalibrationConstants {
    pub fn new(sensor: SensorKind, gain: f64, offset: f64) -> Result<Self, DomainError> {
        if gain == 0.0 || !gain.is_finite() {
            return Err(DomainError::InvalidCalibration(format!(
                "{sensor}: gain must be finite and non-zero, got {gain}"
            )));
        }
        if !offset.is_finite() {
            return Err(DomainError::InvalidCalibration(format!(
                "{sensor}: offset must be finite, got {offset}"
            )));
        }
        Ok(CalibrationConstants {
            sensor,
            gain,
            offset,
        })
    }

    pub fn apply(&self, raw: i32) -> f64 {
        self.gain * f64::from(raw) + self.offset
    }
}

/// Warning ladder. Ordered by severity.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
pub enum AlertLevel {
    #[default]
    Green = 0,
    Yellow = 1,
    Orange = 2,
    Red = 3,
}

impl AlertLevel {
    pub const ALL: [AlertLevel; 4] = [
        AlertLevel::Green,
        AlertLevel::Yellow,
        AlertLevel::Orange,
        AlertLevel::Red,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlertLevel::Green => "Green",
            AlertLevel::Yellow => "Yellow",
            AlertLevel::Orange => "Orange",
            AlertLevel::Red => "Red",
        }
    }
}

impl fmt::Display for AlertLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlertLevel {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AlertLevel::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DomainError::UnknownLevel(s.to_string()))
    }
}

pub fn level_max(a: AlertLevel, b: AlertLevel) -> AlertLevel {
    a.max(b)
}

/// Converts a tipping-bucket count to millimetres of rain.
pub fn tips_to_mm(tip_count: u32, mm_per_tip: f64) -> Result<f64, DomainError> {
    if mm_per_tip <= 0.0 || !mm_per_tip.is_finite() {
        return Err(DomainError::InvalidCalibration(format!(
            "mm_per_tip must be positive, got {mm_per_tip}"
        )));
    }
    Ok(f64::from(tip_count) * mm_per_tip)
}

//! Decision support: monitoring-threshold exceedances, the four-level
//! warning ladder, and notification dispatch.
//!
//! Alarms are raised four ways: from current or predicted values, each in
//! uni-parameter mode (any single parameter at or above its threshold) and
//! multi-parameter mode (the rain-gated ladder below).
//!
//! | level  | multi-parameter condition                         |
//! |--------|---------------------------------------------------|
//! | Green  | no rain exceedance                                 |
//! | Yellow | rain                                               |
//! | Orange | rain and pore pressure                             |
//! | Red    | rain, pore pressure, and displacement or inclination |

mod engine;
mod sinks;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{exceeds_caine, RainEvent};
use crate::domain::{AlertLevel, Timestamp};

pub use engine::{observe, rain_events, rain_interval, trailing_intensity, AlertEngine, AnalysisSettings};
pub use sinks::{
    load_alert_history, ConsoleSink, DeliveryOutcome, Dispatcher, FileSink, Sink, SinkError, SinkResult,
    SmsOutboxSink, WebhookSink, ALERTS_FILE, SMS_OUTBOX_FILE,
};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid thresholds: {0}")]
pub struct ThresholdError(pub String);

/// Monitoring thresholds (MT) and the knobs of the alert engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub mt_rain_mm_per_h: f64,
    pub mt_pore_kpa: f64,
    pub mt_displacement_mm: f64,
    pub mt_inclination_deg: f64,
    pub prediction_horizon: usize,
    pub hold_period_s: u64,
}

impl Thresholds {
    pub const DEFAULT_HOLD_PERIOD_S: u64 = 30 * 60;
    pub const DEFAULT_PREDICTION_HORIZON: usize = 3;

    pub fn validate(&self) -> Result<(), ThresholdError> {
        for (name, v) in [
            ("mt_rain_mm_per_h", self.mt_rain_mm_per_h),
            ("mt_pore_kpa", self.mt_pore_kpa),
            ("mt_displacement_mm", self.mt_displacement_mm),
            ("mt_inclination_deg", self.mt_inclination_deg),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ThresholdError(format!("{name} must be positive, got {v}")));
            }
        }
        if self.prediction_horizon == 0 {
            return Err(ThresholdError("prediction_horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// Ladder roles. Inclinometer and tiltmeter share `Inclination`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameter {
    Rain,
    Pore,
    Displacement,
    Inclination,
}

impl fmt::Display for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parameter::Rain => "rain",
            Parameter::Pore => "pore",
            Parameter::Displacement => "displacement",
            Parameter::Inclination => "inclination",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ExceedanceSet {
    pub rain: bool,
    pub pore: bool,
    pub displacement: bool,
    pub inclination: bool,
}

impl ExceedanceSet {
    /// All 16 combinations, indexed by the bit pattern
    /// `rain | pore << 1 | displacement << 2 | inclination << 3`.
    pub fn from_bits(bits: u8) -> Self {
        ExceedanceSet {
            rain: bits & 1 != 0,
            pore: bits & 2 != 0,
            displacement: bits & 4 != 0,
            inclination: bits & 8 != 0,
        }
    }

    pub fn bits(&self) -> u8 {
        u8::from(self.rain)
            | u8::from(self.pore) << 1
            | u8::from(self.displacement) << 2
            | u8::from(self.inclination) << 3
    }

    /// Pointwise implication: every exceedance in `self` is also in `other`.
    pub fn is_subset(&self, other: &ExceedanceSet) -> bool {
        self.bits() & !other.bits() == 0
    }

    pub fn any(&self) -> bool {
        self.bits() != 0
    }
}

impl fmt::Display for ExceedanceSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = uni_alerts(self).iter().map(|p| p.to_string()).collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Uni,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Current,
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlertDecision {
    pub level: AlertLevel,
    pub mode: Mode,
    pub source: Source,
    pub exceedances: ExceedanceSet,
    pub timestamp: Timestamp,
}

/// Values per ladder input in engineering units; `None` when the sensor
/// has not reported (or no forecast could be made).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ParameterValues {
    pub rain_intensity_mm_per_h: Option<f64>,
    pub pore_kpa: Option<f64>,
    pub displacement_mm: Option<f64>,
    pub inclinometer_deg: Option<f64>,
    pub tiltmeter_deg: Option<f64>,
}

/// Everything the engine looks at in one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Observation {
    pub current: ParameterValues,
    /// Maximum of the forecast horizon per parameter.
    pub predicted: ParameterValues,
    pub active_rain_event: Option<RainEvent>,
}

fn reaches(value: Option<f64>, mt: f64) -> bool {
    value.is_some_and(|v| v >= mt)
}

/// Rain is exceeded when intensity reaches its MT or when `caine_hit`
/// (the active event lies on or above the intensity-duration curve).
pub fn exceedances(values: &ParameterValues, th: &Thresholds, caine_hit: bool) -> ExceedanceSet {
    ExceedanceSet {
        rain: caine_hit || reaches(values.rain_intensity_mm_per_h, th.mt_rain_mm_per_h),
        pore: reaches(values.pore_kpa, th.mt_pore_kpa),
        displacement: reaches(values.displacement_mm, th.mt_displacement_mm),
        inclination: reaches(values.inclinometer_deg, th.mt_inclination_deg)
            || reaches(values.tiltmeter_deg, th.mt_inclination_deg),
    }
}

/// Multi-parameter ladder. Every non-green level requires rain.
pub fn multi_level(e: &ExceedanceSet) -> AlertLevel {
    match (e.rain, e.pore, e.displacement || e.inclination) {
        (true, true, true) => AlertLevel::Red,
        (true, true, false) => AlertLevel::Orange,
        (true, false, _) => AlertLevel::Yellow,
        (false, _, _) => AlertLevel::Green,
    }
}

/// Parameters individually at or above their MT.
pub fn uni_alerts(e: &ExceedanceSet) -> BTreeSet<Parameter> {
    [
        (e.rain, Parameter::Rain),
        (e.pore, Parameter::Pore),
        (e.displacement, Parameter::Displacement),
        (e.inclination, Parameter::Inclination),
    ]
    .into_iter()
    .filter_map(|(hit, p)| hit.then_some(p))
    .collect()
}

/// Uni-parameter decisions sit at the first warning level whenever any
/// parameter is exceeded.
pub fn uni_level(e: &ExceedanceSet) -> AlertLevel {
    if e.any() {
        AlertLevel::Yellow
    } else {
        AlertLevel::Green
    }
}

/// The four decisions, in the fixed order (current, uni), (current, multi),
/// (predicted, uni), (predicted, multi).
pub fn evaluate(obs: &Observation, th: &Thresholds, now: Timestamp) -> [AlertDecision; 4] {
    let caine_hit = obs
        .active_rain_event
        .as_ref()
        .and_then(exceeds_caine)
        .unwrap_or(false);
    let mut out = [AlertDecision {
        level: AlertLevel::Green,
        mode: Mode::Uni,
        source: Source::Current,
        exceedances: ExceedanceSet::default(),
        timestamp: now,
    }; 4];
    let sources = [(Source::Current, &obs.current), (Source::Predicted, &obs.predicted)];
    for (i, (source, values)) in sources.into_iter().enumerate() {
        if values.rain_intensity_mm_per_h.is_none() || values.pore_kpa.is_none() {
            log::debug!("{source:?} snapshot partial: {values:?}");
        }
        let e = exceedances(values, th, caine_hit);
        for (j, mode) in [Mode::Uni, Mode::Multi].into_iter().enumerate() {
            out[2 * i + j] = AlertDecision {
                level: match mode {
                    Mode::Uni => uni_level(&e),
                    Mode::Multi => multi_level(&e),
                },
                mode,
                source,
                exceedances: e,
                timestamp: now,
            };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct AlertState {
    pub active_level: AlertLevel,
    pub since: Timestamp,
    /// Start of the current run of lower candidates, if any.
    pub below_since: Option<Timestamp>,
}

/// One rendered alert. Serialises to the `alerts.ndjson` record; the pair
/// `(level, ts)` identifies it for de-duplication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub ts: Timestamp,
    pub level: AlertLevel,
    pub mode: Mode,
    pub source: Source,
    pub exceedances: ExceedanceSet,
    pub message: String,
}

impl Notification {
    pub fn key(&self) -> (AlertLevel, Timestamp) {
        (self.level, self.ts)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("notification serialises")
    }
}

fn render_message(level: AlertLevel, escalation: bool, d: &AlertDecision) -> String {
    let why = format!(
        "{} {} exceedance: {}",
        match d.source {
            Source::Current => "current",
            Source::Predicted => "predicted",
        },
        match d.mode {
            Mode::Uni => "uni-parameter",
            Mode::Multi => "multi-parameter",
        },
        d.exceedances
    );
    let action = match level {
        AlertLevel::Green => "all clear, monitoring only",
        AlertLevel::Yellow => "landslide possible soon; station beeper on, text/fax to local authority",
        AlertLevel::Orange => "landslide risk rising; SMS to authorities, keep away from the area",
        AlertLevel::Red => "landslide risk high; sound sirens and loudspeakers, evacuate, SMS to authorities",
    };
    let verb = if escalation { "raised to" } else { "lowered to" };
    format!("Alert {verb} {level}: {action} ({why})")
}

/// Folds one evaluation into the ladder state. Escalation is immediate;
/// de-escalation waits until the candidate level has stayed below the
/// active level for `hold_period_s`.
pub fn step_alert_state(
    state: &AlertState,
    decisions: &[AlertDecision],
    now: Timestamp,
    hold_period_s: u64,
) -> (AlertState, Vec<Notification>) {
    let Some(top) = decisions
        .iter()
        .reduce(|best, d| if d.level > best.level { d } else { best })
    else {
        return (*state, Vec::new());
    };
    let candidate = top.level;
    let notify = |escalation: bool| Notification {
        ts: now,
        level: candidate,
        mode: top.mode,
        source: top.source,
        exceedances: top.exceedances,
        message: render_message(candidate, escalation, top),
    };
    if candidate > state.active_level {
        let next = AlertState {
            active_level: candidate,
            since: now,
            below_since: None,
        };
        (next, vec![notify(true)])
    } else if candidate < state.active_level {
        let below_since = state.below_since.unwrap_or(now);
        if now.saturating_sub(below_since) >= hold_period_s {
            let next = AlertState {
                active_level: candidate,
                since: now,
                below_since: None,
            };
            (next, vec![notify(false)])
        } else {
            (
                AlertState {
                    below_since: Some(below_since),
                    ..*state
                },
                Vec::new(),
            )
        }
    } else {
        (
            AlertState {
                below_since: None,
                ..*state
            },
            Vec::new(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use AlertLevel::*;

    fn th() -> Thresholds {
        Thresholds {
            mt_rain_mm_per_h: 20.0,
            mt_pore_kpa: 50.0,
            mt_displacement_mm: 5.0,
            mt_inclination_deg: 2.0,
            prediction_horizon: 3,
            hold_period_s: 1800,
        }
    }

    fn set(rain: bool, pore: bool, displacement: bool, inclination: bool) -> ExceedanceSet {
        ExceedanceSet {
            rain,
            pore,
            displacement,
            inclination,
        }
    }

    #[test]
    fn multi_level_examples() {
        assert_eq!(multi_level(&set(false, false, false, false)), Green);
        assert_eq!(multi_level(&set(true, true, false, true)), Red);
        assert_eq!(multi_level(&set(false, true, true, true)), Green);
        assert_eq!(multi_level(&set(true, false, true, true)), Yellow);
        assert_eq!(multi_level(&set(true, true, false, false)), Orange);
    }

    #[test]
    fn uni_examples() {
        assert!(uni_alerts(&set(false, false, false, false)).is_empty());
        assert_eq!(
            uni_alerts(&set(false, true, false, false)),
            BTreeSet::from([Parameter::Pore])
        );
        assert_eq!(uni_alerts(&ExceedanceSet::from_bits(0xF)).len(), 4);
        assert_eq!(uni_level(&set(false, true, false, false)), Yellow);
    }

    #[test]
    fn bits_round_trip() {
        for b in 0..16u8 {
            assert_eq!(ExceedanceSet::from_bits(b).bits(), b);
        }
    }

    #[test]
    fn evaluate_all_below() {
        let obs = Observation {
            current: ParameterValues {
                rain_intensity_mm_per_h: Some(1.0),
                pore_kpa: Some(1.0),
                displacement_mm: Some(0.1),
                inclinometer_deg: Some(0.1),
                tiltmeter_deg: Some(0.1),
            },
            ..Default::default()
        };
        let d = evaluate(&obs, &th(), 7);
        assert!(d.iter().all(|d| d.level == Green && !d.exceedances.any() && d.timestamp == 7));
        let pairs: Vec<_> = d.iter().map(|d| (d.source, d.mode)).collect();
        assert_eq!(
            pairs,
            vec![
                (Source::Current, Mode::Uni),
                (Source::Current, Mode::Multi),
                (Source::Predicted, Mode::Uni),
                (Source::Predicted, Mode::Multi)
            ]
        );
    }

    #[test]
    fn evaluate_predicted_rain() {
        let obs = Observation {
            current: ParameterValues {
                rain_intensity_mm_per_h: Some(10.0),
                ..Default::default()
            },
            predicted: ParameterValues {
                rain_intensity_mm_per_h: Some(25.0),
                ..Default::default()
            },
            active_rain_event: None,
        };
        let d = evaluate(&obs, &th(), 0);
        assert_eq!(d[1].level, Green);
        assert_eq!(d[3].level, Yellow);
    }

    #[test]
    fn evaluate_caine_path_raises_rain() {
        let event = RainEvent {
            start: 0,
            end: 3600,
            total_mm: 14.82,
            duration_h: 1.0,
            mean_intensity_mm_per_h: 14.82,
        };
        let obs = Observation {
            current: ParameterValues {
                rain_intensity_mm_per_h: Some(14.82),
                ..Default::default()
            },
            active_rain_event: Some(event),
            ..Default::default()
        };
        let mut t = th();
        t.mt_rain_mm_per_h = 100.0;
        let d = evaluate(&obs, &t, 0);
        assert!(d[1].exceedances.rain);
        assert_eq!(d[1].level, Yellow);
        let below = Observation {
            active_rain_event: Some(RainEvent {
                mean_intensity_mm_per_h: 14.0,
                ..event
            }),
            ..obs
        };
        assert!(!evaluate(&below, &t, 0)[1].exceedances.rain);
    }

    #[test]
    fn inclination_is_either_instrument() {
        let v = ParameterValues {
            tiltmeter_deg: Some(2.0),
            inclinometer_deg: Some(0.0),
            ..Default::default()
        };
        assert!(exceedances(&v, &th(), false).inclination);
        let v = ParameterValues {
            inclinometer_deg: Some(2.5),
            ..Default::default()
        };
        assert!(exceedances(&v, &th(), false).inclination);
    }

    fn decisions(level: AlertLevel) -> [AlertDecision; 4] {
        let e = match level {
            Green => set(false, false, false, false),
            Yellow => set(true, false, false, false),
            Orange => set(true, true, false, false),
            Red => set(true, true, true, false),
        };
        let mut d = evaluate(&Observation::default(), &th(), 0);
        d[1].level = level;
        d[1].exceedances = e;
        d
    }

    #[test]
    fn escalation_is_immediate() {
        let s = AlertState::default();
        let (s, n) = step_alert_state(&s, &decisions(Yellow), 100, 1800);
        assert_eq!(s.active_level, Yellow);
        assert_eq!(s.since, 100);
        assert_eq!(n.len(), 1);
        assert_eq!(n[0].level, Yellow);
        assert_eq!(n[0].mode, Mode::Multi);
        let (s2, n) = step_alert_state(&s, &decisions(Yellow), 200, 1800);
        assert_eq!(s2, s);
        assert!(n.is_empty());
    }

    #[test]
    fn hysteresis_holds_then_releases() {
        let red = AlertState {
            active_level: Red,
            since: 0,
            below_since: None,
        };
        let (s, n) = step_alert_state(&red, &decisions(Green), 1000, 1800);
        assert_eq!(s.active_level, Red);
        assert!(n.is_empty());
        let (s, n) = step_alert_state(&s, &decisions(Green), 2799, 1800);
        assert_eq!(s.active_level, Red);
        assert!(n.is_empty());
        let (s, n) = step_alert_state(&s, &decisions(Green), 2800, 1800);
        assert_eq!(s.active_level, Green);
        assert_eq!(n.len(), 1);
        assert_eq!(n[0].level, Green);
        assert!(n[0].message.contains("all clear"));
    }

    #[test]
    fn recovery_during_hold_resets_timer() {
        let red = AlertState {
            active_level: Red,
            since: 0,
            below_since: None,
        };
        let (s, _) = step_alert_state(&red, &decisions(Green), 1000, 1800);
        let (s, _) = step_alert_state(&s, &decisions(Red), 1500, 1800);
        assert_eq!(s.below_since, None);
        let (s, n) = step_alert_state(&s, &decisions(Green), 2900, 1800);
        assert_eq!(s.active_level, Red);
        assert!(n.is_empty());
    }

    #[test]
    fn notification_json_shape() {
        let (_, n) = step_alert_state(&AlertState::default(), &decisions(Orange), 42, 0);
        let v: serde_json::Value = serde_json::from_str(&n[0].to_json()).unwrap();
        assert_eq!(v["ts"], 42);
        assert_eq!(v["level"], "Orange");
        assert_eq!(v["mode"], "multi");
        assert_eq!(v["source"], "current");
        assert_eq!(v["exceedances"]["pore"], true);
        assert!(v["message"].as_str().unwrap().contains("Orange"));
        let back: Notification = serde_json::from_value(v).unwrap();
        assert_eq!(back, n[0]);
    }

    #[test]
    fn threshold_validation() {
        assert!(th().validate().is_ok());
        let mut t = th();
        t.mt_pore_kpa = 0.0;
        assert!(t.validate().is_err());
        let mut t = th();
        t.prediction_horizon = 0;
        assert!(t.validate().is_err());
    }
}

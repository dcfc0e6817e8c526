use std::fs;
use std::path::Path;

use super::{evaluate, step_alert_state, AlertState, Dispatcher, Notification, Observation, ParameterValues, SinkResult, Thresholds, ALERTS_FILE};
use crate::analytics::{segment_events, ArPredictor, Predictor, RainEvent, RainSample};
use crate::domain::{SensorKind, Timestamp};
use crate::ingest::Repository;

const HOUR_S: u64 = 3600;

type Slot = fn(&mut ParameterValues) -> &mut Option<f64>;

/// Analysis knobs used when turning the store into an [`Observation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalysisSettings {
    pub ar_order: usize,
    /// Samples per parameter the AR model is refitted on.
    pub ar_window: usize,
    pub dry_gap_s: u64,
    pub antecedent_lookback_s: u64,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            ar_order: 2,
            ar_window: 48,
            dry_gap_s: 6 * HOUR_S,
            antecedent_lookback_s: 72 * HOUR_S,
        }
    }
}

/// Median spacing between consecutive distinct rain-gauge timestamps.
pub fn rain_interval(rain: &[RainSample]) -> Option<u64> {
    let mut gaps: Vec<u64> = rain
        .windows(2)
        .map(|w| w[1].0 - w[0].0)
        .filter(|g| *g > 0)
        .collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_unstable();
    Some(gaps[gaps.len() / 2])
}

/// Rain in `(at - window_s, at]` expressed in mm/h.
pub fn trailing_intensity(rain: &[RainSample], at: Timestamp, window_s: u64) -> f64 {
    let from = at.saturating_sub(window_s);
    let lo = rain.partition_point(|(t, _)| *t <= from);
    let hi = rain.partition_point(|(t, _)| *t <= at);
    let mm: f64 = rain[lo..hi].iter().map(|(_, v)| v).sum();
    mm * HOUR_S as f64 / window_s as f64
}

/// Rain events over the whole store, using the gauge's median reporting
/// interval.
pub fn rain_events(repo: &Repository, settings: &AnalysisSettings) -> Vec<RainEvent> {
    let rain = repo.series(SensorKind::RainGauge);
    let Some(interval) = rain_interval(&rain) else {
        return Vec::new();
    };
    segment_events(&rain, settings.dry_gap_s, interval).unwrap_or_else(|e| {
        log::warn!("rain segmentation failed: {e}");
        Vec::new()
    })
}

fn forecast_max(predictor: &dyn Predictor, history: &[f64], horizon: usize) -> Option<f64> {
    match predictor.forecast(history, horizon) {
        Ok(f) => f.into_iter().reduce(f64::max),
        Err(e) => {
            log::debug!("no forecast: {e}");
            None
        }
    }
}

/// Site-wide snapshot at `now`: latest value per parameter, the maximum of
/// the AR forecast over `horizon` steps, and the rain event in progress.
///
/// Rain intensity is the rain accumulated over the trailing hour (or one
/// reporting interval, if longer) scaled to mm/h; its forecast runs on the
/// series of those intensities evaluated at each rain-gauge sample.
pub fn observe(
    repo: &Repository,
    now: Timestamp,
    settings: &AnalysisSettings,
    horizon: usize,
) -> Observation {
    let predictor = ArPredictor {
        order: settings.ar_order,
        window: settings.ar_window,
    };
    let mut obs = Observation::default();

    let rain: Vec<RainSample> = repo
        .series(SensorKind::RainGauge)
        .into_iter()
        .filter(|(t, _)| *t <= now)
        .collect();
    if let Some(interval) = rain_interval(&rain) {
        let window = interval.max(HOUR_S);
        obs.current.rain_intensity_mm_per_h = Some(trailing_intensity(&rain, now, window));
        let tail = &rain[rain.len().saturating_sub(settings.ar_window)..];
        let history: Vec<f64> = tail
            .iter()
            .map(|(t, _)| trailing_intensity(&rain, *t, window))
            .collect();
        obs.predicted.rain_intensity_mm_per_h = forecast_max(&predictor, &history, horizon);
        match segment_events(&rain, settings.dry_gap_s, interval) {
            Ok(events) => {
                obs.active_rain_event = events
                    .last()
                    .filter(|e| now.saturating_sub(e.end) < settings.dry_gap_s)
                    .copied();
            }
            Err(e) => log::warn!("rain segmentation failed: {e}"),
        }
    }

    let slots: [(SensorKind, Slot); 4] = [
        (SensorKind::Piezometer, |v| &mut v.pore_kpa),
        (SensorKind::Extensometer, |v| &mut v.displacement_mm),
        (SensorKind::Inclinometer, |v| &mut v.inclinometer_deg),
        (SensorKind::Tiltmeter, |v| &mut v.tiltmeter_deg),
    ];
    for (sensor, slot) in slots {
        let history: Vec<f64> = repo
            .recent(sensor, settings.ar_window)
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        *slot(&mut obs.current) = history.last().copied();
        *slot(&mut obs.predicted) = forecast_max(&predictor, &history, horizon);
    }
    obs
}

/// Single consumer of store updates: evaluates, steps the ladder state and
/// dispatches any resulting notification.
pub struct AlertEngine {
    thresholds: Thresholds,
    settings: AnalysisSettings,
    state: AlertState,
    dispatcher: Dispatcher,
    timeline: Vec<Notification>,
    now: Option<Timestamp>,
}

impl AlertEngine {
    pub fn new(thresholds: Thresholds, settings: AnalysisSettings, dispatcher: Dispatcher) -> Self {
        AlertEngine {
            thresholds,
            settings,
            state: AlertState::default(),
            dispatcher,
            timeline: Vec::new(),
            now: None,
        }
    }

    /// Restores the active level from the last record of `alerts.ndjson` in
    /// `dir`, so a restarted station does not re-announce it.
    pub fn resume_from(mut self, dir: &Path) -> Self {
        let Ok(text) = fs::read_to_string(dir.join(ALERTS_FILE)) else {
            return self;
        };
        let last = text
            .lines()
            .rev()
            .find_map(|l| serde_json::from_str::<Notification>(l).ok());
        if let Some(n) = last {
            self.state = AlertState {
                active_level: n.level,
                since: n.ts,
                below_since: None,
            };
            self.now = Some(n.ts);
        }
        self
    }

    pub fn state(&self) -> &AlertState {
        &self.state
    }

    pub fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }

    pub fn settings(&self) -> &AnalysisSettings {
        &self.settings
    }

    /// Notifications raised so far by this engine, oldest first.
    pub fn timeline(&self) -> &[Notification] {
        &self.timeline
    }

    /// Evaluates the store at `now`. Evaluation time never runs backwards:
    /// late retransmissions are judged at the newest time already stored.
    pub fn evaluate(
        &mut self,
        repo: &Repository,
        now: Timestamp,
    ) -> Vec<(Notification, Vec<SinkResult>)> {
        let now = [self.now, repo.max_timestamp()].into_iter().flatten().fold(now, u64::max);
        self.now = Some(now);
        let obs = observe(repo, now, &self.settings, self.thresholds.prediction_horizon);
        let decisions = evaluate(&obs, &self.thresholds, now);
        let (state, notes) = step_alert_state(&self.state, &decisions, now, self.thresholds.hold_period_s);
        self.state = state;
        notes
            .into_iter()
            .map(|n| {
                let results = self.dispatcher.dispatch(&n);
                self.timeline.push(n.clone());
                (n, results)
            })
            .collect()
    }
}

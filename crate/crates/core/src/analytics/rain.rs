use serde::Serialize;

use super::AnalyticsError;
use crate::domain::Timestamp;

/// `(timestamp, mm)`: rain accumulated over the reporting interval ending at
/// `timestamp`.
pub type RainSample = (Timestamp, f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RainEvent {
    pub start: Timestamp,
    pub end: Timestamp,
    pub total_mm: f64,
    pub duration_h: f64,
    pub mean_intensity_mm_per_h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RainfallFeatures {
    pub total_mm: f64,
    pub antecedent_mm: f64,
    /// `(duration_h, mean_intensity_mm_per_h)` of the event still in
    /// progress at `now`, if any.
    pub active_event: Option<(f64, f64)>,
}

fn check_series(rain: &[RainSample]) -> Result<(), AnalyticsError> {
    if let Some(w) = rain.windows(2).find(|w| w[1].0 < w[0].0) {
        return Err(AnalyticsError::InvalidInput(format!(
            "rain series not time-ordered: {} after {}",
            w[1].0, w[0].0
        )));
    }
    if let Some((t, mm)) = rain.iter().find(|(_, mm)| !mm.is_finite() || *mm < 0.0) {
        return Err(AnalyticsError::InvalidInput(format!(
            "rain amount {mm} at {t} must be finite and non-negative"
        )));
    }
    Ok(())
}

/// Splits a rain series into events. A wet sample at `t` covers
/// `[t - interval_s, t]`; wet samples whose covered spans are separated by
/// less than `dry_gap_s` of dry time belong to the same event.
pub fn segment_events(
    rain: &[RainSample],
    dry_gap_s: u64,
    interval_s: u64,
) -> Result<Vec<RainEvent>, AnalyticsError> {
    if dry_gap_s == 0 || interval_s == 0 {
        return Err(AnalyticsError::InvalidInput(
            "dry gap and reporting interval must be positive".into(),
        ));
    }
    check_series(rain)?;

    struct Open {
        start: Timestamp,
        end: Timestamp,
        total: f64,
    }
    let close = |o: Open| {
        let duration_h = (o.end - o.start) as f64 / 3600.0;
        RainEvent {
            start: o.start,
            end: o.end,
            total_mm: o.total,
            duration_h,
            mean_intensity_mm_per_h: o.total / duration_h,
        }
    };

    let mut events = Vec::new();
    let mut open: Option<Open> = None;
    for &(t, mm) in rain.iter().filter(|(_, mm)| *mm > 0.0) {
        let covered_from = t.saturating_sub(interval_s);
        open = match open {
            Some(mut o) if covered_from.saturating_sub(o.end) < dry_gap_s => {
                o.end = o.end.max(t);
                o.total += mm;
                Some(o)
            }
            prev => {
                if let Some(o) = prev {
                    events.push(close(o));
                }
                Some(Open {
                    start: covered_from,
                    end: t.max(covered_from + 1),
                    total: mm,
                })
            }
        };
    }
    events.extend(open.map(close));
    Ok(events)
}

/// Rain summed over `now - lookback_s <= t <= now`.
pub fn antecedent_rainfall(rain: &[RainSample], now: Timestamp, lookback_s: u64) -> f64 {
    let from = now.saturating_sub(lookback_s);
    rain.iter()
        .filter(|(t, _)| (from..=now).contains(t))
        .map(|(_, mm)| mm)
        .sum()
}

/// Features at `now` over the supplied series. The last event is active if
/// its end lies within `dry_gap_s` of `now`.
pub fn rainfall_features(
    rain: &[RainSample],
    now: Timestamp,
    lookback_s: u64,
    dry_gap_s: u64,
    interval_s: u64,
) -> Result<RainfallFeatures, AnalyticsError> {
    let upto: Vec<RainSample> = rain.iter().copied().filter(|(t, _)| *t <= now).collect();
    let events = segment_events(&upto, dry_gap_s, interval_s)?;
    let active_event = events
        .last()
        .filter(|e| now.saturating_sub(e.end) < dry_gap_s)
        .map(|e| (e.duration_h, e.mean_intensity_mm_per_h));
    Ok(RainfallFeatures {
        total_mm: upto.iter().map(|(_, mm)| mm).sum(),
        antecedent_mm: antecedent_rainfall(&upto, now, lookback_s),
        active_event,
    })
}

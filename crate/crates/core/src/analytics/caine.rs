use super::{AnalyticsError, RainEvent};

pub const CAINE_COEFFICIENT: f64 = 14.82;
pub const CAINE_EXPONENT: f64 = -0.39;
/// Open lower bound of the duration domain, hours.
pub const CAINE_D_MIN_H: f64 = 0.167;
/// Open upper bound of the duration domain, hours.
pub const CAINE_D_MAX_H: f64 = 500.0;

/// Global intensity-duration threshold `I = 14.82 * D^-0.39` (mm/h) for a
/// rainfall duration `D` in hours, defined on the open interval
/// `0.167 < D < 500`.
pub fn caine_threshold(duration_h: f64) -> Result<f64, AnalyticsError> {
    if !(duration_h > CAINE_D_MIN_H && duration_h < CAINE_D_MAX_H) {
        return Err(AnalyticsError::OutOfDomain(duration_h));
    }
    Ok(CAINE_COEFFICIENT * duration_h.powf(CAINE_EXPONENT))
}

/// `Some(true)` when the event's mean intensity reaches or exceeds the
/// curve, `None` when its duration falls outside the curve's domain.
pub fn exceeds_caine(event: &RainEvent) -> Option<bool> {
    caine_threshold(event.duration_h)
        .ok()
        .map(|limit| event.mean_intensity_mm_per_h >= limit)
}

//! Rainfall features, the Caine intensity-duration threshold and
//! autoregressive value prediction.

mod ar;
mod caine;
mod rain;

use thiserror::Error;

pub use ar::{ar_fit, ar_forecast, ArModel, ArPredictor, Predictor};
pub use caine::{caine_threshold, exceeds_caine, CAINE_COEFFICIENT, CAINE_D_MAX_H, CAINE_D_MIN_H, CAINE_EXPONENT};
pub use rain::{
    antecedent_rainfall, rainfall_features, segment_events, RainEvent, RainSample,
    RainfallFeatures,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("duration {0} h is outside the threshold domain (0.167, 500)")]
    OutOfDomain(f64),
    #[error("insufficient data: need at least {needed} values, got {got}")]
    InsufficientData { needed: usize, got: usize },
}

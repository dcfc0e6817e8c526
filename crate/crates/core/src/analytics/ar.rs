use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::AnalyticsError;

/// `x_t = intercept + sum_i coefficients[i] * x_{t-1-i}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArModel {
    pub order: usize,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub fit_residual_rms: f64,
}

impl ArModel {
    /// One-step prediction from the most recent `order` values (oldest
    /// first, newest last).
    fn predict_next(&self, tail: &[f64]) -> f64 {
        self.coefficients
            .iter()
            .zip(tail.iter().rev())
            .fold(self.intercept, |acc, (phi, x)| acc + phi * x)
    }
}

/// Least-squares AR(p) fit with intercept.
///
/// The regression is solved on mean-centred columns, so the intercept is
/// recovered as `mean(y) - phi . mean(X)`. Rank-deficient designs get the
/// minimum-norm coefficient vector; a constant series therefore yields
/// `phi = 0` and an intercept equal to the constant.
pub fn ar_fit(series: &[f64], p: usize) -> Result<ArModel, AnalyticsError> {
    if p == 0 {
        return Err(AnalyticsError::InvalidInput("AR order must be positive".into()));
    }
    let needed = 2 * p + 2;
    if series.len() < needed {
        return Err(AnalyticsError::InsufficientData {
            needed,
            got: series.len(),
        });
    }
    if let Some(i) = series.iter().position(|x| !x.is_finite()) {
        return Err(AnalyticsError::InvalidInput(format!(
            "non-finite value {} at index {i}",
            series[i]
        )));
    }

    let rows = series.len() - p;
    let y = DVector::from_iterator(rows, series[p..].iter().copied());
    let x = DMatrix::from_fn(rows, p, |r, c| series[p + r - 1 - c]);

    let y_mean = y.mean();
    let x_means: Vec<f64> = (0..p).map(|c| x.column(c).mean()).collect();
    let yc = y.add_scalar(-y_mean);
    let mut xc = x.clone();
    for (c, m) in x_means.iter().enumerate() {
        xc.column_mut(c).add_scalar_mut(-m);
    }

    let svd = xc.svd(true, true);
    let sv_max = svd.singular_values.max();
    let phi = if sv_max == 0.0 {
        DVector::zeros(p)
    } else {
        let eps = sv_max * rows.max(p) as f64 * f64::EPSILON;
        svd.solve(&yc, eps)
            .map_err(|e| AnalyticsError::InvalidInput(format!("least-squares solve failed: {e}")))?
    };
    let intercept = y_mean - phi.iter().zip(&x_means).map(|(a, b)| a * b).sum::<f64>();

    let model = ArModel {
        order: p,
        coefficients: phi.iter().copied().collect(),
        intercept,
        fit_residual_rms: 0.0,
    };
    let sse: f64 = (p..series.len())
        .map(|t| {
            let e = series[t] - model.predict_next(&series[t - p..t]);
            e * e
        })
        .sum();
    Ok(ArModel {
        fit_residual_rms: (sse / rows as f64).sqrt(),
        ..model
    })
}

/// Recursive `horizon`-step forecast continuing `history`.
pub fn ar_forecast(
    model: &ArModel,
    history: &[f64],
    horizon: usize,
) -> Result<Vec<f64>, AnalyticsError> {
    if horizon == 0 {
        return Err(AnalyticsError::InvalidInput("horizon must be positive".into()));
    }
    if history.len() < model.order {
        return Err(AnalyticsError::InsufficientData {
            needed: model.order,
            got: history.len(),
        });
    }
    let mut window: Vec<f64> = history[history.len() - model.order..].to_vec();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let next = model.predict_next(&window);
        out.push(next);
        window.remove(0);
        window.push(next);
    }
    Ok(out)
}

/// Per-parameter value predictor used by the alert engine.
pub trait Predictor: Send + Sync {
    fn forecast(&self, history: &[f64], horizon: usize) -> Result<Vec<f64>, AnalyticsError>;
}

/// Refits an AR(`order`) model on the most recent `window` values each
/// time it is asked for a forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArPredictor {
    pub order: usize,
    pub window: usize,
}

impl Predictor for ArPredictor {
    fn forecast(&self, history: &[f64], horizon: usize) -> Result<Vec<f64>, AnalyticsError> {
        let tail = &history[history.len().saturating_sub(self.window)..];
        let model = ar_fit(tail, self.order)?;
        ar_forecast(&model, tail, horizon)
    }
}

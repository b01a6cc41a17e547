//! Held-out accuracy: RMSE and the Gaussian CRPS (lower is better for both).

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub rmse: f64,
    pub crps: f64,
    pub n_test: usize,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{a} observations but {b} predictions"
        )));
    }
    if a == 0 {
        return Err(Error::EmptyData);
    }
    Ok(())
}

pub fn rmse(y_test: &[f64], mean_pred: &[f64]) -> Result<f64> {
    check_lengths(y_test.len(), mean_pred.len())?;
    let ss: f64 = y_test
        .iter()
        .zip(mean_pred)
        .map(|(y, m)| (y - m) * (y - m))
        .sum();
    Ok((ss / y_test.len() as f64).sqrt())
}

/// CRPS of a single Gaussian forecast `N(mu, sd²)` at `y`.
pub fn crps_point(y: f64, mu: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return (y - mu).abs();
    }
    let std = Normal::standard();
    let z = (y - mu) / sd;
    sd * (z * (2.0 * std.cdf(z) - 1.0) + 2.0 * std.pdf(z) - std::f64::consts::PI.sqrt().recip())
}

/// Mean CRPS over the test points. A zero standard deviation is scored as a
/// point forecast, `|y - μ|`.
pub fn crps(y_test: &[f64], mean_pred: &[f64], sd_pred: &[f64]) -> Result<f64> {
    check_lengths(y_test.len(), mean_pred.len())?;
    check_lengths(y_test.len(), sd_pred.len())?;
    if let Some(s) = sd_pred.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Domain(format!(
            "predictive standard deviation {s} is negative"
        )));
    }
    let total: f64 = y_test
        .iter()
        .zip(mean_pred)
        .zip(sd_pred)
        .map(|((&y, &m), &s)| crps_point(y, m, s))
        .sum();
    Ok(total / y_test.len() as f64)
}

pub fn assess(y_test: &[f64], mean_pred: &[f64], sd_pred: &[f64]) -> Result<Assessment> {
    Ok(Assessment {
        rmse: rmse(y_test, mean_pred)?,
        crps: crps(y_test, mean_pred, sd_pred)?,
        n_test: y_test.len(),
    })
}

//! Weight-function family and the Hájek-type IPW point estimator.
//!
//! Each estimand is a tilting function `w(e)` of the propensity score:
//! `w ≡ 1` targets the ATE, `w(e) = e` the ATT, and `w(e) = e(1−e)` the ATO.
//! The per-unit balancing weight is `W = w(e) / (Te + (1−T)(1−e))` and the
//! point estimate is the difference of arm-wise weighted outcome means,
//! each normalized by its own total weight.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::propensity::Dataset;

#[derive(Debug, Error)]
pub enum EstimandError {
    #[error("propensity score {0} is outside (0, 1)")]
    OutOfRange(f64),
    #[error("treatment arm {0} has zero total weight")]
    EmptyArm(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Target estimand, determining the weight function and its derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    Ate,
    Att,
    Ato,
}

impl Estimand {
    pub const ALL: [Estimand; 3] = [Estimand::Ate, Estimand::Att, Estimand::Ato];

    pub fn as_str(self) -> &'static str {
        match self {
            Estimand::Ate => "ate",
            Estimand::Att => "att",
            Estimand::Ato => "ato",
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Estimand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ate" => Ok(Estimand::Ate),
            "att" => Ok(Estimand::Att),
            "ato" => Ok(Estimand::Ato),
            other => Err(format!("unknown estimand '{other}' (expected ate, att, or ato)")),
        }
    }
}

fn check_range(e: f64) -> Result<(), EstimandError> {
    if e > 0.0 && e < 1.0 {
        Ok(())
    } else {
        Err(EstimandError::OutOfRange(e))
    }
}

/// Weight function `w(e)`: 1 for ATE, `e` for ATT, `e(1−e)` for ATO.
pub fn weight_value(estimand: Estimand, e: f64) -> Result<f64, EstimandError> {
    check_range(e)?;
    Ok(match estimand {
        Estimand::Ate => 1.0,
        Estimand::Att => e,
        Estimand::Ato => e * (1.0 - e),
    })
}

/// Derivative `w′(e)`: 0 for ATE, 1 for ATT, `1−2e` for ATO.
pub fn weight_derivative(estimand: Estimand, e: f64) -> Result<f64, EstimandError> {
    check_range(e)?;
    let d = match estimand {
        Estimand::Ate => 0.0,
        Estimand::Att => 1.0,
        Estimand::Ato => 1.0 - 2.0 * e,
    };
    #[cfg(debug_assertions)]
    {
        let h = 1e-6;
        if e - h > 0.0 && e + h < 1.0 {
            let fd = (weight_value(estimand, e + h).unwrap()
                - weight_value(estimand, e - h).unwrap())
                / (2.0 * h);
            debug_assert!(
                (fd - d).abs() < 1e-5,
                "derivative table disagrees with finite difference: {d} vs {fd}"
            );
        }
    }
    Ok(d)
}

/// Per-unit balancing weight `w(e)/e` for treated units, `w(e)/(1−e)` for
/// controls.
pub fn unit_weight(estimand: Estimand, e: f64, treated: bool) -> Result<f64, EstimandError> {
    check_range(e)?;
    let w = weight_value(estimand, e)?;
    Ok(if treated { w / e } else { w / (1.0 - e) })
}

/// Point estimate of a weighted average treatment effect.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WateEstimate {
    /// Weighted mean outcome among the treated.
    pub mu1: f64,
    /// Weighted mean outcome among the controls.
    pub mu0: f64,
    /// Contrast `mu1 − mu0`.
    pub tau: f64,
    pub n: usize,
    pub estimand: Estimand,
}

/// Hájek-type IPW estimate: arm-wise weighted outcome means normalized by
/// the total weight in each arm.
pub fn estimate_wate(
    data: &Dataset,
    fitted: &[f64],
    estimand: Estimand,
) -> Result<WateEstimate, EstimandError> {
    let n = data.n();
    if fitted.len() != n {
        return Err(EstimandError::DimensionMismatch(format!(
            "{n} units but {} fitted scores",
            fitted.len()
        )));
    }
    let mut sw1 = 0.0;
    let mut swy1 = 0.0;
    let mut sw0 = 0.0;
    let mut swy0 = 0.0;
    for i in 0..n {
        let treated = data.treated(i);
        let w = unit_weight(estimand, fitted[i], treated)?;
        let y = data.outcomes()[i];
        if treated {
            sw1 += w;
            swy1 += w * y;
        } else {
            sw0 += w;
            swy0 += w * y;
        }
    }
    if sw1 <= 0.0 {
        return Err(EstimandError::EmptyArm("treated"));
    }
    if sw0 <= 0.0 {
        return Err(EstimandError::EmptyArm("control"));
    }
    let mu1 = swy1 / sw1;
    let mu0 = swy0 / sw0;
    Ok(WateEstimate { mu1, mu0, tau: mu1 - mu0, n, estimand })
}

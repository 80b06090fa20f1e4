//! Conservativeness diagnostics for the simple (first-term-only) confidence
//! interval.
//!
//! The simple CI is conservative exactly when the propensity-estimation
//! correction `(1,−1)(δA11⁻¹δᵀ − B12A11⁻¹B12ᵀ)(1,−1)ᵀ` is negative. For the
//! ATT and ATO this module evaluates a sufficient moment inequality
//! `γ·uᵀA11⁻¹u ≤ vᵀA11⁻¹v` (γ = 4 under the Neyman null, 16 otherwise),
//! the shape functions behind it, and positive-definiteness conditions for
//! linear continuous-outcome models with proportional interaction effects.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimands::{weight_value, Estimand, EstimandError, WateEstimate};
use crate::linalg::{min_eig_sym, Cholesky, LinalgError, Matrix};
use crate::propensity::Dataset;
use crate::variance::VarianceComponents;

#[derive(Debug, Error)]
pub enum CriteriaError {
    #[error("criterion is not defined for estimand {0}")]
    UnsupportedEstimand(Estimand),
    #[error("no sufficient condition exists for gamma {0} (requires gamma > 1)")]
    OutOfDomain(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Estimand(#[from] EstimandError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Null hypothesis the analyst is willing to assume; selects the constant γ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hypothesis {
    /// Neyman null `τ_w = 0`; γ = 4.
    #[serde(rename = "nn")]
    NeymanNull,
    /// No null assumed; the conservative default γ = 16.
    #[default]
    Other,
}

impl Hypothesis {
    pub fn gamma(self) -> f64 {
        match self {
            Hypothesis::NeymanNull => 4.0,
            Hypothesis::Other => 16.0,
        }
    }
}

impl std::str::FromStr for Hypothesis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "nn" => Ok(Hypothesis::NeymanNull),
            "other" => Ok(Hypothesis::Other),
            v => Err(format!("unknown hypothesis '{v}' (expected nn or other)")),
        }
    }
}

/// Outcome of the sufficient-condition check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionReport {
    pub estimand: Estimand,
    pub gamma: f64,
    /// `γ·uᵀA11⁻¹u`, non-negative.
    pub lhs: f64,
    /// `vᵀA11⁻¹v`, non-negative.
    pub rhs: f64,
    /// `lhs ≤ rhs`; when true the simple CI is expected to be conservative.
    pub satisfied: bool,
    /// The inequality is proven under non-negative covariate support; false
    /// means a covariate column takes negative values and the verdict is
    /// only heuristic.
    pub positivity_precondition_met: bool,
}

/// Propensity-estimation correction to the variance numerator:
/// `(δ₁−δ₂)ᵀA11⁻¹(δ₁−δ₂) − (b₁−b₂)ᵀA11⁻¹(b₁−b₂)`.
///
/// Negative means the simple CI is conservative at this sample. For the ATE
/// the value is structurally non-positive (δ = 0).
pub fn correction_term(c: &VarianceComponents) -> Result<f64, CriteriaError> {
    let chol = Cholesky::new(&c.a11)?;
    let d: Vec<f64> = c.delta1.iter().zip(&c.delta2).map(|(a, b)| a - b).collect();
    let g: Vec<f64> = c.b1.iter().zip(&c.b2).map(|(a, b)| a - b).collect();
    let dq: f64 = d.iter().zip(chol.solve(&d)?).map(|(a, b)| a * b).sum();
    let gq: f64 = g.iter().zip(chol.solve(&g)?).map(|(a, b)| a * b).sum();
    Ok(dq - gq)
}

/// Evaluates the sufficient conservativeness inequality for the ATT or ATO.
///
/// ATT: `u = n⁻¹Σ ê(1−ê)X`, `v = n⁻¹Σ (1−T)(ê/(1−ê))(Y−μ̂₀)X`.
/// ATO: `u = n⁻¹Σ ê(1−ê)(1−2ê)X`,
///      `v = n⁻¹Σ [T(1−ê)ê(Y−μ̂₁) + (1−T)ê(1−ê)(Y−μ̂₀)]X`.
pub fn evaluate_criterion(
    data: &Dataset,
    fitted: &[f64],
    est: &WateEstimate,
    hypothesis: Hypothesis,
) -> Result<CriterionReport, CriteriaError> {
    let estimand = est.estimand;
    if estimand == Estimand::Ate {
        return Err(CriteriaError::UnsupportedEstimand(estimand));
    }
    let n = data.n();
    let p = data.p();
    if fitted.len() != n {
        return Err(CriteriaError::DimensionMismatch(format!(
            "{n} units but {} fitted scores",
            fitted.len()
        )));
    }

    let mut a11 = Matrix::zeros(p, p);
    let mut u = vec![0.0; p];
    let mut v = vec![0.0; p];
    for i in 0..n {
        let e = fitted[i];
        // validates e ∈ (0,1)
        weight_value(estimand, e)?;
        let x = data.covariate_row(i);
        let y = data.outcomes()[i];
        let ee = e * (1.0 - e);
        a11.add_scaled_outer(x, ee);
        let cu = match estimand {
            Estimand::Att => ee,
            Estimand::Ato => ee * (1.0 - 2.0 * e),
            Estimand::Ate => unreachable!(),
        };
        let cv = match estimand {
            Estimand::Att => {
                if data.treated(i) {
                    0.0
                } else {
                    e / (1.0 - e) * (y - est.mu0)
                }
            }
            Estimand::Ato => {
                if data.treated(i) {
                    ee * (y - est.mu1)
                } else {
                    ee * (y - est.mu0)
                }
            }
            Estimand::Ate => unreachable!(),
        };
        for j in 0..p {
            u[j] += cu * x[j];
            v[j] += cv * x[j];
        }
    }
    let inv_n = 1.0 / n as f64;
    a11.scale(inv_n);
    for j in 0..p {
        u[j] *= inv_n;
        v[j] *= inv_n;
    }

    let chol = Cholesky::new(&a11)?;
    let gamma = hypothesis.gamma();
    let uq: f64 = u.iter().zip(chol.solve(&u)?).map(|(a, b)| a * b).sum();
    let vq: f64 = v.iter().zip(chol.solve(&v)?).map(|(a, b)| a * b).sum();
    let lhs = gamma * uq;
    let rhs = vq;
    Ok(CriterionReport {
        estimand,
        gamma,
        lhs,
        rhs,
        satisfied: lhs <= rhs,
        positivity_precondition_met: data.covariates_nonnegative(),
    })
}

/// Shape function underlying the criterion moment vector: `e(1−e)` for the
/// ATT, `e(1−e)(1−2e)` for the ATO.
pub fn shape_function(estimand: Estimand, e: f64) -> Result<f64, CriteriaError> {
    if !(e > 0.0 && e < 1.0) {
        return Err(EstimandError::OutOfRange(e).into());
    }
    match estimand {
        Estimand::Att => Ok(e * (1.0 - e)),
        Estimand::Ato => Ok(e * (1.0 - e) * (1.0 - 2.0 * e)),
        Estimand::Ate => Err(CriteriaError::UnsupportedEstimand(estimand)),
    }
}

/// Moment matrices feeding the continuous-outcome conditions; can be built
/// from data or supplied in closed form.
#[derive(Debug, Clone)]
pub struct ContinuousMoments {
    /// `E[e(1−e)X⊗2]`.
    pub a11: Matrix,
    /// `E[eX⊗2]`.
    pub e_second_moment: Matrix,
    /// `E[e²(1−e)X⊗2]`.
    pub e2_one_minus_e_second_moment: Matrix,
}

impl ContinuousMoments {
    /// Empirical ê-weighted sample moments.
    pub fn from_fitted(data: &Dataset, fitted: &[f64]) -> Result<Self, CriteriaError> {
        let n = data.n();
        let p = data.p();
        if fitted.len() != n {
            return Err(CriteriaError::DimensionMismatch(format!(
                "{n} units but {} fitted scores",
                fitted.len()
            )));
        }
        let mut a11 = Matrix::zeros(p, p);
        let mut m_e = Matrix::zeros(p, p);
        let mut m_e2 = Matrix::zeros(p, p);
        for i in 0..n {
            let e = fitted[i];
            if !(e > 0.0 && e < 1.0) {
                return Err(EstimandError::OutOfRange(e).into());
            }
            let x = data.covariate_row(i);
            a11.add_scaled_outer(x, e * (1.0 - e));
            m_e.add_scaled_outer(x, e);
            m_e2.add_scaled_outer(x, e * e * (1.0 - e));
        }
        let inv_n = 1.0 / n as f64;
        a11.scale(inv_n);
        m_e.scale(inv_n);
        m_e2.scale(inv_n);
        Ok(Self { a11, e_second_moment: m_e, e2_one_minus_e_second_moment: m_e2 })
    }
}

/// Result of a continuous-outcome positive-definiteness check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContinuousConditionResult {
    pub holds: bool,
    /// Smallest eigenvalue of the symmetrized condition matrix.
    pub min_eig: f64,
}

/// Sufficient conditions for conservativeness under linear outcome models
/// with proportional interaction (`β_x1 = γ_het β_x0`).
///
/// ATT: `A11⁻¹E[eX⊗2] − 2(1−γ)I ≻ 0` for any real `γ_het`.
/// ATO: `(2(γ−2)/(3(γ−1)))I − A11⁻¹E[e²(1−e)X⊗2] ≻ 0`, defined only for
/// `γ_het > 1`; no usable condition exists at or below 1.
///
/// Positive definiteness of the non-symmetric products is defined through
/// the symmetric part, since `xᵀMx = xᵀ((M+Mᵀ)/2)x`.
pub fn continuous_condition(
    moments: &ContinuousMoments,
    estimand: Estimand,
    gamma_het: f64,
) -> Result<ContinuousConditionResult, CriteriaError> {
    let p = moments.a11.rows();
    let chol = Cholesky::new(&moments.a11)?;
    let target = match estimand {
        Estimand::Att => &moments.e_second_moment,
        Estimand::Ato => {
            if gamma_het <= 1.0 {
                return Err(CriteriaError::OutOfDomain(gamma_het));
            }
            &moments.e2_one_minus_e_second_moment
        }
        Estimand::Ate => return Err(CriteriaError::UnsupportedEstimand(estimand)),
    };
    if !target.is_square() || target.rows() != p {
        return Err(CriteriaError::DimensionMismatch("moment matrices must share shape".into()));
    }

    // columns of A11⁻¹ * target
    let mut product = Matrix::zeros(p, p);
    let mut col = vec![0.0; p];
    for j in 0..p {
        for i in 0..p {
            col[i] = target[(i, j)];
        }
        let solved = chol.solve(&col)?;
        for i in 0..p {
            product[(i, j)] = solved[i];
        }
    }

    let shift = match estimand {
        Estimand::Att => -2.0 * (1.0 - gamma_het),
        Estimand::Ato => {
            product.scale(-1.0);
            2.0 * (gamma_het - 2.0) / (3.0 * (gamma_het - 1.0))
        }
        Estimand::Ate => unreachable!(),
    };
    for i in 0..p {
        product[(i, i)] += shift;
    }
    let min_eig = min_eig_sym(&product)?;
    Ok(ContinuousConditionResult { holds: min_eig > 0.0, min_eig })
}

//! Logistic propensity-score model fitted by maximum likelihood.
//!
//! The fit solves the score equation `Σᵢ Xᵢ(Tᵢ − expit(Xᵢᵀα)) = 0` by
//! Newton-Raphson with step-halving. No trimming or clipping is applied to
//! the fitted scores; degenerate fits fail loudly instead.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{solve_spd, LinalgError, Matrix};

/// Convergence threshold on the score sup-norm, relative to `n`.
const SCORE_TOL_PER_UNIT: f64 = 1e-10;
/// Fitted probabilities this close to 0 or 1 indicate separation.
const BOUNDARY_TOL: f64 = 1e-12;
const MAX_ITERATIONS: usize = 100;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Error)]
pub enum PropensityError {
    #[error("logistic fit did not converge ({0}); data may be separated")]
    Separation(String),
    #[error("covariate matrix is rank deficient: {0}")]
    RankDeficient(LinalgError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
}

/// Observed sample: treatment indicator, outcome, and covariate rows whose
/// first entry is the intercept.
#[derive(Debug, Clone)]
pub struct Dataset {
    n: usize,
    p: usize,
    treatment: Vec<u8>,
    outcome: Vec<f64>,
    covariates: Vec<f64>, // row-major n x p
}

impl Dataset {
    /// Builds a dataset from a row-major covariate matrix that already
    /// contains the intercept column.
    pub fn new(
        treatment: Vec<u8>,
        outcome: Vec<f64>,
        covariates: Vec<f64>,
        p: usize,
    ) -> Result<Self, PropensityError> {
        let n = treatment.len();
        if n < 2 {
            return Err(PropensityError::InvalidData(format!("need at least 2 units, got {n}")));
        }
        if outcome.len() != n {
            return Err(PropensityError::InvalidData(format!(
                "{n} treatments but {} outcomes",
                outcome.len()
            )));
        }
        if p == 0 || covariates.len() != n * p {
            return Err(PropensityError::InvalidData(format!(
                "covariate matrix must be {n}x{p}, got {} entries",
                covariates.len()
            )));
        }
        if treatment.iter().any(|&t| t > 1) {
            return Err(PropensityError::InvalidData("treatment must be 0 or 1".into()));
        }
        if outcome.iter().any(|y| !y.is_finite()) || covariates.iter().any(|x| !x.is_finite()) {
            return Err(PropensityError::InvalidData("entries must be finite".into()));
        }
        for i in 0..n {
            if covariates[i * p] != 1.0 {
                return Err(PropensityError::InvalidData(format!(
                    "covariate row {i} does not start with the intercept 1"
                )));
            }
        }
        Ok(Self { n, p, treatment, outcome, covariates })
    }

    /// Builds a dataset from raw covariate rows, prepending the intercept.
    pub fn with_intercept(
        treatment: Vec<u8>,
        outcome: Vec<f64>,
        raw_rows: &[Vec<f64>],
    ) -> Result<Self, PropensityError> {
        let n = treatment.len();
        if raw_rows.len() != n {
            return Err(PropensityError::InvalidData(format!(
                "{n} treatments but {} covariate rows",
                raw_rows.len()
            )));
        }
        let k = raw_rows.first().map_or(0, |r| r.len());
        if raw_rows.iter().any(|r| r.len() != k) {
            return Err(PropensityError::InvalidData("ragged covariate rows".into()));
        }
        let p = k + 1;
        let mut covariates = Vec::with_capacity(n * p);
        for row in raw_rows {
            covariates.push(1.0);
            covariates.extend_from_slice(row);
        }
        Self::new(treatment, outcome, covariates, p)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of covariate columns, intercept included.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcome
    }

    pub fn covariate_row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.p..(i + 1) * self.p]
    }

    pub fn treated(&self, i: usize) -> bool {
        self.treatment[i] == 1
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&t| t == 1).count()
    }

    pub fn both_arms_nonempty(&self) -> bool {
        let t = self.n_treated();
        t > 0 && t < self.n
    }

    /// True when every outcome is 0 or 1.
    pub fn outcome_is_binary(&self) -> bool {
        self.outcome.iter().all(|&y| y == 0.0 || y == 1.0)
    }

    /// True when every covariate entry is non-negative.
    pub fn covariates_nonnegative(&self) -> bool {
        self.covariates.iter().all(|&x| x >= 0.0)
    }

    /// Returns the same data with rows reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, PropensityError> {
        if perm.len() != self.n {
            return Err(PropensityError::InvalidData("permutation length mismatch".into()));
        }
        let mut treatment = Vec::with_capacity(self.n);
        let mut outcome = Vec::with_capacity(self.n);
        let mut covariates = Vec::with_capacity(self.n * self.p);
        for &i in perm {
            treatment.push(self.treatment[i]);
            outcome.push(self.outcome[i]);
            covariates.extend_from_slice(self.covariate_row(i));
        }
        Self::new(treatment, outcome, covariates, self.p)
    }
}

/// Result of the logistic maximum-likelihood fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityFit {
    /// Coefficients, intercept first.
    pub alpha: Vec<f64>,
    /// Fitted scores `expit(Xᵢᵀα̂)`, all strictly inside (0, 1).
    pub fitted: Vec<f64>,
    /// Newton iterations used.
    pub iterations: usize,
    /// Sup-norm of the score at the solution.
    pub final_score_norm: f64,
}

#[inline]
pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
fn log1pexp(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_likelihood(data: &Dataset, alpha: &[f64]) -> f64 {
    let mut ll = 0.0;
    for i in 0..data.n() {
        let lp: f64 = data.covariate_row(i).iter().zip(alpha).map(|(x, a)| x * a).sum();
        ll += f64::from(data.treatment[i]) * lp - log1pexp(lp);
    }
    ll
}

fn score_and_hessian(data: &Dataset, alpha: &[f64]) -> (Vec<f64>, Matrix) {
    let p = data.p();
    let mut score = vec![0.0; p];
    let mut hessian = Matrix::zeros(p, p);
    for i in 0..data.n() {
        let x = data.covariate_row(i);
        let lp: f64 = x.iter().zip(alpha).map(|(xi, a)| xi * a).sum();
        let e = expit(lp);
        let r = f64::from(data.treatment[i]) - e;
        for (s, xi) in score.iter_mut().zip(x) {
            *s += xi * r;
        }
        hessian.add_scaled_outer(x, e * (1.0 - e));
    }
    (score, hessian)
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Fits the logistic propensity model by Newton-Raphson from the zero vector.
///
/// Converges when the score sup-norm drops below `1e-10 * n`. Fails with
/// [`PropensityError::Separation`] when the tolerance is unreachable within
/// 100 iterations or any fitted score sits within `1e-12` of {0, 1}.
pub fn fit_logistic(data: &Dataset) -> Result<PropensityFit, PropensityError> {
    if !data.both_arms_nonempty() {
        return Err(PropensityError::Separation("a treatment arm is empty".into()));
    }
    let n = data.n();
    let p = data.p();
    let tol = SCORE_TOL_PER_UNIT * n as f64;
    let mut alpha = vec![0.0; p];
    let mut ll = log_likelihood(data, &alpha);
    let mut iterations = 0;

    loop {
        let (score, hessian) = score_and_hessian(data, &alpha);
        let norm = sup_norm(&score);
        if norm <= tol {
            let fitted: Vec<f64> = (0..n)
                .map(|i| {
                    let lp: f64 =
                        data.covariate_row(i).iter().zip(&alpha).map(|(x, a)| x * a).sum();
                    expit(lp)
                })
                .collect();
            if fitted.iter().any(|&e| e <= BOUNDARY_TOL || e >= 1.0 - BOUNDARY_TOL) {
                return Err(PropensityError::Separation(
                    "fitted scores reached the {0,1} boundary".into(),
                ));
            }
            return Ok(PropensityFit { alpha, fitted, iterations, final_score_norm: norm });
        }
        if iterations >= MAX_ITERATIONS {
            return Err(PropensityError::Separation(format!(
                "score norm {norm:.3e} after {MAX_ITERATIONS} iterations (tolerance {tol:.3e})"
            )));
        }

        let direction = solve_spd(&hessian, &score).map_err(PropensityError::RankDeficient)?;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> =
                alpha.iter().zip(&direction).map(|(a, d)| a + step * d).collect();
            let cand_ll = log_likelihood(data, &candidate);
            if cand_ll >= ll {
                debug_assert!(cand_ll >= ll, "log-likelihood decreased");
                alpha = candidate;
                ll = cand_ll;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(PropensityError::Separation(
                "no ascent step found after 30 halvings".into(),
            ));
        }
        iterations += 1;
    }
}

/// Evaluates `expit(xᵀα̂)` for a new covariate row (intercept included).
pub fn predict(fit: &PropensityFit, covariates: &[f64]) -> Result<f64, PropensityError> {
    if covariates.len() != fit.alpha.len() {
        return Err(PropensityError::DimensionMismatch(format!(
            "fit has {} coefficients, row has {} entries",
            fit.alpha.len(),
            covariates.len()
        )));
    }
    Ok(expit(covariates.iter().zip(&fit.alpha).map(|(x, a)| x * a).sum()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn mirrored_dataset() -> Dataset {
        // every covariate row appears once treated and once untreated
        let rows = vec![
            vec![0.3, 1.0],
            vec![-1.2, 0.0],
            vec![2.0, 1.0],
            vec![0.5, 0.0],
        ];
        let mut t = Vec::new();
        let mut y = Vec::new();
        let mut raw = Vec::new();
        for r in &rows {
            for arm in [1u8, 0u8] {
                t.push(arm);
                y.push(0.0);
                raw.push(r.clone());
            }
        }
        Dataset::with_intercept(t, y, &raw).unwrap()
    }

    #[test]
    fn balanced_mirrored_design_gives_zero_coefficients() {
        let fit = fit_logistic(&mirrored_dataset()).unwrap();
        for a in &fit.alpha {
            assert!(a.abs() < 1e-10, "alpha = {:?}", fit.alpha);
        }
        for e in &fit.fitted {
            assert!((e - 0.5).abs() < 1e-10);
        }
    }

    #[test]
    fn four_unit_balanced_strata() {
        let data = Dataset::new(
            vec![1, 0, 1, 0],
            vec![0.0, 0.0, 0.0, 0.0],
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0],
            2,
        )
        .unwrap();
        let fit = fit_logistic(&data).unwrap();
        assert!(fit.alpha.iter().all(|a| a.abs() < 1e-10));
        assert!(fit.fitted.iter().all(|e| (e - 0.5).abs() < 1e-10));
    }

    #[test]
    fn score_balance_at_solution() {
        let mut rng = SplitMix64::new(11);
        let n = 400;
        let mut t = Vec::new();
        let mut raw = Vec::new();
        for _ in 0..n {
            let x = rng.next_normal();
            let b = f64::from(rng.next_bernoulli(0.5));
            let e = expit(0.4 * x - 0.3 * b + 0.1);
            t.push(u8::from(rng.next_bernoulli(e)));
            raw.push(vec![x, b]);
        }
        let data = Dataset::with_intercept(t, vec![0.0; n], &raw).unwrap();
        let fit = fit_logistic(&data).unwrap();
        assert!(fit.final_score_norm <= 1e-10 * n as f64);
        // Σ Xᵢ Tᵢ = Σ Xᵢ êᵢ componentwise
        for j in 0..data.p() {
            let lhs: f64 = (0..n)
                .filter(|&i| data.treated(i))
                .map(|i| data.covariate_row(i)[j])
                .sum();
            let rhs: f64 = (0..n).map(|i| data.covariate_row(i)[j] * fit.fitted[i]).sum();
            assert!((lhs - rhs).abs() <= 1e-8 * n as f64);
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = SplitMix64::new(21);
        let n = 120;
        let mut t = Vec::new();
        let mut raw = Vec::new();
        for _ in 0..n {
            let x = rng.next_normal();
            t.push(u8::from(rng.next_bernoulli(expit(0.7 * x))));
            raw.push(vec![x]);
        }
        let data = Dataset::with_intercept(t, vec![0.0; n], &raw).unwrap();
        let fit = fit_logistic(&data).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.swap(3, 57);
        let fit2 = fit_logistic(&data.permuted(&perm).unwrap()).unwrap();
        for (a, b) in fit.alpha.iter().zip(&fit2.alpha) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn predict_cases() {
        let fit = PropensityFit {
            alpha: vec![0.0, 1.0],
            fitted: vec![],
            iterations: 0,
            final_score_norm: 0.0,
        };
        assert_eq!(predict(&fit, &[1.0, 0.0]).unwrap(), 0.5);
        assert!((predict(&fit, &[1.0, 1.0]).unwrap() - 0.7310585786).abs() < 1e-9);
        let zero = PropensityFit {
            alpha: vec![0.0, 0.0, 0.0],
            fitted: vec![],
            iterations: 0,
            final_score_norm: 0.0,
        };
        assert_eq!(predict(&zero, &[1.0, -3.4, 9.9]).unwrap(), 0.5);
        assert!(matches!(
            predict(&fit, &[1.0, 2.0, 3.0]),
            Err(PropensityError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn separation_is_detected() {
        let mut t = Vec::new();
        let mut raw = Vec::new();
        for i in 0..40 {
            let x = (i as f64) / 10.0 - 2.0;
            t.push(u8::from(x > 0.0));
            raw.push(vec![x]);
        }
        let data = Dataset::with_intercept(t, vec![0.0; 40], &raw).unwrap();
        assert!(matches!(fit_logistic(&data), Err(PropensityError::Separation(_))));
    }

    #[test]
    fn rank_deficiency_is_detected() {
        let mut rng = SplitMix64::new(4);
        let mut t = Vec::new();
        let mut raw = Vec::new();
        for _ in 0..50 {
            let x = rng.next_normal();
            t.push(u8::from(rng.next_bernoulli(0.5)));
            raw.push(vec![x, 2.0 * x]); // collinear pair
        }
        let data = Dataset::with_intercept(t, vec![0.0; 50], &raw).unwrap();
        assert!(matches!(fit_logistic(&data), Err(PropensityError::RankDeficient(_))));
    }

    #[test]
    fn single_arm_is_rejected() {
        let data = Dataset::new(vec![1, 1], vec![0.0, 1.0], vec![1.0, 1.0], 1).unwrap();
        assert!(matches!(fit_logistic(&data), Err(PropensityError::Separation(_))));
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![1], vec![0.0], vec![1.0], 1).is_err());
        assert!(Dataset::new(vec![1, 2], vec![0.0, 0.0], vec![1.0, 1.0], 1).is_err());
        assert!(Dataset::new(vec![1, 0], vec![0.0, 0.0], vec![1.0, 2.0], 1).is_err());
        assert!(Dataset::new(vec![1, 0], vec![0.0, f64::NAN], vec![1.0, 1.0], 1).is_err());
    }
}

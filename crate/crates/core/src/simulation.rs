//! Monte Carlo study of confidence-interval behaviour under the
//! two-confounder data-generating mechanism.
//!
//! Per replicate, a sample of `n` units is drawn with
//! `X₁ ~ N(50, 5²)`, `X₂ ~ Bernoulli(0.5)`,
//! `Pr(T=1|X) = expit{ε(0.03(X₁−50) + 0.3(X₂−0.5))}` and potential
//! outcomes `Y_t ~ Bernoulli(expit{(1, X₁−50, X₂−0.5)·β_t})`. Effects are
//! then estimated twice — once with the true scores and once with scores
//! fitted on the uncentered covariates `(1, X₁, X₂)` — and the rejection
//! rates of the simple and exact intervals are tallied.
//!
//! Replicate RNG streams are derived from `(seed, replicate_index)` with a
//! counter-based splitting scheme, so runs are deterministic regardless of
//! thread count or execution order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criteria::Hypothesis;
use crate::estimands::{estimate_wate, weight_value, Estimand};
use crate::linalg::{Cholesky, Matrix};
use crate::propensity::{expit, fit_logistic, Dataset};
use crate::rng::SplitMix64;
use crate::variance::{
    confidence_interval, estimate_components, exact_variance, simple_variance, CiMethod,
};

/// Stream domain tags; replicate draws and population draws never collide.
const DOMAIN_REPLICATE: u64 = 0;
const DOMAIN_POPULATION: u64 = 1;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("population criterion failed: {0}")]
    Criterion(String),
}

/// Parameters of one simulation scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Assignment strength ε.
    pub epsilon: f64,
    /// Control-arm outcome coefficients on `(1, X₁−50, X₂−0.5)`.
    pub beta0: [f64; 3],
    /// Treated-arm outcome coefficients.
    pub beta1: [f64; 3],
    pub n: usize,
    pub iterations: usize,
    pub seed: u64,
    pub estimands: Vec<Estimand>,
    pub level: f64,
}

impl ScenarioConfig {
    /// Built-in presets `scenario1`..`scenario4`. The two conditional-null
    /// scenarios report ATT and ATO; the Neyman-null scenarios report ATO.
    /// No seed is attached; callers must set one.
    pub fn preset(name: &str) -> Option<ScenarioConfig> {
        let (epsilon, beta0, beta1, estimands): (f64, [f64; 3], [f64; 3], Vec<Estimand>) =
            match name {
                "scenario1" => (
                    1.0,
                    [0.0, -0.2, 0.1],
                    [0.0, -0.2, 0.1],
                    vec![Estimand::Att, Estimand::Ato],
                ),
                "scenario2" => (
                    3.0,
                    [0.0, -0.2, 0.1],
                    [0.0, -0.2, 0.1],
                    vec![Estimand::Att, Estimand::Ato],
                ),
                "scenario3" => {
                    (1.0, [0.0, -0.25, 0.1], [0.01, -0.4, 4.0], vec![Estimand::Ato])
                }
                "scenario4" => {
                    (3.0, [1.0, -0.5, -0.5], [1.0, 0.5, 0.5], vec![Estimand::Ato])
                }
                _ => return None,
            };
        Some(ScenarioConfig {
            epsilon,
            beta0,
            beta1,
            n: 2000,
            iterations: 1000,
            seed: 0,
            estimands,
            level: 0.95,
        })
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        if self.n < 10 {
            return Err(SimulationError::InvalidConfig(format!("n must be >= 10, got {}", self.n)));
        }
        if self.iterations < 1 {
            return Err(SimulationError::InvalidConfig("iterations must be >= 1".into()));
        }
        if !self.epsilon.is_finite() {
            return Err(SimulationError::InvalidConfig("epsilon must be finite".into()));
        }
        if self.estimands.is_empty() {
            return Err(SimulationError::InvalidConfig("at least one estimand".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(SimulationError::InvalidConfig(format!(
                "level must be in (0,1), got {}",
                self.level
            )));
        }
        Ok(())
    }
}

/// One simulated sample along with its generating truth.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    /// Covariate rows stored uncentered as `(1, X₁, X₂)`.
    pub dataset: Dataset,
    pub true_propensity: Vec<f64>,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
}

fn generate_with(rng: &mut SplitMix64, cfg: &ScenarioConfig, n: usize) -> GeneratedSample {
    let mut treatment = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    let mut covariates = Vec::with_capacity(n * 3);
    let mut true_e = Vec::with_capacity(n);
    let mut y1v = Vec::with_capacity(n);
    let mut y0v = Vec::with_capacity(n);
    for _ in 0..n {
        let x1 = 50.0 + 5.0 * rng.next_normal();
        let x2 = f64::from(rng.next_bernoulli(0.5));
        let zc = x1 - 50.0;
        let bc = x2 - 0.5;
        let e = expit(cfg.epsilon * (0.03 * zc + 0.3 * bc));
        let t = rng.next_bernoulli(e);
        let p1 = expit(cfg.beta1[0] + cfg.beta1[1] * zc + cfg.beta1[2] * bc);
        let p0 = expit(cfg.beta0[0] + cfg.beta0[1] * zc + cfg.beta0[2] * bc);
        let y1 = f64::from(rng.next_bernoulli(p1));
        let y0 = f64::from(rng.next_bernoulli(p0));
        treatment.push(u8::from(t));
        outcome.push(if t { y1 } else { y0 });
        covariates.extend_from_slice(&[1.0, x1, x2]);
        true_e.push(e);
        y1v.push(y1);
        y0v.push(y0);
    }
    let dataset = Dataset::new(treatment, outcome, covariates, 3)
        .expect("generated sample is structurally valid");
    GeneratedSample { dataset, true_propensity: true_e, y1: y1v, y0: y0v }
}

/// Draws the sample for one replicate; deterministic in
/// `(cfg.seed, replicate_index)`.
pub fn generate_sample(cfg: &ScenarioConfig, replicate_index: u64) -> GeneratedSample {
    let mut rng = SplitMix64::stream(cfg.seed, DOMAIN_REPLICATE, replicate_index);
    generate_with(&mut rng, cfg, cfg.n)
}

/// Point estimates and rejection indicators for one estimand in one
/// replicate.
#[derive(Debug, Clone, Copy)]
struct ReplicateCell {
    tau_true: f64,
    reject_simple_true: bool,
    tau_est: f64,
    reject_simple_est: bool,
    reject_exact_est: bool,
}

fn run_replicate(cfg: &ScenarioConfig, index: u64) -> Option<Vec<ReplicateCell>> {
    let sample = generate_sample(cfg, index);
    let data = &sample.dataset;
    let fit = fit_logistic(data).ok()?;
    let mut cells = Vec::with_capacity(cfg.estimands.len());
    for &estimand in &cfg.estimands {
        // true propensity scores: simple CI only
        let est_t = estimate_wate(data, &sample.true_propensity, estimand).ok()?;
        let comp_t = estimate_components(data, &sample.true_propensity, &est_t).ok()?;
        let ci_t = confidence_interval(
            est_t.tau,
            simple_variance(&comp_t),
            cfg.level,
            CiMethod::Simple,
        )
        .ok()?;

        // estimated propensity scores: simple and exact CIs
        let est_e = estimate_wate(data, &fit.fitted, estimand).ok()?;
        let comp_e = estimate_components(data, &fit.fitted, &est_e).ok()?;
        let ci_s = confidence_interval(
            est_e.tau,
            simple_variance(&comp_e),
            cfg.level,
            CiMethod::Simple,
        )
        .ok()?;
        let exact = exact_variance(&comp_e).ok()?;
        let ci_e = confidence_interval(est_e.tau, exact, cfg.level, CiMethod::Exact).ok()?;

        cells.push(ReplicateCell {
            tau_true: est_t.tau,
            reject_simple_true: ci_t.excludes_zero(),
            tau_est: est_e.tau,
            reject_simple_est: ci_s.excludes_zero(),
            reject_exact_est: ci_e.excludes_zero(),
        });
    }
    Some(cells)
}

/// Summary for one estimand × propensity-source pair, reported on the raw
/// scale (callers apply the ×10⁻² display convention).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ArmSummary {
    /// Mean of `τ̂` over successful replicates.
    pub mean_tau: f64,
    /// Empirical standard error: standard deviation of `τ̂` across
    /// replicates (n−1 denominator); 0 when fewer than two replicates.
    pub ese: f64,
    /// True when the ESE is undefined (fewer than two successful
    /// replicates) and reported as 0.
    pub ese_degenerate: bool,
    /// Fraction of replicates whose simple CI excludes 0.
    pub alpha_simple: f64,
    /// Fraction whose exact CI excludes 0; absent for the true-propensity
    /// arm where only the simple CI applies.
    pub alpha_exact: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EstimandSummary {
    pub estimand: Estimand,
    pub true_propensity: ArmSummary,
    pub estimated_propensity: ArmSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimulationSummary {
    pub n: usize,
    pub iterations: usize,
    pub seed: u64,
    pub level: f64,
    pub estimands: Vec<EstimandSummary>,
    /// Replicates excluded because the propensity fit (or a downstream
    /// computation) failed.
    pub replicate_failures: usize,
    pub successes: usize,
}

fn summarize(taus: &[f64]) -> (f64, f64, bool) {
    let m = taus.len();
    if m == 0 {
        return (0.0, 0.0, true);
    }
    let mean = taus.iter().sum::<f64>() / m as f64;
    if m < 2 {
        return (mean, 0.0, true);
    }
    let var = taus.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    (mean, var.sqrt(), false)
}

/// Runs every replicate of a scenario and tallies the performance metrics.
///
/// Replicates are evaluated in parallel on the current rayon pool; results
/// are reduced in replicate-index order, so the summary is identical for
/// any thread count.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimulationSummary, SimulationError> {
    cfg.validate()?;
    let results: Vec<Option<Vec<ReplicateCell>>> = (0..cfg.iterations as u64)
        .into_par_iter()
        .map(|i| run_replicate(cfg, i))
        .collect();

    let mut failures = 0usize;
    let k = cfg.estimands.len();
    let mut taus_true: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut taus_est: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut rej_simple_true = vec![0usize; k];
    let mut rej_simple_est = vec![0usize; k];
    let mut rej_exact_est = vec![0usize; k];
    for cells in &results {
        match cells {
            None => failures += 1,
            Some(cells) => {
                for (j, cell) in cells.iter().enumerate() {
                    taus_true[j].push(cell.tau_true);
                    taus_est[j].push(cell.tau_est);
                    rej_simple_true[j] += usize::from(cell.reject_simple_true);
                    rej_simple_est[j] += usize::from(cell.reject_simple_est);
                    rej_exact_est[j] += usize::from(cell.reject_exact_est);
                }
            }
        }
    }
    let successes = cfg.iterations - failures;
    let denom = successes.max(1) as f64;

    let estimands = cfg
        .estimands
        .iter()
        .enumerate()
        .map(|(j, &estimand)| {
            let (mean_t, ese_t, deg_t) = summarize(&taus_true[j]);
            let (mean_e, ese_e, deg_e) = summarize(&taus_est[j]);
            EstimandSummary {
                estimand,
                true_propensity: ArmSummary {
                    mean_tau: mean_t,
                    ese: ese_t,
                    ese_degenerate: deg_t,
                    alpha_simple: rej_simple_true[j] as f64 / denom,
                    alpha_exact: None,
                },
                estimated_propensity: ArmSummary {
                    mean_tau: mean_e,
                    ese: ese_e,
                    ese_degenerate: deg_e,
                    alpha_simple: rej_simple_est[j] as f64 / denom,
                    alpha_exact: Some(rej_exact_est[j] as f64 / denom),
                },
            }
        })
        .collect();

    Ok(SimulationSummary {
        n: cfg.n,
        iterations: cfg.iterations,
        seed: cfg.seed,
        level: cfg.level,
        estimands,
        replicate_failures: failures,
        successes,
    })
}

/// Population-level values of the conservativeness criterion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PopulationCriterion {
    pub estimand: Estimand,
    pub gamma: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    pub m: usize,
}

/// Estimates the criterion sides on a large draw from the scenario's
/// generating mechanism, using the true propensity scores and the realized
/// potential outcomes of both arms.
pub fn population_criterion(
    cfg: &ScenarioConfig,
    m: usize,
    estimand: Estimand,
    hypothesis: Hypothesis,
) -> Result<PopulationCriterion, SimulationError> {
    if m < 100_000 {
        return Err(SimulationError::InvalidConfig(format!(
            "population draw needs m >= 100000, got {m}"
        )));
    }
    if estimand == Estimand::Ate {
        return Err(SimulationError::Criterion("criterion is defined for att/ato only".into()));
    }
    let mut rng = SplitMix64::stream(cfg.seed, DOMAIN_POPULATION, 0);
    let sample = generate_with(&mut rng, cfg, m);
    let data = &sample.dataset;
    let e = &sample.true_propensity;

    let mut sw = 0.0;
    let mut swy1 = 0.0;
    let mut swy0 = 0.0;
    for i in 0..m {
        let w = weight_value(estimand, e[i])
            .map_err(|err| SimulationError::Criterion(err.to_string()))?;
        sw += w;
        swy1 += w * sample.y1[i];
        swy0 += w * sample.y0[i];
    }
    let mu1 = swy1 / sw;
    let mu0 = swy0 / sw;

    let p = data.p();
    let mut a11 = Matrix::zeros(p, p);
    let mut u = vec![0.0; p];
    let mut v = vec![0.0; p];
    for i in 0..m {
        let ei = e[i];
        let ee = ei * (1.0 - ei);
        let x = data.covariate_row(i);
        a11.add_scaled_outer(x, ee);
        let (cu, cv) = match estimand {
            Estimand::Att => (ee, ei * (sample.y0[i] - mu0)),
            Estimand::Ato => (
                ee * (1.0 - 2.0 * ei),
                ee * (ei * (sample.y1[i] - mu1) + (1.0 - ei) * (sample.y0[i] - mu0)),
            ),
            Estimand::Ate => unreachable!(),
        };
        for j in 0..p {
            u[j] += cu * x[j];
            v[j] += cv * x[j];
        }
    }
    let inv_m = 1.0 / m as f64;
    a11.scale(inv_m);
    for j in 0..p {
        u[j] *= inv_m;
        v[j] *= inv_m;
    }
    let chol = Cholesky::new(&a11).map_err(|e| SimulationError::Criterion(e.to_string()))?;
    let solve = |b: &[f64]| chol.solve(b).map_err(|e| SimulationError::Criterion(e.to_string()));
    let uq: f64 = u.iter().zip(solve(&u)?).map(|(a, b)| a * b).sum();
    let vq: f64 = v.iter().zip(solve(&v)?).map(|(a, b)| a * b).sum();
    let gamma = hypothesis.gamma();
    let lhs = gamma * uq;
    Ok(PopulationCriterion { estimand, gamma, lhs, rhs: vq, satisfied: lhs <= vq, m })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ScenarioConfig {
        ScenarioConfig {
            epsilon: 1.0,
            beta0: [0.0, -0.2, 0.1],
            beta1: [0.0, -0.2, 0.1],
            n: 200,
            iterations: 25,
            seed: 42,
            estimands: vec![Estimand::Att, Estimand::Ato],
            level: 0.95,
        }
    }

    #[test]
    fn zero_epsilon_gives_constant_half_scores() {
        let mut cfg = small_cfg();
        cfg.epsilon = 0.0;
        let s = generate_sample(&cfg, 0);
        assert!(s.true_propensity.iter().all(|&e| e == 0.5));
    }

    #[test]
    fn equal_betas_give_equal_outcome_rates() {
        let mut cfg = small_cfg();
        cfg.n = 200_000;
        let s = generate_sample(&cfg, 1);
        let m1 = s.y1.iter().sum::<f64>() / s.y1.len() as f64;
        let m0 = s.y0.iter().sum::<f64>() / s.y0.len() as f64;
        // both arms share the Bernoulli mean; 3 binomial standard errors
        let se = (2.0 * 0.25 / cfg.n as f64).sqrt();
        assert!((m1 - m0).abs() < 3.0 * se, "{m1} vs {m0}");
    }

    #[test]
    fn scenario1_mean_true_score_is_half() {
        let mut cfg = small_cfg();
        cfg.n = 1_000_000;
        let s = generate_sample(&cfg, 2);
        let mean_e = s.true_propensity.iter().sum::<f64>() / cfg.n as f64;
        // symmetric linear predictor around centered covariates
        let se = 0.5 / (cfg.n as f64).sqrt();
        assert!((mean_e - 0.5).abs() < 3.0 * se, "mean e = {mean_e}");
    }

    #[test]
    fn covariates_are_stored_uncentered() {
        let s = generate_sample(&small_cfg(), 0);
        let row = s.dataset.covariate_row(0);
        assert_eq!(row[0], 1.0);
        assert!(row[1] > 20.0, "X1 should be on the ~50 scale, got {}", row[1]);
        assert!(row[2] == 0.0 || row[2] == 1.0);
    }

    #[test]
    fn run_is_deterministic_and_thread_invariant() {
        let cfg = small_cfg();
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        assert_eq!(a, b);

        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let r1 = pool1.install(|| run_scenario(&cfg).unwrap());
        let r4 = pool4.install(|| run_scenario(&cfg).unwrap());
        assert_eq!(r1, r4);
        assert_eq!(a, r1);
    }

    #[test]
    fn single_iteration_flags_degenerate_ese() {
        let mut cfg = small_cfg();
        cfg.iterations = 1;
        let s = run_scenario(&cfg).unwrap();
        for est in &s.estimands {
            assert!(est.true_propensity.ese_degenerate);
            assert_eq!(est.true_propensity.ese, 0.0);
            assert!(est.estimated_propensity.ese_degenerate);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.n = 5;
        assert!(run_scenario(&cfg).is_err());
        let mut cfg = small_cfg();
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.estimands.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.level = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn presets_match_table_footnotes() {
        let s1 = ScenarioConfig::preset("scenario1").unwrap();
        assert_eq!(s1.epsilon, 1.0);
        assert_eq!(s1.beta0, [0.0, -0.2, 0.1]);
        assert_eq!(s1.beta0, s1.beta1);
        assert_eq!(s1.n, 2000);
        assert_eq!(s1.iterations, 1000);
        let s3 = ScenarioConfig::preset("scenario3").unwrap();
        assert_eq!(s3.beta1, [0.01, -0.4, 4.0]);
        assert_eq!(s3.estimands, vec![Estimand::Ato]);
        let s4 = ScenarioConfig::preset("scenario4").unwrap();
        assert_eq!(s4.epsilon, 3.0);
        assert_eq!(s4.beta0, [1.0, -0.5, -0.5]);
        assert!(ScenarioConfig::preset("scenario9").is_none());
    }

    #[test]
    fn degenerate_population_criterion_has_zero_lhs() {
        let mut cfg = small_cfg();
        cfg.epsilon = 0.0;
        let pc =
            population_criterion(&cfg, 100_000, Estimand::Ato, Hypothesis::NeymanNull).unwrap();
        // every e is exactly 0.5, so 1−2e vanishes per unit
        assert_eq!(pc.lhs, 0.0);
        assert_eq!(pc.gamma, 4.0);
    }

    #[test]
    fn population_criterion_rejects_small_m_and_ate() {
        let cfg = small_cfg();
        assert!(population_criterion(&cfg, 1000, Estimand::Ato, Hypothesis::Other).is_err());
        assert!(
            population_criterion(&cfg, 100_000, Estimand::Ate, Hypothesis::Other).is_err()
        );
    }
}

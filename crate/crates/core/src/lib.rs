//! Estimation of weighted average treatment effects (ATE, ATT, ATO) by
//! inverse probability weighting, with sandwich variances that either
//! ignore ("simple") or account for ("exact") the estimation of the
//! propensity score.
//!
//! The crate also evaluates moment criteria that predict when the simple
//! confidence interval is conservative, and reproduces a Monte Carlo study
//! of both intervals' α-error under conditional and Neyman null scenarios.

pub mod criteria;
pub mod estimands;
pub mod linalg;
pub mod propensity;
pub mod rng;
pub mod simulation;
pub mod variance;

pub use criteria::{
    continuous_condition, correction_term, evaluate_criterion, shape_function,
    ContinuousConditionResult, ContinuousMoments, CriteriaError, CriterionReport, Hypothesis,
};
pub use estimands::{
    estimate_wate, unit_weight, weight_derivative, weight_value, Estimand, EstimandError,
    WateEstimate,
};
pub use linalg::{min_eig_sym, quadratic_form, solve_spd, LinalgError, Matrix};
pub use propensity::{fit_logistic, predict, Dataset, PropensityError, PropensityFit};
pub use simulation::{
    generate_sample, population_criterion, run_scenario, GeneratedSample, PopulationCriterion,
    ScenarioConfig, SimulationError, SimulationSummary,
};
pub use variance::{
    confidence_interval, estimate_components, exact_variance, normal_quantile, oracle_sandwich,
    simple_variance, CiMethod, CiResult, VarianceComponents, VarianceError,
};

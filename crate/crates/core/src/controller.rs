//! Receding-horizon controllers for the granulation process.
//!
//! Both controllers pick a feed drug content sequence over an `N`-step
//! horizon and apply the first move:
//!
//! * the stochastic controller (SMPC) propagates the feed-concentration
//!   noise through the moment model on a tensor Gauss-Hermite grid,
//!   projects each monitored ratio onto a Hermite chaos basis per horizon
//!   step, and minimizes a mean-tracking cost with a variance penalty
//!   subject to chance constraints reformulated deterministically through
//!   `kappa = sqrt(eps / (1 - eps))`;
//! * the nominal controller (NMPC) predicts with the noise-free model and
//!   enforces the drug-second-moment band as hard constraints.
//!
//! With zero noise and zero variance weight the two problems coincide.

use crate::moments::{propagate, summary, FeedSpec, KernelSpec, MomentError, MomentState};
use crate::optimizer::{minimize, NlpProblem, NlpSolution, OptimizerError, Tolerances};
use crate::pce::{
    gauss_rule, index_set, GaussRule, PceError, PceModel, PolynomialFamily, ProjectionPlan,
    TensorGrid, TruncationScheme,
};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid control configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid noise specification: {0}")]
    InvalidNoise(String),
    #[error(
        "degenerate prediction at horizon step {step}, node {node_index} (w = {coords:?}): {source}"
    )]
    DegeneratePrediction {
        step: usize,
        node_index: usize,
        coords: Vec<f64>,
        source: MomentError,
    },
    #[error("prediction model failed: {0}")]
    Moment(#[from] MomentError),
    #[error("chaos expansion failed: {0}")]
    Pce(#[from] PceError),
    #[error("optimizer failed: {0}")]
    Optimizer(OptimizerError),
}

/// How the printed chance-constraint reformulation treats the variance
/// term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReformulationMode {
    /// `kappa * Var +/- E`: the coefficient multiplies the variance
    /// itself.
    #[default]
    PaperLiteral,
    /// `kappa * sqrt(Var) +/- E`, the dimensionally consistent Cantelli
    /// bound.
    Cantelli,
}

/// Which horizon steps contribute to the tracking cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostHorizon {
    /// Sum the stage cost over all `N` steps.
    #[default]
    SumStages,
    /// Charge only the terminal step.
    TerminalOnly,
}

/// Controller targets, weights, bounds, and prediction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    /// Drug-content target `S` for `M01/M00`.
    pub target_drug: f64,
    /// Total-mass target `P` for `M10/M00`.
    pub target_mass: f64,
    /// Variance penalty weight `sigma`.
    pub variance_weight: f64,
    /// Chance-constraint probability level, in `(0, 1)`.
    pub epsilon: f64,
    /// Admissible band `[p1*, p2*]` for `M02/M00`.
    pub p1_star: f64,
    pub p2_star: f64,
    /// Horizon length in sampling periods.
    pub horizon: usize,
    /// Sampling period.
    pub dt_sample: f64,
    /// Box on the manipulated variable `s_f`.
    pub control_lo: f64,
    pub control_hi: f64,
    pub mode: ReformulationMode,
    pub cost_horizon: CostHorizon,
    /// RK4 step used for all predictions (the plant uses the same value,
    /// so zero-noise predictions match the plant trajectory exactly).
    pub integrator_dt: f64,
    /// Gauss-Hermite nodes per noise dimension.
    pub pce_nodes: usize,
    /// Truncation of the per-step chaos basis.
    pub pce_scheme: TruncationScheme,
}

impl ControlConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(self.p1_star < self.p2_star) {
            return Err(ControllerError::InvalidConfig(format!(
                "p1* = {} must be below p2* = {}",
                self.p1_star, self.p2_star
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(ControllerError::InvalidConfig(format!(
                "epsilon = {} must lie in (0, 1)",
                self.epsilon
            )));
        }
        if self.horizon == 0 {
            return Err(ControllerError::InvalidConfig(
                "horizon must be >= 1".into(),
            ));
        }
        if !(self.dt_sample > 0.0) {
            return Err(ControllerError::InvalidConfig(format!(
                "sample time = {} must be > 0",
                self.dt_sample
            )));
        }
        if !(self.control_lo <= self.control_hi) {
            return Err(ControllerError::InvalidConfig(
                "control bounds are inverted".into(),
            ));
        }
        if !(self.variance_weight >= 0.0) {
            return Err(ControllerError::InvalidConfig(
                "variance weight must be >= 0".into(),
            ));
        }
        if !(self.integrator_dt > 0.0) {
            return Err(ControllerError::InvalidConfig(
                "integrator step must be > 0".into(),
            ));
        }
        let degree = match self.pce_scheme {
            TruncationScheme::Tensor { degree } | TruncationScheme::TotalDegree { degree } => {
                degree
            }
        };
        if self.pce_nodes < degree + 1 {
            return Err(ControllerError::InvalidConfig(format!(
                "{} quadrature nodes cannot resolve a degree-{} basis",
                self.pce_nodes, degree
            )));
        }
        Ok(())
    }
}

/// Feed-concentration disturbance model: zero-mean Gaussian perturbation
/// of `c_f`, drawn independently at each sampling period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of the perturbation on `c_f`.
    pub std: f64,
    /// Output measurement noise level. Declared for interface parity with
    /// the plant description; the closed loop runs full-state feedback and
    /// no estimator consumes it.
    #[serde(default)]
    pub output_noise_std: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(self.std >= 0.0) {
            return Err(ControllerError::InvalidNoise(format!(
                "std = {} must be >= 0",
                self.std
            )));
        }
        Ok(())
    }
}

/// Predicted mean/variance of one monitored quantity at one horizon step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantityStats {
    pub mean: f64,
    pub variance: f64,
}

/// Per-step prediction statistics for the three monitored ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// `M01/M00`.
    pub drug: QuantityStats,
    /// `M10/M00`.
    pub mass: QuantityStats,
    /// `M02/M00`.
    pub drug_second: QuantityStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionStats {
    pub steps: Vec<StepStats>,
}

/// Chaos surrogates for the three monitored ratios at one horizon step.
#[derive(Debug, Clone)]
pub struct StepModels {
    pub drug: PceModel,
    pub mass: PceModel,
    pub drug_second: PceModel,
}

impl StepModels {
    pub fn stats(&self) -> StepStats {
        StepStats {
            drug: QuantityStats {
                mean: self.drug.mean(),
                variance: self.drug.variance(),
            },
            mass: QuantityStats {
                mean: self.mass.mean(),
                variance: self.mass.variance(),
            },
            drug_second: QuantityStats {
                mean: self.drug_second.mean(),
                variance: self.drug_second.variance(),
            },
        }
    }
}

/// Chance-constraint coefficient `kappa = sqrt(eps / (1 - eps))`.
pub fn kappa(epsilon: f64) -> Result<f64, ControllerError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ControllerError::InvalidConfig(format!(
            "epsilon = {epsilon} must lie in (0, 1)"
        )));
    }
    Ok((epsilon / (1.0 - epsilon)).sqrt())
}

/// Quadrature rule and per-horizon-step projection plans, built once per
/// controller step and reused across every optimizer probe.
pub struct PredictionSetup {
    rule: GaussRule,
    plans: Vec<ProjectionPlan>,
}

impl PredictionSetup {
    pub fn new(config: &ControlConfig) -> Result<Self, ControllerError> {
        config.validate()?;
        let rule = gauss_rule(PolynomialFamily::Hermite, config.pce_nodes)?;
        let mut plans = Vec::with_capacity(config.horizon);
        for k in 1..=config.horizon {
            let basis = index_set(k, PolynomialFamily::Hermite, config.pce_scheme)?;
            let grid = TensorGrid::new(rule.clone(), k);
            plans.push(ProjectionPlan::new(basis, &grid)?);
        }
        Ok(PredictionSetup { rule, plans })
    }
}

/// Builds the per-step chaos surrogates for a candidate control sequence.
///
/// Step `k` (1-based) dives through the noise tree: each interval `j <= k`
/// perturbs the feed concentration by `std * w_j` with `w_j` ranging over
/// the Gauss-Hermite nodes, so the step-`k` quantities live on the full
/// `k`-dimensional tensor grid, ordered with the latest noise fastest.
pub fn predict_models(
    state: &MomentState,
    controls: &[f64],
    noise: &NoiseSpec,
    config: &ControlConfig,
    kernel: &KernelSpec,
    feed: &FeedSpec,
) -> Result<Vec<StepModels>, ControllerError> {
    let setup = PredictionSetup::new(config)?;
    predict_models_with(&setup, state, controls, noise, config, kernel, feed)
}

/// [`predict_models`] against a prebuilt [`PredictionSetup`].
pub fn predict_models_with(
    setup: &PredictionSetup,
    state: &MomentState,
    controls: &[f64],
    noise: &NoiseSpec,
    config: &ControlConfig,
    kernel: &KernelSpec,
    feed: &FeedSpec,
) -> Result<Vec<StepModels>, ControllerError> {
    noise.validate()?;
    if controls.len() != config.horizon {
        return Err(ControllerError::InvalidConfig(format!(
            "{} controls supplied for a horizon of {}",
            controls.len(),
            config.horizon
        )));
    }
    let rule = &setup.rule;
    if let Some(&w_min) = rule.nodes.iter().min_by(|a, b| a.total_cmp(b)) {
        if feed.c_f + noise.std * w_min < 0.0 {
            return Err(ControllerError::InvalidNoise(format!(
                "noise std {} drives the feed concentration negative at node {w_min}",
                noise.std
            )));
        }
    }

    let n_nodes = rule.len();
    let node_feeds: Vec<FeedSpec> = rule
        .nodes
        .iter()
        .map(|&w| feed.with_concentration(feed.c_f + noise.std * w))
        .collect();
    let mut models = Vec::with_capacity(config.horizon);
    let mut states = vec![*state];
    for (k, &u) in controls.iter().enumerate() {
        let report_node = |flat: usize, source: MomentError| {
            let grid = TensorGrid::new(rule.clone(), k + 1);
            ControllerError::DegeneratePrediction {
                step: k + 1,
                node_index: flat,
                coords: grid.node(flat),
                source,
            }
        };
        let mut next = Vec::with_capacity(states.len() * n_nodes);
        let mut drug = Vec::with_capacity(states.len() * n_nodes);
        let mut mass = Vec::with_capacity(states.len() * n_nodes);
        let mut second = Vec::with_capacity(states.len() * n_nodes);
        for (parent_idx, parent) in states.iter().enumerate() {
            for (node_idx, node_feed) in node_feeds.iter().enumerate() {
                let noisy = node_feed.with_drug(u);
                let flat = parent_idx * n_nodes + node_idx;
                let s = propagate(
                    parent,
                    &noisy,
                    kernel,
                    config.integrator_dt,
                    config.dt_sample,
                )
                .map_err(|source| report_node(flat, source))?;
                let sm = summary(&s).map_err(|source| report_node(flat, source))?;
                drug.push(sm.mean_drug);
                mass.push(sm.mean_mass);
                second.push(sm.drug_second);
                next.push(s);
            }
        }
        states = next;
        let plan = &setup.plans[k];
        models.push(StepModels {
            drug: plan.fit(&drug)?,
            mass: plan.fit(&mass)?,
            drug_second: plan.fit(&second)?,
        });
    }
    Ok(models)
}

/// Prediction statistics for a candidate control sequence.
///
/// With zero noise the quadrature collapses: the means are the nominal
/// trajectory of the plant model (same integrator, same step) and every
/// variance is exactly zero, so that path is taken directly.
pub fn build_predictions(
    state: &MomentState,
    controls: &[f64],
    noise: &NoiseSpec,
    config: &ControlConfig,
    kernel: &KernelSpec,
    feed: &FeedSpec,
) -> Result<PredictionStats, ControllerError> {
    config.validate()?;
    noise.validate()?;
    if noise.std == 0.0 {
        return build_predictions_nominal(state, controls, config, kernel, feed);
    }
    let setup = PredictionSetup::new(config)?;
    let models = predict_models_with(&setup, state, controls, noise, config, kernel, feed)?;
    Ok(PredictionStats {
        steps: models.iter().map(StepModels::stats).collect(),
    })
}

/// Zero-noise path: the quadrature collapses, so the means are the nominal
/// trajectory of the plant model (same integrator, same step) and every
/// variance is exactly zero.
fn build_predictions_nominal(
    state: &MomentState,
    controls: &[f64],
    config: &ControlConfig,
    kernel: &KernelSpec,
    feed: &FeedSpec,
) -> Result<PredictionStats, ControllerError> {
    if controls.len() != config.horizon {
        return Err(ControllerError::InvalidConfig(format!(
            "{} controls supplied for a horizon of {}",
            controls.len(),
            config.horizon
        )));
    }
    let mut steps = Vec::with_capacity(config.horizon);
    let mut current = *state;
    for (k, &u) in controls.iter().enumerate() {
        let report = |source: MomentError| ControllerError::DegeneratePrediction {
            step: k + 1,
            node_index: 0,
            coords: vec![0.0; k + 1],
            source,
        };
        let f = FeedSpec { s_f: u, ..*feed };
        current = propagate(&current, &f, kernel, config.integrator_dt, config.dt_sample)
            .map_err(report)?;
        let sm = summary(&current).map_err(report)?;
        let zero_var = |mean: f64| QuantityStats {
            mean,
            variance: 0.0,
        };
        steps.push(StepStats {
            drug: zero_var(sm.mean_drug),
            mass: zero_var(sm.mean_mass),
            drug_second: zero_var(sm.drug_second),
        });
    }
    Ok(PredictionStats { steps })
}

/// [`build_predictions`] against a prebuilt [`PredictionSetup`].
pub fn build_predictions_with(
    setup: &PredictionSetup,
    state: &MomentState,
    controls: &[f64],
    noise: &NoiseSpec,
    config: &ControlConfig,
    kernel: &KernelSpec,
    feed: &FeedSpec,
) -> Result<PredictionStats, ControllerError> {
    noise.validate()?;
    if noise.std == 0.0 {
        return build_predictions_nominal(state, controls, config, kernel, feed);
    }
    let models = predict_models_with(setup, state, controls, noise, config, kernel, feed)?;
    Ok(PredictionStats {
        steps: models.iter().map(StepModels::stats).collect(),
    })
}

/// Deterministic chance-constraint residuals `(lower, upper)` per horizon
/// step; a residual `<= 0` means the constraint is satisfied.
///
/// `paper_literal` applies `kappa` to the variance, `cantelli` to the
/// standard deviation. With zero variance both reduce to the hard band
/// `p1* <= E <= p2*`.
pub fn chance_residuals(
    stats: &PredictionStats,
    config: &ControlConfig,
) -> Result<Vec<(f64, f64)>, ControllerError> {
    let kappa = kappa(config.epsilon)?;
    Ok(stats
        .steps
        .iter()
        .map(|s| {
            let spread = match config.mode {
                ReformulationMode::PaperLiteral => s.drug_second.variance,
                ReformulationMode::Cantelli => s.drug_second.variance.max(0.0).sqrt(),
            };
            let e = s.drug_second.mean;
            (
                kappa * spread - e + config.p1_star,
                kappa * spread + e - config.p2_star,
            )
        })
        .collect())
}

/// Tracking-plus-variance cost:
/// `sum_k (E_k[drug] - S)^2 + (E_k[mass] - P)^2 + sigma * Var_k[drug]`,
/// summed over all steps or charged at the terminal step only.
pub fn smpc_objective(stats: &PredictionStats, config: &ControlConfig) -> f64 {
    let stage = |s: &StepStats| {
        let ds = s.drug.mean - config.target_drug;
        let dp = s.mass.mean - config.target_mass;
        ds * ds + dp * dp + config.variance_weight * s.drug.variance
    };
    match config.cost_horizon {
        CostHorizon::SumStages => stats.steps.iter().map(stage).sum(),
        CostHorizon::TerminalOnly => stats.steps.last().map(stage).unwrap_or(0.0),
    }
}

/// Per-step record of what the controller decided and predicted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Full optimized move sequence; the first entry is applied.
    pub moves: Vec<f64>,
    pub objective: f64,
    pub max_residual: f64,
    /// `(lower, upper)` chance residuals at the solution, per step.
    pub residuals: Vec<(f64, f64)>,
    pub predictions: PredictionStats,
    pub solver_iterations: usize,
    pub converged: bool,
    /// Set when no feasible sequence was found and the soft-constraint
    /// fallback move was returned.
    pub infeasible: bool,
}

struct SolveOutcome {
    solution: NlpSolution,
    infeasible: bool,
}

/// Shared receding-horizon solve: minimizes `objective` subject to the
/// per-step residual constraints over the control box, falling back to the
/// penalized minimizer when the constraints cannot be met.
fn solve_horizon(
    state: &MomentState,
    config: &ControlConfig,
    noise: &NoiseSpec,
    kernel: &KernelSpec,
    feed: &FeedSpec,
    warm_start: Option<&[f64]>,
) -> Result<(SolveOutcome, PredictionStats), ControllerError> {
    config.validate()?;
    noise.validate()?;
    let n = config.horizon;
    let (lo, hi) = (config.control_lo, config.control_hi);
    let setup = PredictionSetup::new(config)?;

    // One prediction per distinct decision vector: the objective and every
    // constraint read through this cache, so a solver probe costs a single
    // model rollout.
    type Cache = RefCell<Option<(Vec<f64>, Rc<PredictionStats>)>>;
    let cache: Cache = RefCell::new(None);
    let failure: RefCell<Option<ControllerError>> = RefCell::new(None);
    let predict = |u: &[f64]| -> Option<Rc<PredictionStats>> {
        {
            let held = cache.borrow();
            if let Some((key, stats)) = held.as_ref() {
                if key.as_slice() == u {
                    return Some(Rc::clone(stats));
                }
            }
        }
        match build_predictions_with(&setup, state, u, noise, config, kernel, feed) {
            Ok(stats) => {
                let stats = Rc::new(stats);
                *cache.borrow_mut() = Some((u.to_vec(), Rc::clone(&stats)));
                Some(stats)
            }
            Err(err) => {
                let mut slot = failure.borrow_mut();
                if slot.is_none() {
                    *slot = Some(err);
                }
                None
            }
        }
    };

    let objective = |u: &[f64]| -> f64 {
        match predict(u) {
            Some(stats) => smpc_objective(&stats, config),
            None => 1e100,
        }
    };
    let mut constraints: Vec<crate::optimizer::ScalarFn> = Vec::with_capacity(2 * n);
    for step in 0..n {
        for side in 0..2 {
            let predict = &predict;
            constraints.push(Box::new(move |u: &[f64]| match predict(u) {
                Some(stats) => {
                    let residuals =
                        chance_residuals(&stats, config).expect("config validated above");
                    if side == 0 {
                        residuals[step].0
                    } else {
                        residuals[step].1
                    }
                }
                None => 1e100,
            }));
        }
    }
    let problem = NlpProblem {
        objective: Box::new(objective),
        constraints,
        bounds: vec![(lo, hi); n],
    };

    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(w) = warm_start {
        if w.len() == n {
            starts.push(w.iter().map(|&x| x.clamp(lo, hi)).collect());
        }
    }
    starts.push(vec![0.5 * (lo + hi); n]);
    starts.push(vec![lo; n]);
    starts.push(vec![hi; n]);

    let tolerances = Tolerances {
        max_iterations: 250,
        ..Tolerances::default()
    };
    let outcome = match minimize(&problem, &starts, &tolerances) {
        Ok(solution) => SolveOutcome {
            solution,
            infeasible: false,
        },
        Err(OptimizerError::Infeasible { best, .. }) => SolveOutcome {
            solution: best,
            infeasible: true,
        },
        Err(other) => return Err(ControllerError::Optimizer(other)),
    };
    if let Some(err) = failure.borrow_mut().take() {
        if outcome.solution.objective >= 1e100 {
            return Err(err);
        }
    }
    let stats = build_predictions_with(
        &setup,
        state,
        &outcome.solution.minimizer,
        noise,
        config,
        kernel,
        feed,
    )?;
    Ok((outcome, stats))
}

fn diagnostics_from(
    outcome: SolveOutcome,
    stats: PredictionStats,
    config: &ControlConfig,
) -> Result<(f64, StepDiagnostics), ControllerError> {
    let residuals = chance_residuals(&stats, config)?;
    let applied = outcome.solution.minimizer[0].clamp(config.control_lo, config.control_hi);
    Ok((
        applied,
        StepDiagnostics {
            moves: outcome.solution.minimizer,
            objective: outcome.solution.objective,
            max_residual: outcome.solution.max_residual,
            residuals,
            predictions: stats,
            solver_iterations: outcome.solution.iterations,
            converged: outcome.solution.converged,
            infeasible: outcome.infeasible,
        },
    ))
}

/// One stochastic MPC step: chance-constrained minimization of the
/// chaos-propagated cost; returns the applied first move.
pub fn smpc_step(
    state: &MomentState,
    config: &ControlConfig,
    noise: &NoiseSpec,
    kernel: &KernelSpec,
    feed: &FeedSpec,
    warm_start: Option<&[f64]>,
) -> Result<(f64, StepDiagnostics), ControllerError> {
    let (outcome, stats) = solve_horizon(state, config, noise, kernel, feed, warm_start)?;
    diagnostics_from(outcome, stats, config)
}

/// One nominal NMPC step: noise-free prediction, tracking cost without the
/// variance penalty term (which vanishes identically at zero noise), and
/// the hard band on `M02/M00`.
pub fn nmpc_step(
    state: &MomentState,
    config: &ControlConfig,
    kernel: &KernelSpec,
    feed: &FeedSpec,
    warm_start: Option<&[f64]>,
) -> Result<(f64, StepDiagnostics), ControllerError> {
    let nominal = NoiseSpec {
        std: 0.0,
        output_noise_std: 0.0,
    };
    let (outcome, stats) = solve_horizon(state, config, &nominal, kernel, feed, warm_start)?;
    diagnostics_from(outcome, stats, config)
}

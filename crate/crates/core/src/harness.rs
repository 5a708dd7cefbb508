//! Experiment runner: closed-loop simulations, Monte Carlo campaigns over
//! noise realizations, and the surrogate-versus-direct-MC validation.
//!
//! Reproducibility contract: the master seed fixes every per-run seed
//! through a SplitMix64 derivation, each run owns an isolated ChaCha
//! stream, and the controller itself is deterministic, so identical
//! configurations produce bit-identical records. Plant noise for a step is
//! drawn strictly after the controller committed its move, so no
//! controller ever observes a future disturbance.

use crate::config::{CampaignConfig, ControllerKind, ValidationConfig};
use crate::controller::{
    nmpc_step, predict_models, smpc_step, ControlConfig, ControllerError, CostHorizon, NoiseSpec,
    ReformulationMode, StepDiagnostics,
};
use crate::moments::{propagate, summary, FeedSpec, MomentError, MomentState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("controller failed at step {step}: {source}")]
    Controller {
        step: usize,
        #[source]
        source: ControllerError,
    },
    #[error("plant integration failed at step {step}: {source}")]
    Plant {
        step: usize,
        #[source]
        source: MomentError,
    },
    #[error("campaign produced no successful runs")]
    NoSuccessfulRuns,
    #[error("validation failed: {0}")]
    Validation(#[from] ControllerError),
}

/// One recorded sampling instant. `s_f` and `c_f_realized` describe the
/// interval *starting* at `time`; they are absent on the final row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub time: f64,
    pub s_f: Option<f64>,
    pub c_f_realized: Option<f64>,
    pub state: MomentState,
    pub mean_drug: f64,
    pub mean_mass: f64,
    pub drug_second: f64,
}

/// Full closed-loop trace of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub controller: ControllerKind,
    pub rows: Vec<StepRow>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub diagnostics: Vec<StepDiagnostics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunFailure {
    pub index: usize,
    pub seed: u64,
    pub error: String,
}

/// Fixed-bin histogram; counts sum to the number of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn from_samples(samples: &[f64], bins: usize) -> Histogram {
        assert!(bins >= 1);
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if samples.is_empty() {
            (0.0, 1.0)
        } else if hi - lo < 1e-300 {
            // Point mass: give the single occupied bin a visible width.
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        };
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &x in samples {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Histogram { lo, hi, counts }
    }

    pub fn edges(&self) -> Vec<(f64, f64)> {
        let bins = self.counts.len();
        let width = (self.hi - self.lo) / bins as f64;
        (0..bins)
            .map(|k| (self.lo + k as f64 * width, self.lo + (k + 1) as f64 * width))
            .collect()
    }
}

/// Cross-run statistics of a campaign at the final time, plus the per-step
/// violation record of the drug-second-moment band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub controller: ControllerKind,
    pub run_count: usize,
    pub success_count: usize,
    pub final_time: f64,
    pub mean_drug_ratio: f64,
    /// Sample variance across runs; absent for a single run.
    pub var_drug_ratio: Option<f64>,
    pub mean_mass_ratio: f64,
    pub var_mass_ratio: Option<f64>,
    /// Fraction of runs with `M02/M00` outside `[p1*, p2*]`, per sampling
    /// step `1..=n` (the given initial state is not counted).
    pub violation_frequency: Vec<f64>,
    pub histogram_drug: Histogram,
    pub histogram_mass: Histogram,
}

/// Result of a full campaign: successful run records, per-run failures,
/// and the cross-run summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignResult {
    pub config: CampaignConfig,
    pub runs: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    pub summary: CampaignSummary,
}

/// SplitMix64 step, used to derive independent per-run seeds from the
/// master seed.
pub fn derive_run_seed(master_seed: u64, run_index: usize) -> u64 {
    let mut z =
        master_seed.wrapping_add((run_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn make_row(time: f64, state: &MomentState) -> Result<StepRow, MomentError> {
    let sm = summary(state)?;
    Ok(StepRow {
        time,
        s_f: None,
        c_f_realized: None,
        state: *state,
        mean_drug: sm.mean_drug,
        mean_mass: sm.mean_mass,
        drug_second: sm.drug_second,
    })
}

/// Simulates one closed-loop trajectory: at each sampling instant the
/// controller sees the true state and commits a move, then the plant draws
/// one concentration disturbance (held over the interval) and integrates.
pub fn run_closed_loop(config: &CampaignConfig, seed: u64) -> Result<RunRecord, HarnessError> {
    let steps = config.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let mut state = config.plant.x0;
    let mut rows = Vec::with_capacity(steps + 1);
    let mut diagnostics = Vec::with_capacity(steps);
    rows.push(make_row(0.0, &state).map_err(|source| HarnessError::Plant { step: 0, source })?);

    let mut warm: Option<Vec<f64>> = None;
    for step in 0..steps {
        let (applied, diag) = match config.controller {
            ControllerKind::Smpc => smpc_step(
                &state,
                &config.control,
                &config.noise,
                &config.plant.kernel,
                &config.plant.feed,
                warm.as_deref(),
            ),
            ControllerKind::Nmpc => nmpc_step(
                &state,
                &config.control,
                &config.plant.kernel,
                &config.plant.feed,
                warm.as_deref(),
            ),
        }
        .map_err(|source| HarnessError::Controller { step, source })?;

        // Receding-horizon warm start: shift the sequence, repeat the tail.
        let mut shifted: Vec<f64> = diag.moves[1..].to_vec();
        if let Some(&last) = diag.moves.last() {
            shifted.push(last);
        }
        warm = Some(shifted);

        // The disturbance is drawn only now, after the move is committed.
        let draw: f64 = normal.sample(&mut rng);
        let c_f_realized = config.plant.feed.c_f + config.noise.std * draw;
        let plant_feed = FeedSpec {
            c_f: c_f_realized,
            s_f: applied,
            ..config.plant.feed
        };
        state = propagate(
            &state,
            &plant_feed,
            &config.plant.kernel,
            config.plant.integrator_dt,
            config.control.dt_sample,
        )
        .map_err(|source| HarnessError::Plant { step, source })?;

        let time = (step as f64 + 1.0) * config.control.dt_sample;
        let row = make_row(time, &state).map_err(|source| HarnessError::Plant { step, source })?;
        let prev = rows.last_mut().expect("rows start non-empty");
        prev.s_f = Some(applied);
        prev.c_f_realized = Some(c_f_realized);
        rows.push(row);
        diagnostics.push(diag);
    }
    Ok(RunRecord {
        seed,
        controller: config.controller,
        rows,
        diagnostics,
    })
}

/// Executes all runs (in parallel, isolated RNG streams), collects
/// failures per run, and summarizes the successes.
pub fn run_campaign(config: &CampaignConfig) -> Result<CampaignResult, HarnessError> {
    let outcomes: Vec<(usize, u64, Result<RunRecord, HarnessError>)> = (0..config.runs)
        .into_par_iter()
        .map(|idx| {
            let seed = derive_run_seed(config.master_seed, idx);
            (idx, seed, run_closed_loop(config, seed))
        })
        .collect();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (index, seed, outcome) in outcomes {
        match outcome {
            Ok(record) => runs.push(record),
            Err(error) => failures.push(RunFailure {
                index,
                seed,
                error: error.to_string(),
            }),
        }
    }
    if runs.is_empty() {
        return Err(HarnessError::NoSuccessfulRuns);
    }
    let summary = summarize(config, &runs);
    Ok(CampaignResult {
        config: config.clone(),
        runs,
        failures,
        summary,
    })
}

fn sample_mean_var(samples: &[f64]) -> (f64, Option<f64>) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, None);
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var))
}

fn summarize(config: &CampaignConfig, runs: &[RunRecord]) -> CampaignSummary {
    let steps = config.steps();
    let finals_drug: Vec<f64> = runs
        .iter()
        .map(|r| r.rows.last().expect("nonempty").mean_drug)
        .collect();
    let finals_mass: Vec<f64> = runs
        .iter()
        .map(|r| r.rows.last().expect("nonempty").mean_mass)
        .collect();
    let (mean_drug_ratio, var_drug_ratio) = sample_mean_var(&finals_drug);
    let (mean_mass_ratio, var_mass_ratio) = sample_mean_var(&finals_mass);

    // Boundary-riding solutions sit within the optimizer's feasibility
    // tolerance of the band edge; only excursions beyond it count.
    let slack = 1e-6;
    let mut violation_frequency = vec![0.0; steps];
    for r in runs {
        for (k, slot) in violation_frequency.iter_mut().enumerate() {
            let v = r.rows[k + 1].drug_second;
            if v < config.control.p1_star - slack || v > config.control.p2_star + slack {
                *slot += 1.0;
            }
        }
    }
    for slot in &mut violation_frequency {
        *slot /= runs.len() as f64;
    }

    CampaignSummary {
        controller: config.controller,
        run_count: config.runs,
        success_count: runs.len(),
        final_time: config.total_time,
        mean_drug_ratio,
        var_drug_ratio,
        mean_mass_ratio,
        var_mass_ratio,
        violation_frequency,
        histogram_drug: Histogram::from_samples(&finals_drug, 20),
        histogram_mass: Histogram::from_samples(&finals_mass, 20),
    }
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut d: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() && j < b.len() {
        // Advance both empirical CDFs past the smaller value so ties move
        // them together.
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// One horizon step of the validation report: surrogate statistics against
/// the direct Monte Carlo reference for `M10/M00`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationStep {
    pub step: usize,
    pub time: f64,
    pub mc_mean: f64,
    pub mc_variance: f64,
    /// Standard error of the MC mean.
    pub mc_se: f64,
    /// Surrogate mean/variance from the chaos coefficients.
    pub pce_mean: f64,
    pub pce_variance: f64,
    pub ks_distance: f64,
    pub histogram_mc: Histogram,
    pub histogram_pce: Histogram,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub config: ValidationConfig,
    pub steps: Vec<ValidationStep>,
}

/// Compares the chaos surrogate of the mean particle mass against a direct
/// Monte Carlo solution of the same model: `mc_samples` noise trajectories
/// propagated through the plant versus the same number of surrogate draws.
pub fn pce_validation(config: &ValidationConfig) -> Result<ValidationReport, HarnessError> {
    let control = ControlConfig {
        target_drug: 0.0,
        target_mass: 0.0,
        variance_weight: 0.0,
        epsilon: 0.5,
        p1_star: 0.0,
        p2_star: 1.0,
        horizon: config.steps,
        dt_sample: config.dt_sample,
        control_lo: 0.0,
        control_hi: config.plant.feed.p_f,
        mode: ReformulationMode::PaperLiteral,
        cost_horizon: CostHorizon::SumStages,
        integrator_dt: config.plant.integrator_dt,
        pce_nodes: config.pce_nodes,
        pce_scheme: config.pce_scheme,
    };
    let noise = NoiseSpec {
        std: config.noise_std,
        output_noise_std: 0.0,
    };
    let controls = vec![config.s_f; config.steps];
    let models = predict_models(
        &config.plant.x0,
        &controls,
        &noise,
        &control,
        &config.plant.kernel,
        &config.plant.feed,
    )?;

    // Direct MC: each sample draws one noise vector and walks the full
    // window, contributing to every step's reference distribution.
    let n = config.mc_samples;
    let mc_samples: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|sample_idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_run_seed(config.seed, sample_idx));
            let normal = rand_distr::StandardNormal;
            let mut state = config.plant.x0;
            let mut per_step = Vec::with_capacity(config.steps);
            for _ in 0..config.steps {
                let w: f64 = normal.sample(&mut rng);
                let feed = FeedSpec {
                    c_f: config.plant.feed.c_f + config.noise_std * w,
                    s_f: config.s_f,
                    ..config.plant.feed
                };
                state = propagate(
                    &state,
                    &feed,
                    &config.plant.kernel,
                    config.plant.integrator_dt,
                    config.dt_sample,
                )
                .expect("validation plant propagation");
                per_step.push(summary(&state).expect("validation summary").mean_mass);
            }
            per_step
        })
        .collect();

    // Surrogate draws from an independent stream.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_run_seed(config.seed ^ 0xA5A5_A5A5, 0));
    let normal = rand_distr::StandardNormal;
    let mut steps = Vec::with_capacity(config.steps);
    for (k, model) in models.iter().enumerate() {
        let mc: Vec<f64> = mc_samples.iter().map(|row| row[k]).collect();
        let pce: Vec<f64> = (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..=k).map(|_| normal.sample(&mut rng)).collect();
                model.mass.eval(&w).expect("surrogate evaluation")
            })
            .collect();
        let (mc_mean, mc_var) = sample_mean_var(&mc);
        let mc_var = mc_var.unwrap_or(0.0);
        steps.push(ValidationStep {
            step: k + 1,
            time: (k as f64 + 1.0) * config.dt_sample,
            mc_mean,
            mc_variance: mc_var,
            mc_se: (mc_var / n as f64).sqrt(),
            pce_mean: model.mass.mean(),
            pce_variance: model.mass.variance(),
            ks_distance: ks_distance(&mc, &pce),
            histogram_mc: Histogram::from_samples(&mc, 40),
            histogram_pce: Histogram::from_samples(&pce, 40),
        });
    }
    Ok(ValidationReport {
        config: config.clone(),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn small_campaign(controller: ControllerKind) -> CampaignConfig {
        let mut cfg = CampaignConfig::paper_preset();
        cfg.controller = controller;
        cfg.runs = 2;
        cfg.total_time = 3.0;
        cfg
    }

    #[test]
    fn same_seed_gives_bit_identical_runs() {
        let cfg = small_campaign(ControllerKind::Nmpc);
        let a = run_closed_loop(&cfg, 77).unwrap();
        let b = run_closed_loop(&cfg, 77).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.diagnostics.len(), b.diagnostics.len());
        for (da, db) in a.diagnostics.iter().zip(&b.diagnostics) {
            assert_eq!(da.moves, db.moves);
        }
    }

    #[test]
    fn zero_total_time_records_only_initial_state() {
        let mut cfg = small_campaign(ControllerKind::Nmpc);
        cfg.total_time = 0.0;
        let record = run_closed_loop(&cfg, 1).unwrap();
        assert_eq!(record.rows.len(), 1);
        assert_eq!(record.rows[0].time, 0.0);
        assert_eq!(record.rows[0].s_f, None);
    }

    #[test]
    fn zero_noise_nmpc_converges_to_steady_ratio() {
        let mut cfg = small_campaign(ControllerKind::Nmpc);
        cfg.noise.std = 0.0;
        cfg.total_time = 40.0;
        let record = run_closed_loop(&cfg, 5).unwrap();
        let last = record.rows.last().unwrap();
        // Mass ratio is control-independent; its fixed point is
        // 1 / m00* = 0.5 + sqrt(0.31).
        let expected = 0.5 + 0.31f64.sqrt();
        assert_relative_eq!(last.mean_mass, expected, max_relative = 1e-4);
        // Drug ratio settles on the reachable target.
        assert_abs_diff_eq!(last.mean_drug, cfg.control.target_drug, epsilon = 1e-3);
    }

    #[test]
    fn campaign_seeds_are_deterministic_and_distinct() {
        let s: Vec<u64> = (0..8).map(|i| derive_run_seed(42, i)).collect();
        let t: Vec<u64> = (0..8).map(|i| derive_run_seed(42, i)).collect();
        assert_eq!(s, t);
        let mut unique = s.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), s.len());
    }

    #[test]
    fn campaign_single_run_has_no_variance() {
        let mut cfg = small_campaign(ControllerKind::Nmpc);
        cfg.runs = 1;
        let result = run_campaign(&cfg).unwrap();
        assert_eq!(result.summary.success_count, 1);
        assert!(result.summary.var_drug_ratio.is_none());
        assert!(result.summary.var_mass_ratio.is_none());
    }

    #[test]
    fn violation_frequency_zero_for_feasible_noise_free_loop() {
        let mut cfg = small_campaign(ControllerKind::Smpc);
        cfg.noise.std = 0.0;
        cfg.runs = 1;
        cfg.total_time = 6.0;
        let result = run_campaign(&cfg).unwrap();
        for &f in &result.summary.violation_frequency {
            assert_eq!(f, 0.0);
        }
    }

    #[test]
    fn histogram_counts_sum_to_samples() {
        let samples = [0.1, 0.2, 0.2, 0.9, 0.45];
        let h = Histogram::from_samples(&samples, 4);
        assert_eq!(h.counts.iter().sum::<usize>(), samples.len());
        assert_eq!(h.edges().len(), 4);
    }

    #[test]
    fn histogram_handles_point_mass() {
        let samples = [0.3; 10];
        let h = Histogram::from_samples(&samples, 5);
        assert_eq!(h.counts.iter().sum::<usize>(), 10);
        assert!(h.hi > h.lo);
    }

    #[test]
    fn ks_distance_identical_and_disjoint() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(ks_distance(&a, &a), 0.0);
        let b = [10.0, 11.0, 12.0, 13.0];
        assert_abs_diff_eq!(ks_distance(&a, &b), 1.0);
    }

    #[test]
    fn validation_with_zero_noise_gives_point_masses() {
        let mut cfg = ValidationConfig::paper_preset();
        cfg.noise_std = 0.0;
        cfg.mc_samples = 50;
        let report = pce_validation(&cfg).unwrap();
        for step in &report.steps {
            assert!(step.mc_variance < 1e-20);
            assert!(step.pce_variance < 1e-20);
            assert_abs_diff_eq!(step.mc_mean, step.pce_mean, epsilon = 1e-10);
            assert!(step.ks_distance <= 1.0);
        }
    }

    #[test]
    fn validation_surrogate_mean_within_mc_error() {
        let mut cfg = ValidationConfig::paper_preset();
        cfg.mc_samples = 2000;
        let report = pce_validation(&cfg).unwrap();
        let s1 = &report.steps[0];
        assert!(
            (s1.pce_mean - s1.mc_mean).abs() <= 3.0 * s1.mc_se,
            "step-1 surrogate mean {} vs MC {} (se {})",
            s1.pce_mean,
            s1.mc_mean,
            s1.mc_se
        );
    }
}

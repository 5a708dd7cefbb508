//! Derivative-free constrained minimization shared by both controllers:
//! bound-constrained Nelder-Mead with quadratic penalties for nonlinear
//! inequality constraints, driven from multiple deterministic starts.
//!
//! Decision vectors here are at most a few entries long (one per horizon
//! step), well inside the simplex method's comfort zone. No internal
//! randomness: identical inputs produce identical outputs.

use thiserror::Error;

/// Constraint convention: `g_k(u) <= 0` means satisfied.
pub type ScalarFn<'a> = Box<dyn Fn(&[f64]) -> f64 + 'a>;

pub struct NlpProblem<'a> {
    pub objective: ScalarFn<'a>,
    pub constraints: Vec<ScalarFn<'a>>,
    /// Per-coordinate `[lo, hi]` box.
    pub bounds: Vec<(f64, f64)>,
}

impl<'a> NlpProblem<'a> {
    pub fn unconstrained<F: Fn(&[f64]) -> f64 + 'a>(objective: F, bounds: Vec<(f64, f64)>) -> Self {
        NlpProblem {
            objective: Box::new(objective),
            constraints: Vec::new(),
            bounds,
        }
    }

    pub fn dimension(&self) -> usize {
        self.bounds.len()
    }

    /// Largest constraint residual at `u`; negative when strictly feasible,
    /// zero when unconstrained.
    pub fn max_residual(&self, u: &[f64]) -> f64 {
        if self.constraints.is_empty() {
            return 0.0;
        }
        self.constraints
            .iter()
            .map(|g| g(u))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpSolution {
    pub minimizer: Vec<f64>,
    pub objective: f64,
    pub max_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tolerances {
    /// Absolute spread of simplex objective values at convergence.
    pub f_tol: f64,
    /// Absolute simplex extent at convergence.
    pub x_tol: f64,
    /// Feasibility threshold on constraint residuals.
    pub feasibility: f64,
    /// Nelder-Mead iteration cap per penalty round.
    pub max_iterations: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            f_tol: 1e-12,
            x_tol: 1e-9,
            feasibility: 1e-6,
            max_iterations: 400,
        }
    }
}

/// Penalty schedule: initial weight 10, multiplied by 10 each round.
///
/// A quadratic penalty leaves a residual of roughly `|grad f| / (2 w)` on
/// active constraints, so the scheduled rounds alone cannot always reach
/// the feasibility tolerance; when the best point is still infeasible the
/// schedule continues (tight warm-started rounds) up to `MAX_PENALTY_WEIGHT`.
pub const PENALTY_ROUNDS: usize = 4;
pub const INITIAL_PENALTY_WEIGHT: f64 = 10.0;
pub const MAX_PENALTY_WEIGHT: f64 = 1e14;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("problem has no decision variables")]
    EmptyProblem,
    #[error("bounds are inverted at coordinate {0}")]
    InvertedBounds(usize),
    #[error("no start point lies inside the bounds")]
    NoValidStart,
    #[error("no feasible point found at maximum penalty (best residual {max_residual:.3e})")]
    Infeasible {
        best: NlpSolution,
        max_residual: f64,
    },
}

/// Quadratic penalty composite: `f(u) + weight * sum_k max(0, g_k(u))^2`.
pub fn penalize<'b, 'a: 'b>(
    problem: &'b NlpProblem<'a>,
    weight: f64,
) -> impl Fn(&[f64]) -> f64 + 'b {
    move |u: &[f64]| {
        let mut value = (problem.objective)(u);
        for g in &problem.constraints {
            let r = g(u);
            if r > 0.0 {
                value += weight * r * r;
            }
        }
        value
    }
}

/// Folds a point into the box by reflecting at the violated faces, then
/// clamping (reflection can overshoot the opposite face for large steps).
fn reflect_into_box(u: &mut [f64], bounds: &[(f64, f64)]) {
    for (x, &(lo, hi)) in u.iter_mut().zip(bounds) {
        if *x < lo {
            *x = lo + (lo - *x);
        }
        if *x > hi {
            *x = hi - (*x - hi);
        }
        *x = x.clamp(lo, hi);
    }
}

struct SimplexPoint {
    x: Vec<f64>,
    f: f64,
}

/// Standard Nelder-Mead (reflection 1, expansion 2, contraction 1/2,
/// shrink 1/2) with every trial point reflected into the box.
/// `step_fraction` sizes the initial simplex relative to the box width.
fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: &F,
    start: &[f64],
    bounds: &[(f64, f64)],
    tol: &Tolerances,
    step_fraction: f64,
) -> (Vec<f64>, f64, usize, bool) {
    let dim = start.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64]| {
        evals += 1;
        f(x)
    };

    // Initial simplex: the start plus one step along each coordinate,
    // stepping inward when the start sits at the upper face.
    let mut simplex: Vec<SimplexPoint> = Vec::with_capacity(dim + 1);
    let fx = eval(start);
    simplex.push(SimplexPoint {
        x: start.to_vec(),
        f: fx,
    });
    for d in 0..dim {
        let (lo, hi) = bounds[d];
        let width = (hi - lo).max(1e-12);
        let step = step_fraction * width;
        let mut x = start.to_vec();
        x[d] = if start[d] + step <= hi {
            start[d] + step
        } else {
            start[d] - step
        };
        reflect_into_box(&mut x, bounds);
        let fx = eval(&x);
        simplex.push(SimplexPoint { x, f: fx });
    }

    let mut iterations = 0usize;
    let converged = loop {
        simplex.sort_by(|a, b| a.f.total_cmp(&b.f));
        let spread = simplex[dim].f - simplex[0].f;
        let extent = (0..dim)
            .map(|d| {
                simplex
                    .iter()
                    .map(|p| p.x[d])
                    .fold(f64::NEG_INFINITY, f64::max)
                    - simplex.iter().map(|p| p.x[d]).fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        if spread <= tol.f_tol && extent <= tol.x_tol {
            break true;
        }
        if iterations >= tol.max_iterations {
            break false;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..dim)
            .map(|d| simplex[..dim].iter().map(|p| p.x[d]).sum::<f64>() / dim as f64)
            .collect();
        let worst = simplex[dim].x.clone();
        let make = |coef: f64| {
            let mut x: Vec<f64> = centroid
                .iter()
                .zip(&worst)
                .map(|(&c, &w)| c + coef * (c - w))
                .collect();
            reflect_into_box(&mut x, bounds);
            x
        };

        let reflected = make(1.0);
        let f_reflected = eval(&reflected);
        if f_reflected < simplex[0].f {
            let expanded = make(2.0);
            let f_expanded = eval(&expanded);
            simplex[dim] = if f_expanded < f_reflected {
                SimplexPoint {
                    x: expanded,
                    f: f_expanded,
                }
            } else {
                SimplexPoint {
                    x: reflected,
                    f: f_reflected,
                }
            };
            continue;
        }
        if f_reflected < simplex[dim - 1].f {
            simplex[dim] = SimplexPoint {
                x: reflected,
                f: f_reflected,
            };
            continue;
        }
        let contracted = if f_reflected < simplex[dim].f {
            make(0.5)
        } else {
            make(-0.5)
        };
        let f_contracted = eval(&contracted);
        if f_contracted < simplex[dim].f.min(f_reflected) {
            simplex[dim] = SimplexPoint {
                x: contracted,
                f: f_contracted,
            };
            continue;
        }
        // Shrink toward the best vertex.
        let best = simplex[0].x.clone();
        for p in simplex.iter_mut().skip(1) {
            for (x, &b) in p.x.iter_mut().zip(&best) {
                *x = b + 0.5 * (*x - b);
            }
            reflect_into_box(&mut p.x, bounds);
            p.f = eval(&p.x);
        }
    };
    simplex.sort_by(|a, b| a.f.total_cmp(&b.f));
    let best = simplex.remove(0);
    (best.x, best.f, evals, converged)
}

/// Minimizes `problem` over its box from each start: each start runs the
/// full penalty schedule, chaining rounds from the previous round's
/// minimizer, and the best feasible result wins. Returns an infeasibility
/// report (carrying the best attempt) when no start reaches the
/// feasibility tolerance at maximum penalty.
pub fn minimize(
    problem: &NlpProblem,
    starts: &[Vec<f64>],
    tol: &Tolerances,
) -> Result<NlpSolution, OptimizerError> {
    let dim = problem.dimension();
    if dim == 0 {
        return Err(OptimizerError::EmptyProblem);
    }
    for (d, &(lo, hi)) in problem.bounds.iter().enumerate() {
        if lo > hi {
            return Err(OptimizerError::InvertedBounds(d));
        }
    }
    let valid_starts: Vec<&Vec<f64>> = starts
        .iter()
        .filter(|s| {
            s.len() == dim
                && s.iter()
                    .zip(&problem.bounds)
                    .all(|(&x, &(lo, hi))| x >= lo && x <= hi)
        })
        .collect();
    if valid_starts.is_empty() {
        return Err(OptimizerError::NoValidStart);
    }

    let mut best: Option<NlpSolution> = None;
    for start in valid_starts {
        let mut current = start.clone();
        let mut iterations = 0usize;
        let mut converged = true;
        if problem.constraints.is_empty() {
            let (x, _, iters, conv) = nelder_mead(
                &|u| (problem.objective)(u),
                &current,
                &problem.bounds,
                tol,
                0.1,
            );
            current = x;
            iterations += iters;
            converged = conv;
        } else {
            let mut weight = INITIAL_PENALTY_WEIGHT;
            for round in 0..PENALTY_ROUNDS {
                // Later rounds only track the shrinking penalty residual,
                // so they restart from a tight simplex.
                let step_fraction = if round == 0 { 0.1 } else { 0.02 };
                let penalized = penalize(problem, weight);
                let (x, _, iters, conv) =
                    nelder_mead(&penalized, &current, &problem.bounds, tol, step_fraction);
                current = x;
                iterations += iters;
                converged = conv;
                weight *= 10.0;
                // A strictly feasible minimizer of this round also
                // minimizes every harder round (the penalty vanishes on a
                // neighborhood), so the remaining rounds are no-ops.
                if problem.max_residual(&current) < 0.0 {
                    break;
                }
            }
        }
        let objective = (problem.objective)(&current);
        let max_residual = problem.max_residual(&current);
        let candidate = NlpSolution {
            minimizer: current,
            objective,
            max_residual,
            iterations,
            converged: converged && max_residual <= tol.feasibility,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                let cand_feasible = candidate.max_residual <= tol.feasibility;
                let best_feasible = b.max_residual <= tol.feasibility;
                match (cand_feasible, best_feasible) {
                    (true, false) => true,
                    (false, true) => false,
                    (true, true) => candidate.objective < b.objective,
                    (false, false) => candidate.max_residual < b.max_residual,
                }
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    let mut best = best.expect("at least one start was processed");

    // Quadratic penalties cannot reach tight feasibility at the scheduled
    // weights when a constraint is active; keep escalating on the winning
    // candidate alone until the residual clears the tolerance.
    if !problem.constraints.is_empty() && best.max_residual > tol.feasibility {
        let mut weight = INITIAL_PENALTY_WEIGHT * 10f64.powi(PENALTY_ROUNDS as i32);
        let mut current = best.minimizer.clone();
        let mut iterations = best.iterations;
        let mut converged = best.converged;
        while weight <= MAX_PENALTY_WEIGHT {
            let penalized = penalize(problem, weight);
            let (x, _, iters, conv) = nelder_mead(&penalized, &current, &problem.bounds, tol, 1e-3);
            current = x;
            iterations += iters;
            converged = conv;
            if problem.max_residual(&current) <= tol.feasibility {
                break;
            }
            weight *= 10.0;
        }
        let objective = (problem.objective)(&current);
        let max_residual = problem.max_residual(&current);
        best = NlpSolution {
            minimizer: current,
            objective,
            max_residual,
            iterations,
            converged: converged && max_residual <= tol.feasibility,
        };
    }
    if best.max_residual > tol.feasibility {
        let max_residual = best.max_residual;
        return Err(OptimizerError::Infeasible { best, max_residual });
    }
    Ok(best)
}

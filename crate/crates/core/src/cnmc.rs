//! Constant-number Monte Carlo simulation of batch bicomponent coagulation.
//!
//! The simulation box always holds `N` particles and represents a growing
//! physical volume. Each event merges one uniformly chosen pair (the
//! acceptance-rejection step is trivial for a size-independent kernel),
//! duplicates a uniformly chosen survivor to restore `N`, and rescales the
//! represented concentration so the total mass density is conserved
//! exactly. The expected rescale factor per event is `(N-1)/N`.
//!
//! This module is the independent empirical oracle for the moment closure:
//! it solves the population balance by direct event sampling, with no
//! shared code path beyond the moment definitions.

use crate::moments::{MomentState, MOMENT_INDEX};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CnmcError {
    #[error("ensemble needs at least 2 particles, got {0}")]
    TooFewParticles(usize),
    #[error("invalid particle: drug mass {s} outside [0, p = {p}]")]
    InvalidParticle { p: f64, s: f64 },
    #[error("concentration must be positive, got {0}")]
    InvalidConcentration(f64),
    #[error("horizon must be >= 0, got {0}")]
    InvalidHorizon(f64),
}

/// One simulated particle: total mass and drug mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub p: f64,
    pub s: f64,
}

/// Fixed-size particle population with represented-volume bookkeeping.
#[derive(Debug, Clone)]
pub struct Ensemble {
    particles: Vec<Particle>,
    /// Physical number concentration represented by the `N` particles.
    concentration: f64,
    /// Elapsed physical time.
    time: f64,
}

impl Ensemble {
    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn concentration(&self) -> f64 {
        self.concentration
    }

    pub fn time(&self) -> f64 {
        self.time
    }
}

/// All particles equal to `(p0, s0)`, clock at zero.
pub fn init_monodisperse(n: usize, p0: f64, s0: f64, c0: f64) -> Result<Ensemble, CnmcError> {
    if n < 2 {
        return Err(CnmcError::TooFewParticles(n));
    }
    if !(p0 > 0.0) || !(0.0 <= s0 && s0 <= p0) {
        return Err(CnmcError::InvalidParticle { p: p0, s: s0 });
    }
    if !(c0 > 0.0) {
        return Err(CnmcError::InvalidConcentration(c0));
    }
    Ok(Ensemble {
        particles: vec![Particle { p: p0, s: s0 }; n],
        concentration: c0,
        time: 0.0,
    })
}

/// Interevent time for the constant kernel: `N-1` choose-2 pairs times
/// `k0 / V` per pair with `V = N / C` gives a total event rate of
/// `k0 * C * (N - 1) / 2`.
pub fn event_dt(n: usize, k0: f64, concentration: f64) -> f64 {
    2.0 / ((n as f64 - 1.0) * k0 * concentration)
}

/// Executes one coagulation event in place and returns the elapsed time.
///
/// For a non-constant kernel the pair selection would repeat with an
/// acceptance test against the kernel maximum; for the constant kernel
/// every proposal is accepted.
pub fn coagulation_event<R: Rng + ?Sized>(ensemble: &mut Ensemble, k0: f64, rng: &mut R) -> f64 {
    let n = ensemble.particles.len();
    debug_assert!(n >= 2);
    let dt = event_dt(n, k0, ensemble.concentration);

    // Uniform pair: acceptance-rejection degenerates to always-accept.
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n - 1);
    if b >= a {
        b += 1;
    }

    // Merge b into a; slot b will hold the duplicate.
    ensemble.particles[a].p += ensemble.particles[b].p;
    ensemble.particles[a].s += ensemble.particles[b].s;

    // Duplicate a uniform survivor (the merged particle included).
    let mut src = rng.gen_range(0..n - 1);
    if src >= b {
        src += 1;
    }

    // Volume rescaling chosen so concentration * mean(p) is unchanged:
    // the survivors carry total mass T and the duplicate adds p_dup, so
    // the box volume grows by (T + p_dup) / T.
    let total_mass: f64 = ensemble
        .particles
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != b)
        .map(|(_, q)| q.p)
        .sum();
    let duplicate = ensemble.particles[src];
    ensemble.particles[b] = duplicate;
    ensemble.concentration *= total_mass / (total_mass + duplicate.p);
    ensemble.time += dt;
    dt
}

/// Empirical moment estimates: `M_ij = C * (1/N) * sum_k p_k^i s_k^j`.
pub fn ensemble_moments(ensemble: &Ensemble) -> MomentState {
    let n = ensemble.particles.len() as f64;
    let mut sums = [0.0; 9];
    for q in &ensemble.particles {
        for (k, &(i, j)) in MOMENT_INDEX.iter().enumerate() {
            sums[k] += q.p.powi(i as i32) * q.s.powi(j as i32);
        }
    }
    let scale = ensemble.concentration / n;
    let mut out = [0.0; 9];
    for k in 0..9 {
        out[k] = scale * sums[k];
    }
    MomentState(out)
}

/// Runs the batch event loop until `t_end`, returning moment snapshots at
/// the requested output times (each snapshot reflects the last event at or
/// before that time). Output times must be nondecreasing.
pub fn run_batch<R: Rng + ?Sized>(
    ensemble: &mut Ensemble,
    k0: f64,
    output_times: &[f64],
    rng: &mut R,
) -> Result<Vec<(f64, MomentState)>, CnmcError> {
    if output_times.iter().any(|&t| t < 0.0) {
        return Err(CnmcError::InvalidHorizon(
            *output_times.iter().find(|&&t| t < 0.0).unwrap_or(&f64::NAN),
        ));
    }
    let mut snapshots = Vec::with_capacity(output_times.len());
    for &t_out in output_times {
        while ensemble.time + event_dt(ensemble.len(), k0, ensemble.concentration) <= t_out {
            coagulation_event(ensemble, k0, rng);
        }
        snapshots.push((t_out, ensemble_moments(ensemble)));
    }
    Ok(snapshots)
}

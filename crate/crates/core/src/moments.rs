//! Closed moment ODE system for bicomponent coagulation with continuous
//! feed and withdrawal.
//!
//! Particles carry a total mass `p` and a drug mass `s <= p`. The state is
//! the nine mixed moments `M_ij` of the population density over `(p, s)`
//! for `i, j <= 2`. For a size-independent kernel the coagulation term
//! closes exactly over this set: merging two particles adds their `p` and
//! `s`, so the rate of `M_ij` is a binomial convolution of lower moments.
//!
//! The flow terms are linear: the vessel exchanges material at rate
//! `alpha` against a monodisperse feed whose moments are
//! `c_f * p_f^i * s_f^j`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Moment exponent pairs `(i, j)` in canonical state order.
pub const MOMENT_INDEX: [(usize, usize); 9] = [
    (0, 0),
    (1, 0),
    (0, 1),
    (1, 1),
    (2, 0),
    (0, 2),
    (1, 2),
    (2, 1),
    (2, 2),
];

/// Column labels matching [`MOMENT_INDEX`].
pub const MOMENT_NAMES: [&str; 9] = [
    "m00", "m10", "m01", "m11", "m20", "m02", "m12", "m21", "m22",
];

/// Relative slack used when checking state invariants along trajectories.
///
/// Monodisperse populations sit exactly on the boundary of several
/// inequalities (e.g. `m02 = m11` when `s = p`), so RK4 arithmetic can
/// undershoot by a few ulps. The slack is far below any physically
/// meaningful violation.
pub const INVARIANT_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MomentError {
    #[error("invalid feed: {0}")]
    InvalidFeed(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid step size: {0}")]
    InvalidStep(String),
    #[error("degenerate population: m00 = {m00} is not positive")]
    DegeneratePopulation { m00: f64 },
    #[error("state invariant violated at t = {time}: {detail} (step size too large?)")]
    InvariantViolation { time: f64, detail: String },
}

/// The nine mixed moments `[M00, M10, M01, M11, M20, M02, M12, M21, M22]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MomentState(pub [f64; 9]);

/// Time derivative of a [`MomentState`], same component order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentDerivative(pub [f64; 9]);

/// Population-averaged ratios derived from a moment state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Mean drug mass per particle, `M01 / M00`.
    pub mean_drug: f64,
    /// Mean total mass per particle, `M10 / M00`.
    pub mean_mass: f64,
    /// Second drug moment per particle, `M02 / M00`.
    pub drug_second: f64,
}

impl MomentState {
    pub fn zero() -> Self {
        MomentState([0.0; 9])
    }

    /// Position of moment `(i, j)` in the canonical order. Panics for
    /// exponents outside `0..=2`.
    pub fn position(i: usize, j: usize) -> usize {
        MOMENT_INDEX
            .iter()
            .position(|&(a, b)| a == i && b == j)
            .expect("moment exponents must be in 0..=2")
    }

    pub fn moment(&self, i: usize, j: usize) -> f64 {
        self.0[Self::position(i, j)]
    }

    pub fn m00(&self) -> f64 {
        self.0[0]
    }
    pub fn m10(&self) -> f64 {
        self.0[1]
    }
    pub fn m01(&self) -> f64 {
        self.0[2]
    }
    pub fn m11(&self) -> f64 {
        self.0[3]
    }
    pub fn m20(&self) -> f64 {
        self.0[4]
    }
    pub fn m02(&self) -> f64 {
        self.0[5]
    }
    pub fn m12(&self) -> f64 {
        self.0[6]
    }
    pub fn m21(&self) -> f64 {
        self.0[7]
    }
    pub fn m22(&self) -> f64 {
        self.0[8]
    }

    /// Nonnegativity and the pointwise `s <= p` ordering chain:
    /// `m01 <= m10`, `m02 <= m11 <= m20`, `m12 <= m21`.
    ///
    /// These are preserved by the dynamics for any valid feed and are
    /// enforced along integrated trajectories.
    pub fn check_ordering(&self, slack: f64) -> Result<(), String> {
        let scale = 1.0_f64.max(self.0.iter().fold(0.0, |a, &x| a.max(x.abs())));
        let tol = slack * scale;
        for (k, &m) in self.0.iter().enumerate() {
            if m < -tol {
                return Err(format!("{} = {m} is negative", MOMENT_NAMES[k]));
            }
        }
        let pairs = [
            ("m01", self.m01(), "m10", self.m10()),
            ("m02", self.m02(), "m11", self.m11()),
            ("m11", self.m11(), "m20", self.m20()),
            ("m12", self.m12(), "m21", self.m21()),
        ];
        for (lo_name, lo, hi_name, hi) in pairs {
            if lo > hi + tol {
                return Err(format!("{lo_name} = {lo} exceeds {hi_name} = {hi}"));
            }
        }
        Ok(())
    }

    /// Cauchy-Schwarz realizability: `m11^2 <= m20*m02`, `m10^2 <= m00*m20`,
    /// `m01^2 <= m00*m02`.
    ///
    /// Required of any moment vector realizable by a nonnegative measure.
    /// Checked separately from [`check_ordering`] because operating states
    /// taken from external data may violate it while still integrating
    /// cleanly (the flow terms restore realizability).
    pub fn check_realizable(&self, slack: f64) -> Result<(), String> {
        let scale = 1.0_f64.max(self.0.iter().fold(0.0, |a, &x| a.max(x.abs())));
        let tol = slack * scale * scale;
        let triples = [
            (
                "m11^2 <= m20*m02",
                self.m11() * self.m11(),
                self.m20() * self.m02(),
            ),
            (
                "m10^2 <= m00*m20",
                self.m10() * self.m10(),
                self.m00() * self.m20(),
            ),
            (
                "m01^2 <= m00*m02",
                self.m01() * self.m01(),
                self.m00() * self.m02(),
            ),
        ];
        for (name, lhs, rhs) in triples {
            if lhs > rhs + tol {
                return Err(format!("{name} violated: {lhs} > {rhs}"));
            }
        }
        Ok(())
    }
}

/// Continuous-flow feed description. The feed is monodisperse: every
/// entering particle has total mass `p_f` and drug mass `s_f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedSpec {
    /// Inflow/outflow rate per unit volume (1/time).
    pub alpha: f64,
    /// Feed number concentration.
    pub c_f: f64,
    /// Total mass of a feed particle.
    pub p_f: f64,
    /// Drug mass of a feed particle (the manipulated variable).
    pub s_f: f64,
}

impl FeedSpec {
    pub fn validate(&self) -> Result<(), MomentError> {
        if !(self.alpha >= 0.0) {
            return Err(MomentError::InvalidFeed(format!(
                "alpha = {} must be >= 0",
                self.alpha
            )));
        }
        if !(self.c_f >= 0.0) {
            return Err(MomentError::InvalidFeed(format!(
                "c_f = {} must be >= 0",
                self.c_f
            )));
        }
        if !(0.0 <= self.s_f && self.s_f <= self.p_f) {
            return Err(MomentError::InvalidFeed(format!(
                "s_f = {} must lie in [0, p_f = {}]",
                self.s_f, self.p_f
            )));
        }
        Ok(())
    }

    /// Same feed with a different drug content.
    pub fn with_drug(&self, s_f: f64) -> FeedSpec {
        FeedSpec { s_f, ..*self }
    }

    /// Same feed with a different number concentration.
    pub fn with_concentration(&self, c_f: f64) -> FeedSpec {
        FeedSpec { c_f, ..*self }
    }
}

/// Coagulation kernel selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Size-independent kernel `k(r1, r2) = k0`. The only kernel for which
    /// the nine-moment set closes without truncation.
    Constant { k0: f64 },
}

impl KernelSpec {
    pub fn constant(k0: f64) -> Self {
        KernelSpec::Constant { k0 }
    }

    pub fn k0(&self) -> f64 {
        match *self {
            KernelSpec::Constant { k0 } => k0,
        }
    }

    pub fn validate(&self) -> Result<(), MomentError> {
        let k0 = self.k0();
        if !(k0 > 0.0) {
            return Err(MomentError::InvalidKernel(format!("k0 = {k0} must be > 0")));
        }
        Ok(())
    }
}

/// Moments of the monodisperse feed: entry `(i, j)` is `c_f * p_f^i * s_f^j`.
pub fn feed_moments(feed: &FeedSpec) -> Result<MomentState, MomentError> {
    feed.validate()?;
    Ok(MomentState(feed_moment_table(feed)))
}

#[inline]
fn feed_moment_table(feed: &FeedSpec) -> [f64; 9] {
    let c = feed.c_f;
    let p = feed.p_f;
    let s = feed.s_f;
    [
        c,
        c * p,
        c * s,
        c * p * s,
        c * p * p,
        c * s * s,
        c * p * s * s,
        c * p * p * s,
        c * p * p * s * s,
    ]
}

/// Right-hand side of the closed moment system:
///
/// ```text
/// dM_ij/dt = (k0/2) * sum_{a<=i, b<=j} C(i,a) C(j,b) M_ab M_{i-a,j-b}
///            - k0 * M_ij * M00
///            + alpha * (c_f * p_f^i * s_f^j - M_ij)
/// ```
///
/// The binomial sum is exact for the constant kernel; no moments outside
/// the nine-element set appear.
pub fn moment_rhs(
    state: &MomentState,
    feed: &FeedSpec,
    kernel: &KernelSpec,
) -> Result<MomentDerivative, MomentError> {
    feed.validate()?;
    kernel.validate()?;
    if state.0.iter().any(|m| !m.is_finite()) {
        return Err(MomentError::InvalidState("non-finite moment entry".into()));
    }
    Ok(MomentDerivative(rhs_inner(
        &state.0,
        &feed_moment_table(feed),
        kernel.k0(),
        feed.alpha,
    )))
}

/// Closure right-hand side with the binomial convolutions written out.
/// `feed_m` is the feed moment table of [`feed_moments`], precomputed once
/// per integration segment.
#[inline]
fn rhs_inner(m: &[f64; 9], feed_m: &[f64; 9], k0: f64, alpha: f64) -> [f64; 9] {
    let [m00, m10, m01, m11, m20, m02, m12, m21, m22] = *m;
    // Coagulation gain sum_{a<=i, b<=j} C(i,a) C(j,b) M_ab M_{i-a,j-b}.
    let gain = [
        m00 * m00,
        2.0 * m00 * m10,
        2.0 * m00 * m01,
        2.0 * (m00 * m11 + m10 * m01),
        2.0 * (m00 * m20 + m10 * m10),
        2.0 * (m00 * m02 + m01 * m01),
        2.0 * (m00 * m12 + m10 * m02) + 4.0 * m01 * m11,
        2.0 * (m00 * m21 + m01 * m20) + 4.0 * m10 * m11,
        2.0 * (m00 * m22 + m02 * m20) + 4.0 * (m01 * m21 + m10 * m12 + m11 * m11),
    ];
    let mut out = [0.0; 9];
    for k in 0..9 {
        // Factored so the mass-conserving components cancel bitwise: for
        // m10 and m01 the gain is exactly 2 * m[k] * m00.
        out[k] = 0.5 * k0 * (gain[k] - 2.0 * m[k] * m00) + alpha * (feed_m[k] - m[k]);
    }
    out
}

#[inline]
fn rk4_step(m: &[f64; 9], feed_m: &[f64; 9], k0: f64, alpha: f64, dt: f64) -> [f64; 9] {
    let axpy = |s: &[f64; 9], h: f64, d: &[f64; 9]| {
        let mut out = *s;
        for k in 0..9 {
            out[k] += h * d[k];
        }
        out
    };
    let k1 = rhs_inner(m, feed_m, k0, alpha);
    let k2 = rhs_inner(&axpy(m, 0.5 * dt, &k1), feed_m, k0, alpha);
    let k3 = rhs_inner(&axpy(m, 0.5 * dt, &k2), feed_m, k0, alpha);
    let k4 = rhs_inner(&axpy(m, dt, &k3), feed_m, k0, alpha);
    let mut out = *m;
    for k in 0..9 {
        out[k] += dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
    }
    out
}

fn step_count(t_end: f64, dt: f64) -> Result<usize, MomentError> {
    if !(dt > 0.0) {
        return Err(MomentError::InvalidStep(format!("dt = {dt} must be > 0")));
    }
    if !(t_end > 0.0) {
        return Err(MomentError::InvalidStep(format!(
            "t_end = {t_end} must be > 0"
        )));
    }
    let steps = (t_end / dt).round();
    if (steps * dt - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(MomentError::InvalidStep(format!(
            "t_end = {t_end} is not a multiple of dt = {dt}"
        )));
    }
    Ok(steps as usize)
}

/// One segment of a piecewise-constant feed schedule.
#[derive(Debug, Clone, Copy)]
pub struct FeedSegment {
    pub feed: FeedSpec,
    pub duration: f64,
}

/// Fixed-step RK4 trajectory under a constant feed, sampled at every step
/// (including `t = 0`). Ordering invariants are checked at each sample and
/// a violation aborts with the offending time.
pub fn integrate(
    state: &MomentState,
    feed: &FeedSpec,
    kernel: &KernelSpec,
    dt: f64,
    t_end: f64,
) -> Result<Vec<(f64, MomentState)>, MomentError> {
    integrate_schedule(
        state,
        &[FeedSegment {
            feed: *feed,
            duration: t_end,
        }],
        kernel,
        dt,
    )
}

/// [`integrate`] over a piecewise-constant feed schedule. Each segment
/// duration must be a positive multiple of `dt`.
pub fn integrate_schedule(
    state: &MomentState,
    schedule: &[FeedSegment],
    kernel: &KernelSpec,
    dt: f64,
) -> Result<Vec<(f64, MomentState)>, MomentError> {
    kernel.validate()?;
    state
        .check_ordering(INVARIANT_SLACK)
        .map_err(|detail| MomentError::InvariantViolation { time: 0.0, detail })?;
    let mut traj = Vec::new();
    traj.push((0.0, *state));
    let mut current = state.0;
    let mut t = 0.0;
    for segment in schedule {
        segment.feed.validate()?;
        let feed_m = feed_moment_table(&segment.feed);
        let steps = step_count(segment.duration, dt)?;
        for _ in 0..steps {
            current = rk4_step(&current, &feed_m, kernel.k0(), segment.feed.alpha, dt);
            t += dt;
            let s = MomentState(current);
            s.check_ordering(INVARIANT_SLACK)
                .map_err(|detail| MomentError::InvariantViolation { time: t, detail })?;
            traj.push((t, s));
        }
    }
    Ok(traj)
}

/// Final state of [`integrate`] without storing the trajectory. This is
/// the hot path used by the controllers; the ordering invariants are
/// checked on the returned state rather than per step.
pub fn propagate(
    state: &MomentState,
    feed: &FeedSpec,
    kernel: &KernelSpec,
    dt: f64,
    t_end: f64,
) -> Result<MomentState, MomentError> {
    kernel.validate()?;
    feed.validate()?;
    let steps = step_count(t_end, dt)?;
    let feed_m = feed_moment_table(feed);
    let k0 = kernel.k0();
    let mut current = state.0;
    for _ in 0..steps {
        current = rk4_step(&current, &feed_m, k0, feed.alpha, dt);
    }
    let out = MomentState(current);
    out.check_ordering(INVARIANT_SLACK)
        .map_err(|detail| MomentError::InvariantViolation {
            time: t_end,
            detail,
        })?;
    Ok(out)
}

/// Population averages `(M01/M00, M10/M00, M02/M00)`.
///
/// Refuses near-empty populations: the ratios are meaningless when the
/// number concentration vanishes.
pub fn summary(state: &MomentState) -> Result<Summary, MomentError> {
    let m00 = state.m00();
    if m00 <= 1e-12 {
        return Err(MomentError::DegeneratePopulation { m00 });
    }
    Ok(Summary {
        mean_drug: state.m01() / m00,
        mean_mass: state.m10() / m00,
        drug_second: state.m02() / m00,
    })
}

/// Analytic number-concentration law for batch constant-kernel coagulation:
/// `M00(t) = M00(0) / (1 + k0 * M00(0) * t / 2)`.
///
/// Independent oracle for the integrator; also exposed to the Monte Carlo
/// oracle tests.
pub fn analytic_batch_m00(m00_initial: f64, k0: f64, t: f64) -> f64 {
    m00_initial / (1.0 + 0.5 * k0 * m00_initial * t)
}

/// Steady-state number concentration under continuous flow: the positive
/// root of `(k0/2) M^2 + alpha M - alpha c_f = 0`.
pub fn steady_state_m00(k0: f64, alpha: f64, c_f: f64) -> f64 {
    (-alpha + (alpha * alpha + 2.0 * k0 * alpha * c_f).sqrt()) / k0
}

/// Initial moment vector shared by the reference experiments.
pub fn reference_initial_state() -> MomentState {
    MomentState([1.9, 2.0, 0.2, 0.2, 2.3, 0.02, 0.03, 0.3, 0.05])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn batch_feed() -> FeedSpec {
        FeedSpec {
            alpha: 0.0,
            c_f: 1.0,
            p_f: 1.0,
            s_f: 0.1,
        }
    }

    fn kernel() -> KernelSpec {
        KernelSpec::constant(0.06)
    }

    #[test]
    fn feed_moments_point_mass() {
        let f = FeedSpec {
            alpha: 0.5,
            c_f: 1.0,
            p_f: 1.0,
            s_f: 0.1,
        };
        let m = feed_moments(&f).unwrap();
        let expected = [1.0, 1.0, 0.1, 0.1, 1.0, 0.01, 0.01, 0.1, 0.01];
        for k in 0..9 {
            assert_abs_diff_eq!(m.0[k], expected[k], epsilon = 1e-15);
        }
    }

    #[test]
    fn feed_moments_empty_feed() {
        let f = FeedSpec {
            alpha: 0.5,
            c_f: 0.0,
            p_f: 1.0,
            s_f: 0.3,
        };
        let m = feed_moments(&f).unwrap();
        assert_eq!(m, MomentState::zero());
    }

    #[test]
    fn feed_moments_scales_with_concentration() {
        let f = FeedSpec {
            alpha: 0.0,
            c_f: 2.0,
            p_f: 1.0,
            s_f: 0.5,
        };
        let m = feed_moments(&f).unwrap();
        assert_abs_diff_eq!(m.m00(), 2.0);
        assert_abs_diff_eq!(m.m01(), 1.0);
        assert_abs_diff_eq!(m.m02(), 0.5);
        assert_abs_diff_eq!(m.m22(), 0.5);
    }

    #[test]
    fn feed_moments_rejects_invalid() {
        let bad = FeedSpec {
            alpha: 0.5,
            c_f: 1.0,
            p_f: 1.0,
            s_f: 1.5,
        };
        assert!(feed_moments(&bad).is_err());
        let bad = FeedSpec {
            alpha: -0.1,
            c_f: 1.0,
            p_f: 1.0,
            s_f: 0.1,
        };
        assert!(feed_moments(&bad).is_err());
    }

    #[test]
    fn rhs_batch_number_decay() {
        // dM00/dt = -(k0/2) M00^2 by direct substitution in the closure.
        let mut state = MomentState::zero();
        state.0[0] = 1.0;
        let d = moment_rhs(&state, &batch_feed(), &kernel()).unwrap();
        assert_abs_diff_eq!(d.0[0], -0.03, epsilon = 1e-15);
    }

    #[test]
    fn rhs_batch_conserves_both_masses_exactly() {
        let state = reference_initial_state();
        let d = moment_rhs(&state, &batch_feed(), &kernel()).unwrap();
        assert_eq!(d.0[MomentState::position(1, 0)], 0.0);
        assert_eq!(d.0[MomentState::position(0, 1)], 0.0);
    }

    #[test]
    fn rhs_flow_relaxation_toward_feed() {
        // With coagulation negligible, dm00/dt = alpha * (c_f - m00).
        let mut state = MomentState::zero();
        state.0[0] = 1.9;
        let feed = FeedSpec {
            alpha: 0.5,
            c_f: 1.0,
            p_f: 1.0,
            s_f: 0.1,
        };
        let tiny = KernelSpec::constant(1e-15);
        let d = moment_rhs(&state, &feed, &tiny).unwrap();
        assert_abs_diff_eq!(d.0[0], -0.45, epsilon = 1e-12);
    }

    #[test]
    fn integrate_matches_analytic_batch_law() {
        let x0 = reference_initial_state();
        let traj = integrate(&x0, &batch_feed(), &kernel(), 0.01, 10.0).unwrap();
        let (t_end, last) = traj.last().unwrap();
        assert_abs_diff_eq!(*t_end, 10.0, epsilon = 1e-9);
        let expected = analytic_batch_m00(1.9, 0.06, 10.0);
        assert_relative_eq!(last.m00(), expected, max_relative = 1e-6);
        assert_eq!(traj.len(), 1001);
    }

    #[test]
    fn integrate_reaches_flow_steady_state() {
        let feed = FeedSpec {
            alpha: 0.5,
            c_f: 1.0,
            p_f: 1.0,
            s_f: 0.1,
        };
        let x0 = reference_initial_state();
        let end = propagate(&x0, &feed, &kernel(), 0.01, 100.0).unwrap();
        let root = steady_state_m00(0.06, 0.5, 1.0);
        assert_relative_eq!(end.m00(), root, max_relative = 1e-9);
        // Flow pins the mass densities at the feed values.
        assert_relative_eq!(end.m10(), 1.0, max_relative = 1e-9);
        assert_relative_eq!(end.m01(), 0.1, max_relative = 1e-9);
    }

    #[test]
    fn integrate_zero_state_zero_feed_is_fixed_point() {
        let feed = FeedSpec {
            alpha: 0.5,
            c_f: 0.0,
            p_f: 1.0,
            s_f: 0.0,
        };
        let traj = integrate(&MomentState::zero(), &feed, &kernel(), 0.01, 1.0).unwrap();
        for (_, s) in traj {
            assert_eq!(s, MomentState::zero());
        }
    }

    #[test]
    fn integrate_rejects_bad_steps() {
        let x0 = reference_initial_state();
        assert!(integrate(&x0, &batch_feed(), &kernel(), 0.0, 1.0).is_err());
        assert!(integrate(&x0, &batch_feed(), &kernel(), 0.3, 1.0).is_err());
    }

    #[test]
    fn oversized_step_reports_offending_time() {
        // A huge step drives the fast-decaying number concentration
        // negative; the violation must carry the time it appeared.
        let mut x0 = MomentState::zero();
        x0.0[0] = 200.0;
        let err = integrate(&x0, &batch_feed(), &kernel(), 2.0, 10.0).unwrap_err();
        match err {
            MomentError::InvariantViolation { time, detail } => {
                assert!(time > 0.0 && time <= 10.0, "time {time}");
                assert!(detail.contains("negative"), "{detail}");
            }
            other => panic!("expected invariant violation, got {other}"),
        }
    }

    #[test]
    fn schedule_switches_feed_between_segments() {
        let x0 = reference_initial_state();
        let lean = FeedSpec {
            alpha: 0.5,
            c_f: 1.0,
            p_f: 1.0,
            s_f: 0.0,
        };
        let rich = FeedSpec { s_f: 0.4, ..lean };
        let traj = integrate_schedule(
            &x0,
            &[
                FeedSegment {
                    feed: lean,
                    duration: 2.0,
                },
                FeedSegment {
                    feed: rich,
                    duration: 2.0,
                },
            ],
            &kernel(),
            0.01,
        )
        .unwrap();
        assert_eq!(traj.len(), 401);
        // Piecing the segments manually must land on the same endpoint.
        let mid = propagate(&x0, &lean, &kernel(), 0.01, 2.0).unwrap();
        let end = propagate(&mid, &rich, &kernel(), 0.01, 2.0).unwrap();
        for k in 0..9 {
            assert_abs_diff_eq!(traj.last().unwrap().1 .0[k], end.0[k], epsilon = 1e-14);
        }
        // Drug mass drains under the lean feed, then recovers.
        let at_two = traj
            .iter()
            .find(|(t, _)| (*t - 2.0).abs() < 1e-9)
            .unwrap()
            .1;
        assert!(at_two.m01() < x0.m01());
        assert!(traj.last().unwrap().1.m01() > at_two.m01());
    }

    #[test]
    fn batch_mass_conservation_along_trajectory() {
        // The factored coagulation terms cancel bitwise for both mass
        // densities, so the trajectory holds them without drift.
        let x0 = reference_initial_state();
        let traj = integrate(&x0, &batch_feed(), &kernel(), 0.01, 10.0).unwrap();
        for (_, s) in traj {
            assert_eq!(s.m10(), 2.0);
            assert_eq!(s.m01(), 0.2);
        }
    }

    #[test]
    fn rk4_fourth_order_on_analytic_law() {
        // A stiff enough initial condition keeps the truncation error far
        // above roundoff so the order measurement is clean.
        let m00_0 = 100.0;
        let mut x0 = MomentState::zero();
        x0.0[0] = m00_0;
        x0.0[1] = m00_0;
        x0.0[2] = 0.1 * m00_0;
        x0.0[3] = 0.1 * m00_0;
        x0.0[4] = m00_0;
        x0.0[5] = 0.01 * m00_0;
        x0.0[6] = 0.01 * m00_0;
        x0.0[7] = 0.1 * m00_0;
        x0.0[8] = 0.01 * m00_0;
        let exact = analytic_batch_m00(m00_0, 0.06, 10.0);
        let coarse = propagate(&x0, &batch_feed(), &kernel(), 0.02, 10.0).unwrap();
        let fine = propagate(&x0, &batch_feed(), &kernel(), 0.01, 10.0).unwrap();
        let e_coarse = (coarse.m00() - exact).abs();
        let e_fine = (fine.m00() - exact).abs();
        let ratio = e_coarse / e_fine;
        assert!(
            (14.0..=18.0).contains(&ratio),
            "halving dt should cut the error ~16x, got {ratio} ({e_coarse} -> {e_fine})"
        );
    }

    #[test]
    fn summary_reference_state() {
        let s = summary(&reference_initial_state()).unwrap();
        assert_relative_eq!(s.mean_drug, 0.2 / 1.9, max_relative = 1e-15);
        assert_relative_eq!(s.mean_mass, 2.0 / 1.9, max_relative = 1e-15);
        assert_relative_eq!(s.drug_second, 0.02 / 1.9, max_relative = 1e-15);
    }

    #[test]
    fn summary_monodisperse_feed_state() {
        let f = FeedSpec {
            alpha: 0.0,
            c_f: 1.0,
            p_f: 1.0,
            s_f: 0.1,
        };
        let s = summary(&feed_moments(&f).unwrap()).unwrap();
        assert_abs_diff_eq!(s.mean_drug, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(s.mean_mass, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.drug_second, 0.01, epsilon = 1e-15);
    }

    #[test]
    fn summary_rejects_empty_population() {
        assert!(matches!(
            summary(&MomentState::zero()),
            Err(MomentError::DegeneratePopulation { .. })
        ));
    }

    #[test]
    fn reference_state_violates_realizability_but_not_ordering() {
        // The reference initial vector has m01^2 > m00*m02; ordering holds.
        let x0 = reference_initial_state();
        assert!(x0.check_ordering(INVARIANT_SLACK).is_ok());
        assert!(x0.check_realizable(INVARIANT_SLACK).is_err());
    }

    /// Random states satisfying the ordering chain, built from a mixture of
    /// two point masses so they are realizable by construction.
    fn arb_valid_state() -> impl Strategy<Value = MomentState> {
        (
            0.05..2.0f64,
            0.05..2.0f64,
            0.1..3.0f64,
            0.1..3.0f64,
            0.0..1.0f64,
            0.0..1.0f64,
        )
            .prop_map(|(c1, c2, p1, p2, frac1, frac2)| {
                let s1 = frac1 * p1;
                let s2 = frac2 * p2;
                let mut out = [0.0; 9];
                for (k, &(i, j)) in MOMENT_INDEX.iter().enumerate() {
                    out[k] = c1 * p1.powi(i as i32) * s1.powi(j as i32)
                        + c2 * p2.powi(i as i32) * s2.powi(j as i32);
                }
                MomentState(out)
            })
    }

    /// Independent closure reference: the generic binomial sum computed
    /// with small-integer binomial coefficients.
    fn rhs_reference(state: &MomentState, feed: &FeedSpec, kernel: &KernelSpec) -> [f64; 9] {
        fn binomial(n: usize, k: usize) -> f64 {
            match (n, k) {
                (_, 0) => 1.0,
                (n, k) if n == k => 1.0,
                (2, 1) => 2.0,
                (1, 1) => 1.0,
                _ => panic!("unexpected binomial ({n}, {k})"),
            }
        }
        let k0 = kernel.k0();
        let m = &state.0;
        let mut out = [0.0; 9];
        for (k, &(i, j)) in MOMENT_INDEX.iter().enumerate() {
            let mut gain = 0.0;
            for a in 0..=i {
                for b in 0..=j {
                    gain += binomial(i, a)
                        * binomial(j, b)
                        * m[MomentState::position(a, b)]
                        * m[MomentState::position(i - a, j - b)];
                }
            }
            let feed_ij = feed.c_f * feed.p_f.powi(i as i32) * feed.s_f.powi(j as i32);
            out[k] = 0.5 * k0 * gain - k0 * m[k] * m[0] + feed.alpha * (feed_ij - m[k]);
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn unrolled_rhs_matches_binomial_reference(
            x in arb_valid_state(),
            s_frac in 0.0..1.0f64,
            alpha in 0.0..1.0f64,
        ) {
            let feed = FeedSpec { alpha, c_f: 1.3, p_f: 1.1, s_f: s_frac * 1.1 };
            let kernel = KernelSpec::constant(0.06);
            let fast = moment_rhs(&x, &feed, &kernel).unwrap();
            let reference = rhs_reference(&x, &feed, &kernel);
            for k in 0..9 {
                let tol = 1e-12 * reference[k].abs().max(1.0);
                prop_assert!(
                    (fast.0[k] - reference[k]).abs() <= tol,
                    "component {} differs: {} vs {}", MOMENT_NAMES[k], fast.0[k], reference[k]
                );
            }
        }

        #[test]
        fn ordering_preserved_along_trajectories(
            x0 in arb_valid_state(),
            s_frac in 0.0..1.0f64,
            alpha in 0.0..1.0f64,
        ) {
            let feed = FeedSpec { alpha, c_f: 1.0, p_f: 1.0, s_f: s_frac };
            // integrate() checks ordering at every sample and errors on any
            // violation, so success is the property.
            let traj = integrate(&x0, &feed, &kernel(), 0.01, 5.0).unwrap();
            prop_assert_eq!(traj.len(), 501);
        }

        #[test]
        fn realizable_states_stay_realizable(x0 in arb_valid_state()) {
            let feed = FeedSpec { alpha: 0.5, c_f: 1.0, p_f: 1.0, s_f: 0.2 };
            let traj = integrate(&x0, &feed, &kernel(), 0.01, 3.0).unwrap();
            for (t, s) in traj {
                prop_assert!(
                    s.check_realizable(1e-7).is_ok(),
                    "realizability lost at t = {}", t
                );
            }
        }

        #[test]
        fn batch_masses_conserved(x0 in arb_valid_state()) {
            let end = propagate(&x0, &batch_feed(), &kernel(), 0.01, 5.0).unwrap();
            prop_assert!((end.m10() - x0.m10()).abs() <= 1e-10 * x0.m10().max(1.0));
            prop_assert!((end.m01() - x0.m01()).abs() <= 1e-10 * x0.m01().max(1.0));
        }
    }
}

//! Planar rotation of the long axis in the `xy` plane:
//!
//! `α̈ + γ0 α̇ + ω0² cos(Ω_d t) sin 2α = 0`
//!
//! a parametrically driven pendulum in the doubled angle. Besides plain
//! integration this module classifies trajectories by their mean rotation
//! rate, runs the frequency-ramp protocol that exposes the hysteresis between
//! libration and locked rotation, and integrates the cycle-averaged equation
//! in the frame co-rotating at `Ω_d/2`.

use std::f64::consts::PI;

use rayon::prelude::*;
use thiserror::Error;

use crate::floquet;
use crate::model::{pendulum_coefficient, RigidBody, TrapDrive};
use crate::ode::{Dopri5, OdeError, OdeSystem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Rotor1dError {
    #[error("integration failed: {0}")]
    StepFailure(#[from] OdeError),
    #[error("averaging window [{t0}, {t1}] lies outside the trajectory")]
    WindowOutOfRange { t0: f64, t1: f64 },
    #[error("no regime transition between {lo:.6e} and {hi:.6e} rad/s")]
    BoundaryNotFound { lo: f64, hi: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    /// Unwrapped angle (rad).
    pub alpha: f64,
    pub alpha_dot: f64,
    pub t: f64,
}

impl PendulumState {
    pub fn new(alpha: f64, alpha_dot: f64) -> Self {
        Self { alpha, alpha_dot, t: 0.0 }
    }

    /// Small-angle start used for the librating branch.
    pub fn librating(omega_d: f64) -> Self {
        Self::new(5e-3, 0.01 * omega_d / 2.0)
    }

    /// Start spinning slightly faster than the locked rate, in the sense of `sign`.
    pub fn rotating(omega_d: f64, sign: f64) -> Self {
        Self::new(0.0, sign * 1.01 * omega_d / 2.0)
    }
}

/// Uniformly sampled solution.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory1D {
    pub states: Vec<PendulumState>,
}

impl Trajectory1D {
    pub fn t_start(&self) -> f64 {
        self.states.first().map_or(f64::NAN, |s| s.t)
    }

    pub fn t_end(&self) -> f64 {
        self.states.last().map_or(f64::NAN, |s| s.t)
    }

    /// Cubic Hermite interpolation of `α` using the stored rates.
    pub fn alpha_at(&self, t: f64) -> Option<f64> {
        let s = &self.states;
        if s.is_empty() || t < s[0].t || t > s[s.len() - 1].t {
            return None;
        }
        let i = s.partition_point(|x| x.t <= t).clamp(1, s.len().max(2) - 1);
        if s.len() == 1 {
            return Some(s[0].alpha);
        }
        let (a, b) = (&s[i - 1], &s[i]);
        let h = b.t - a.t;
        let x = (t - a.t) / h;
        let (x2, x3) = (x * x, x * x * x);
        Some(
            (2.0 * x3 - 3.0 * x2 + 1.0) * a.alpha
                + (x3 - 2.0 * x2 + x) * h * a.alpha_dot
                + (-2.0 * x3 + 3.0 * x2) * b.alpha
                + (x3 - x2) * h * b.alpha_dot,
        )
    }
}

/// Right-hand side of the planar equation. `omega0_sq` carries the sign of
/// `V0 (a_x − a_y)(Q2 − Q3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pendulum {
    pub omega0_sq: f64,
    pub gamma0: f64,
    pub omega_d: f64,
}

impl Pendulum {
    pub fn new(trap: &TrapDrive, body: &RigidBody) -> Self {
        Self { omega0_sq: pendulum_coefficient(trap, body), gamma0: body.gamma0, omega_d: trap.omega_d }
    }

    pub fn with_frequency(mut self, omega_d: f64) -> Self {
        self.omega_d = omega_d;
        self
    }

    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega_d
    }
}

impl OdeSystem<2> for Pendulum {
    fn derivative(&self, t: f64, y: &[f64; 2]) -> [f64; 2] {
        let drive = self.omega0_sq * (self.omega_d * t).cos();
        [y[1], -self.gamma0 * y[1] - drive * (2.0 * y[0]).sin()]
    }
}

/// Cycle-averaged equation in the frame co-rotating at `Ω_d/2`:
/// `φ̈ + γ0 φ̇ + (ω0²/2) sin 2φ = −γ0 Ω_d/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorotatingPendulum(pub Pendulum);

impl OdeSystem<2> for CorotatingPendulum {
    fn derivative(&self, _t: f64, y: &[f64; 2]) -> [f64; 2] {
        let p = &self.0;
        [y[1], -p.gamma0 * y[1] - 0.5 * p.omega0_sq * (2.0 * y[0]).sin() - 0.5 * p.gamma0 * p.omega_d]
    }
}

fn sample_system<S: OdeSystem<2>>(
    sys: &S,
    state0: PendulumState,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory1D, Rotor1dError> {
    let samples = Dopri5::default().sample(sys, state0.t, [state0.alpha, state0.alpha_dot], t_end, dt)?;
    Ok(Trajectory1D {
        states: samples.into_iter().map(|(t, y)| PendulumState { alpha: y[0], alpha_dot: y[1], t }).collect(),
    })
}

/// Integrates from `state0.t` to `t_end`, sampling every `dt_max`.
pub fn integrate_pendulum(
    trap: &TrapDrive,
    body: &RigidBody,
    state0: PendulumState,
    t_end: f64,
    dt_max: f64,
) -> Result<Trajectory1D, Rotor1dError> {
    integrate_system(&Pendulum::new(trap, body), state0, t_end, dt_max)
}

/// [`integrate_pendulum`] for an explicit right-hand side.
pub fn integrate_system(
    p: &Pendulum,
    state0: PendulumState,
    t_end: f64,
    dt_max: f64,
) -> Result<Trajectory1D, Rotor1dError> {
    if !(dt_max > 0.0) || dt_max > p.period() / 200.0 * (1.0 + 1e-12) {
        return Err(Rotor1dError::InvalidArgument(format!(
            "dt_max = {dt_max:e} must lie in (0, T_drive/200]"
        )));
    }
    sample_system(p, state0, t_end, dt_max)
}

/// Solves the co-rotating secular equation; `state0` holds `φ = α − Ω_d t/2`
/// and its rate.
pub fn integrate_corotating(
    trap: &TrapDrive,
    body: &RigidBody,
    state0: PendulumState,
    t_end: f64,
) -> Result<Trajectory1D, Rotor1dError> {
    let p = Pendulum::new(trap, body);
    sample_system(&CorotatingPendulum(p), state0, t_end, p.period() / 20.0)
}

/// `2 (α(t0 + T) − α(t0)) / (T Ω_d)`.
pub fn eta_rot(traj: &Trajectory1D, t0: f64, window: f64, omega_d: f64) -> Result<f64, Rotor1dError> {
    let t1 = t0 + window;
    let err = Rotor1dError::WindowOutOfRange { t0, t1 };
    if !(window > 0.0) {
        return Err(err);
    }
    let a0 = traj.alpha_at(t0).ok_or(err.clone())?;
    let a1 = traj.alpha_at(t1).ok_or(err)?;
    Ok(2.0 * (a1 - a0) / (window * omega_d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Librating,
    RotationLockedPositive,
    RotationLockedNegative,
    Unclassified,
}

impl Regime {
    pub fn from_eta(eta: f64) -> Self {
        if eta.abs() < 0.1 {
            Regime::Librating
        } else if (eta - 1.0).abs() < 0.1 {
            Regime::RotationLockedPositive
        } else if (eta + 1.0).abs() < 0.1 {
            Regime::RotationLockedNegative
        } else {
            Regime::Unclassified
        }
    }

    pub fn is_locked(self) -> bool {
        matches!(self, Regime::RotationLockedPositive | Regime::RotationLockedNegative)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Librating => "librating",
            Regime::RotationLockedPositive => "locked+",
            Regime::RotationLockedNegative => "locked-",
            Regime::Unclassified => "unclassified",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeLabel {
    pub regime: Regime,
    pub eta: f64,
}

/// Transient discarded before averaging, in drive periods.
pub const TRANSIENT_PERIODS: u32 = 50;
/// Averaging window, in drive periods.
pub const WINDOW_PERIODS: u32 = 100;

/// Runs `TRANSIENT_PERIODS + WINDOW_PERIODS` drive periods from `state` (time
/// origin at a voltage maximum) and returns the label together with the final
/// state, whose time is reset to zero so it can seed the next run.
fn classify_run(p: &Pendulum, state: PendulumState) -> Result<(RegimeLabel, PendulumState), Rotor1dError> {
    let period = p.period();
    let ode = Dopri5::default();
    let t0 = TRANSIENT_PERIODS as f64 * period;
    let t1 = t0 + WINDOW_PERIODS as f64 * period;
    let (y0, _) = ode.integrate(p, 0.0, [state.alpha, state.alpha_dot], t0, |_| {})?;
    let (y1, _) = ode.integrate(p, t0, y0, t1, |_| {})?;
    let eta = 2.0 * (y1[0] - y0[0]) / ((t1 - t0) * p.omega_d);
    let label = RegimeLabel { regime: Regime::from_eta(eta), eta };
    // Reduce α modulo π: the equation is invariant under α → α + π.
    let alpha = y1[0] - PI * (y1[0] / PI).floor();
    Ok((label, PendulumState { alpha, alpha_dot: y1[1], t: 0.0 }))
}

pub fn classify_regime(
    trap: &TrapDrive,
    body: &RigidBody,
    state0: PendulumState,
) -> Result<RegimeLabel, Rotor1dError> {
    classify_system(&Pendulum::new(trap, body), state0)
}

pub fn classify_system(p: &Pendulum, state0: PendulumState) -> Result<RegimeLabel, Rotor1dError> {
    Ok(classify_run(p, PendulumState { t: 0.0, ..state0 })?.0)
}

/// Frequency-ramp settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    /// Relative geometric step in `Ω_d`.
    pub step: f64,
    /// Relative width at which bisection of a boundary stops.
    pub tolerance: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { step: 0.01, tolerance: 1e-3 }
    }
}

/// Transition frequencies found by one down-and-up ramp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hysteresis {
    /// Highest frequency at which the librating branch locks on the way down.
    pub omega_lr: f64,
    /// Lowest frequency at which the locked branch is lost on the way up.
    pub omega_rl: f64,
}

/// Carries the state from step to step while ramping `Ω_d` down from
/// `omega_range.1` until the particle locks, then ramps back up until it
/// stops rotating. Each boundary is refined by bisection from the last state
/// on the old branch.
pub fn sweep_hysteresis(
    trap: &TrapDrive,
    body: &RigidBody,
    v0: f64,
    omega_range: (f64, f64),
    options: SweepOptions,
) -> Result<Hysteresis, Rotor1dError> {
    let p = Pendulum::new(&trap.with_voltage(v0), body);
    sweep_system(&p, omega_range, options)
}

pub fn sweep_system(p: &Pendulum, omega_range: (f64, f64), options: SweepOptions) -> Result<Hysteresis, Rotor1dError> {
    let (lo, hi) = omega_range;
    if !(lo > 0.0 && hi > lo) {
        return Err(Rotor1dError::InvalidArgument(format!("empty frequency range ({lo:e}, {hi:e})")));
    }
    let ratio = 1.0 + options.step;
    let not_found = Rotor1dError::BoundaryNotFound { lo, hi };

    // Downward ramp on the librating branch.
    let mut omega = hi;
    let mut state = PendulumState::librating(hi);
    let (mut above, mut above_state) = (None::<f64>, state);
    let (omega_locked, locked_state) = loop {
        let (label, next) = classify_run(&p.with_frequency(omega), state)?;
        if label.regime.is_locked() {
            break (omega, next);
        }
        above = Some(omega);
        above_state = next;
        state = next;
        omega /= ratio;
        if omega < lo {
            return Err(not_found);
        }
    };
    let omega_lr = match above {
        None => omega_locked,
        Some(upper) => bisect(p, above_state, omega_locked, upper, options.tolerance)?.0,
    };

    // Upward ramp on the locked branch.
    let mut omega = omega_locked;
    let mut state = locked_state;
    let (mut below, mut below_state) = (omega_locked, locked_state);
    let omega_lost = loop {
        omega *= ratio;
        if omega > hi {
            return Err(not_found);
        }
        let (label, next) = classify_run(&p.with_frequency(omega), state)?;
        if !label.regime.is_locked() {
            break omega;
        }
        below = omega;
        below_state = next;
        state = next;
    };
    let omega_rl = bisect(p, below_state, below, omega_lost, options.tolerance)?.1;
    Ok(Hysteresis { omega_lr, omega_rl })
}

/// Narrows `[lo, hi]`, locked at `lo` and not locked at `hi`, to the relative
/// tolerance. Every trial starts from `state`.
fn bisect(
    p: &Pendulum,
    state: PendulumState,
    mut lo: f64,
    mut hi: f64,
    tolerance: f64,
) -> Result<(f64, f64), Rotor1dError> {
    while hi / lo - 1.0 > tolerance {
        let mid = (lo * hi).sqrt();
        let (label, _) = classify_run(&p.with_frequency(mid), state)?;
        if label.regime.is_locked() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDiagram {
    pub v0_grid: Vec<f64>,
    pub omega_lr: Vec<Option<f64>>,
    pub omega_rl: Vec<Option<f64>>,
    /// Highest `Ω_d` at which the linearised motion about α = 0 is unstable.
    pub instability_boundary: Vec<Option<f64>>,
    /// Per-point failure messages; `None` where the sweep succeeded.
    pub errors: Vec<Option<String>>,
}

impl PhaseDiagram {
    pub fn len(&self) -> usize {
        self.v0_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v0_grid.is_empty()
    }
}

/// Runs [`sweep_hysteresis`] for every voltage in parallel; results keep the
/// grid order.
pub fn phase_diagram(
    trap: &TrapDrive,
    body: &RigidBody,
    v0_grid: &[f64],
    omega_range: (f64, f64),
    options: SweepOptions,
) -> PhaseDiagram {
    let rows: Vec<_> = v0_grid
        .par_iter()
        .map(|&v0| {
            let sweep = sweep_hysteresis(trap, body, v0, omega_range, options);
            let onset = floquet::instability_onset(&Pendulum::new(&trap.with_voltage(v0), body), omega_range).ok().flatten();
            (sweep, onset)
        })
        .collect();
    let mut diagram = PhaseDiagram {
        v0_grid: v0_grid.to_vec(),
        omega_lr: Vec::with_capacity(rows.len()),
        omega_rl: Vec::with_capacity(rows.len()),
        instability_boundary: Vec::with_capacity(rows.len()),
        errors: Vec::with_capacity(rows.len()),
    };
    for (sweep, onset) in rows {
        match sweep {
            Ok(h) => {
                diagram.omega_lr.push(Some(h.omega_lr));
                diagram.omega_rl.push(Some(h.omega_rl));
                diagram.errors.push(None);
            }
            Err(e) => {
                diagram.omega_lr.push(None);
                diagram.omega_rl.push(None);
                diagram.errors.push(Some(e.to_string()));
            }
        }
        diagram.instability_boundary.push(onset);
    }
    diagram
}

/// Upper bound on the drive frequency for which locked rotation can be
/// sustained against damping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OmegaMax {
    Finite(f64),
    /// No damping: the bound is infinite.
    Unbounded,
}

/// `ω0²/γ0`.
pub fn omega_max(omega0: f64, gamma0: f64) -> OmegaMax {
    if gamma0 == 0.0 {
        OmegaMax::Unbounded
    } else {
        OmegaMax::Finite(omega0 * omega0 / gamma0)
    }
}

/// Fixed point `φ*` of the co-rotating equation, if one exists:
/// `sin 2φ* = −γ0 Ω_d / ω0²`.
pub fn corotating_fixed_point(p: &Pendulum) -> Option<f64> {
    let s = -p.gamma0 * p.omega_d / p.omega0_sq;
    (s.abs() <= 1.0).then(|| 0.5 * s.asin())
}

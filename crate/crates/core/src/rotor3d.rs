//! Rigid-body rotation in the trap.
//!
//! Orientation is carried as a unit quaternion mapping body to lab axes
//! (`n_k = R e_k`); zy′z″ Euler angles `R = Rz(α) Ry(β) Rz(γ)` are derived
//! for reporting. The equations of motion are Euler's equations in the body
//! frame with isotropic damping `−γ0 L`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::model::{RigidBody, TrapDrive};
use crate::ode::{Dopri5, OdeError, OdeSystem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Rotor3dError {
    #[error("integration failed: {0}")]
    StepFailure(#[from] OdeError),
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn rz(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn ry(b: f64) -> Matrix3<f64> {
    let (s, c) = b.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// `Rz(α) Ry(β) Rz(γ)`.
pub fn rotation_matrix(alpha: f64, beta: f64, gamma: f64) -> Matrix3<f64> {
    rz(alpha) * ry(beta) * rz(gamma)
}

/// Body-frame angular velocity from zy′z″ Euler rates.
pub fn euler_rates_to_body_omega(
    alpha_dot: f64,
    beta_dot: f64,
    gamma_dot: f64,
    beta: f64,
    gamma: f64,
) -> Vector3<f64> {
    let (sb, cb) = beta.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    Vector3::new(
        -cg * sb * alpha_dot + sg * beta_dot,
        sb * sg * alpha_dot + cg * beta_dot,
        cb * alpha_dot + gamma_dot,
    )
}

/// Rigid orientation backed by a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation(pub UnitQuaternion<f64>);

impl Orientation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    pub fn from_euler(alpha: f64, beta: f64, gamma: f64) -> Self {
        let z = Vector3::z_axis();
        let y = Vector3::y_axis();
        Self(
            UnitQuaternion::from_axis_angle(&z, alpha)
                * UnitQuaternion::from_axis_angle(&y, beta)
                * UnitQuaternion::from_axis_angle(&z, gamma),
        )
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
        Self(UnitQuaternion::from_rotation_matrix(&rot))
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    /// Lab-frame direction of body axis `k` (0-based).
    pub fn body_axis(&self, k: usize) -> Vector3<f64> {
        self.0 * Vector3::ith(k, 1.0)
    }

    /// `(α, β, γ)` with `β ∈ [0, π]`, `α, γ ∈ (−π, π]`; `γ = 0` when
    /// `|sin β| < 1e−8`.
    pub fn euler(&self) -> (f64, f64, f64) {
        let r = self.matrix();
        let beta = r[(2, 2)].clamp(-1.0, 1.0).acos();
        let sb = (r[(0, 2)].powi(2) + r[(1, 2)].powi(2)).sqrt();
        if sb < 1e-8 {
            let alpha = if r[(2, 2)] > 0.0 {
                r[(1, 0)].atan2(r[(0, 0)])
            } else {
                (-r[(1, 0)]).atan2(-r[(0, 0)])
            };
            return (wrap(alpha), if r[(2, 2)] > 0.0 { 0.0 } else { PI }, 0.0);
        }
        let alpha = r[(1, 2)].atan2(r[(0, 2)]);
        let gamma = r[(2, 1)].atan2(-r[(2, 0)]);
        (wrap(alpha), beta, wrap(gamma))
    }
}

/// Maps an angle into `(−π, π]`.
fn wrap(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

fn a_matrix(trap: &TrapDrive) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(trap.a_x, trap.a_y, trap.a_z))
}

/// Quadrupole tensor in the lab frame, `R Q0 Rᵀ`.
pub fn lab_quadrupole(orientation: &Orientation, body: &RigidBody) -> Matrix3<f64> {
    let r = orientation.matrix();
    let q0 = Matrix3::from_diagonal(&Vector3::from(body.quadrupole));
    r * q0 * r.transpose()
}

/// `U = V(t)/(3ℓ0²) Tr[R Q0 Rᵀ A]`.
pub fn potential_energy(orientation: &Orientation, trap: &TrapDrive, body: &RigidBody, t: f64) -> f64 {
    potential_at_voltage(orientation, trap, body, trap.voltage(t))
}

fn potential_at_voltage(orientation: &Orientation, trap: &TrapDrive, body: &RigidBody, v: f64) -> f64 {
    let q = lab_quadrupole(orientation, body);
    v / (3.0 * trap.ell0 * trap.ell0) * (q * a_matrix(trap)).trace()
}

/// Lab-frame torque `(2V(t)/3ℓ0²) Σ_j a_j e_j × Q e_j`.
pub fn torque(orientation: &Orientation, trap: &TrapDrive, body: &RigidBody, t: f64) -> Vector3<f64> {
    torque_at_voltage(orientation, trap, body, trap.voltage(t))
}

fn torque_at_voltage(orientation: &Orientation, trap: &TrapDrive, body: &RigidBody, v: f64) -> Vector3<f64> {
    let q = lab_quadrupole(orientation, body);
    let a = trap.geometry();
    let mut n = Vector3::zeros();
    for j in 0..3 {
        n += a[j] * Vector3::ith(j, 1.0).cross(&q.column(j).into_owned());
    }
    2.0 * v / (3.0 * trap.ell0 * trap.ell0) * n
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyState {
    pub orientation: Orientation,
    /// Angular velocity in body axes (rad/s).
    pub omega_body: Vector3<f64>,
    pub t: f64,
}

impl BodyState {
    pub fn at_rest(orientation: Orientation) -> Self {
        Self { orientation, omega_body: Vector3::zeros(), t: 0.0 }
    }

    fn to_array(self) -> [f64; 7] {
        let q = self.orientation.0.into_inner();
        [q.w, q.i, q.j, q.k, self.omega_body.x, self.omega_body.y, self.omega_body.z]
    }

    fn from_array(y: &[f64; 7], t: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(y[0], y[1], y[2], y[3]));
        Self { orientation: Orientation(q), omega_body: Vector3::new(y[4], y[5], y[6]), t }
    }

    /// Angular momentum in the lab frame.
    pub fn angular_momentum(&self, body: &RigidBody) -> Vector3<f64> {
        let l_body = Vector3::new(
            body.inertia[0] * self.omega_body.x,
            body.inertia[1] * self.omega_body.y,
            body.inertia[2] * self.omega_body.z,
        );
        self.orientation.0 * l_body
    }

    pub fn kinetic_energy(&self, body: &RigidBody) -> f64 {
        0.5 * (0..3).map(|k| body.inertia[k] * self.omega_body[k].powi(2)).sum::<f64>()
    }
}

/// Right-hand side of the rigid-body equations; state `[q_w, q_x, q_y, q_z, ω1, ω2, ω3]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidRotor {
    pub trap: TrapDrive,
    pub body: RigidBody,
    /// Replaces `V0 cos(Ω_d t)` with a constant voltage when set.
    pub static_voltage: Option<f64>,
}

impl RigidRotor {
    pub fn new(trap: TrapDrive, body: RigidBody) -> Self {
        Self { trap, body, static_voltage: None }
    }

    pub fn voltage(&self, t: f64) -> f64 {
        self.static_voltage.unwrap_or_else(|| self.trap.voltage(t))
    }

    pub fn total_energy(&self, state: &BodyState) -> f64 {
        state.kinetic_energy(&self.body)
            + potential_at_voltage(&state.orientation, &self.trap, &self.body, self.voltage(state.t))
    }
}

impl OdeSystem<7> for RigidRotor {
    fn derivative(&self, t: f64, y: &[f64; 7]) -> [f64; 7] {
        let q = Quaternion::new(y[0], y[1], y[2], y[3]);
        let w = Vector3::new(y[4], y[5], y[6]);
        let orientation = Orientation(UnitQuaternion::new_normalize(q));
        let n_lab = torque_at_voltage(&orientation, &self.trap, &self.body, self.voltage(t));
        let n = orientation.0.inverse() * n_lab;
        let [i1, i2, i3] = self.body.inertia;
        let g = self.body.gamma0;
        let q_dot = q * Quaternion::new(0.0, w.x, w.y, w.z) * 0.5;
        [
            q_dot.w,
            q_dot.i,
            q_dot.j,
            q_dot.k,
            ((i2 - i3) * w.y * w.z + n.x) / i1 - g * w.x,
            ((i3 - i1) * w.z * w.x + n.y) / i2 - g * w.y,
            ((i1 - i2) * w.x * w.y + n.z) / i3 - g * w.z,
        ]
    }

    fn project(&self, y: &mut [f64; 7]) -> bool {
        let norm = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2] + y[3] * y[3]).sqrt();
        for v in &mut y[..4] {
            *v /= norm;
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory3D {
    pub states: Vec<BodyState>,
}

/// Integrates from `state0.t` to `t_end`, sampling every `dt_max`.
pub fn integrate_rigid(
    trap: &TrapDrive,
    body: &RigidBody,
    state0: BodyState,
    t_end: f64,
    dt_max: f64,
) -> Result<Trajectory3D, Rotor3dError> {
    if !(dt_max > 0.0) || dt_max > trap.period() / 200.0 * (1.0 + 1e-12) {
        return Err(Rotor3dError::InvalidArgument(format!(
            "dt_max = {dt_max:e} must lie in (0, T_drive/200]"
        )));
    }
    integrate_system(&RigidRotor::new(*trap, *body), &Dopri5::default(), state0, t_end, dt_max)
}

/// Samples an arbitrary rotor system with a given integrator.
pub fn integrate_system(
    sys: &RigidRotor,
    ode: &Dopri5,
    state0: BodyState,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory3D, Rotor3dError> {
    let samples = ode.sample(sys, state0.t, state0.to_array(), t_end, dt)?;
    Ok(Trajectory3D { states: samples.iter().map(|(t, y)| BodyState::from_array(y, *t)).collect() })
}

/// Final state only, for long runs where samples are not needed.
pub fn propagate(sys: &RigidRotor, ode: &Dopri5, state0: BodyState, t_end: f64) -> Result<BodyState, Rotor3dError> {
    let (y, _) = ode.integrate(sys, state0.t, state0.to_array(), t_end, |_| {})?;
    Ok(BodyState::from_array(&y, t_end))
}

/// One of the six orientations with every principal axis along a lab axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equilibrium {
    pub orientation: Orientation,
    /// `lab_axis[k]` is the lab axis carrying body axis `k`.
    pub lab_axis: [usize; 3],
    /// Ponderomotive small-oscillation frequency about lab axis `m`.
    pub frequencies: [f64; 3],
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSet {
    pub entries: Vec<Equilibrium>,
}

/// Secular potential `Σ_k N_k² / (4 I_k Ω_d²)`, with `N` the body-frame
/// torque amplitude at voltage `V0`.
pub fn secular_potential(orientation: &Orientation, trap: &TrapDrive, body: &RigidBody) -> f64 {
    let n = orientation.0.inverse() * torque_at_voltage(orientation, trap, body, trap.v0);
    (0..3).map(|k| n[k] * n[k] / (4.0 * body.inertia[k] * trap.omega_d * trap.omega_d)).sum()
}

fn distinct(v: [f64; 3]) -> bool {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-12 * scale;
    (v[0] - v[1]).abs() > tol && (v[1] - v[2]).abs() > tol && (v[0] - v[2]).abs() > tol
}

pub fn equilibria(trap: &TrapDrive, body: &RigidBody) -> Result<EquilibriumSet, Rotor3dError> {
    if !distinct(body.quadrupole) {
        return Err(Rotor3dError::DegenerateSpectrum("quadrupole eigenvalues coincide".into()));
    }
    if !distinct(trap.geometry()) {
        return Err(Rotor3dError::DegenerateSpectrum("trap coefficients coincide".into()));
    }
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let a = trap.geometry();
    let scale = trap.v0 / (3.0 * trap.ell0 * trap.ell0 * trap.omega_d);
    let entries = PERMS
        .iter()
        .map(|&lab_axis| {
            let mut m = Matrix3::zeros();
            for k in 0..3 {
                m[(lab_axis[k], k)] = 1.0;
            }
            if m.determinant() < 0.0 {
                // Flip the third body axis to keep a proper rotation.
                m.column_mut(2).neg_mut();
            }
            let mut body_on = [0usize; 3];
            for k in 0..3 {
                body_on[lab_axis[k]] = k;
            }
            let mut frequencies = [0.0; 3];
            for axis in 0..3 {
                let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
                let dq = body.quadrupole[body_on[i]] - body.quadrupole[body_on[j]];
                let inertia = body.inertia[body_on[axis]];
                frequencies[axis] = 2f64.sqrt() * scale * ((a[i] - a[j]) * dq).abs() / inertia;
            }
            Equilibrium {
                orientation: Orientation::from_matrix(&m),
                lab_axis,
                frequencies,
                stable: frequencies.iter().all(|&w| w > 0.0),
            }
        })
        .collect();
    Ok(EquilibriumSet { entries })
}

/// Closed-form libration frequencies about α = 0, β = π/2, γ = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LibrationFrequencies {
    pub omega_alpha: f64,
    pub omega_beta: f64,
    pub omega_gamma: f64,
    /// `max V0 |Q_i − Q_j| / (I_k Ω_d² ℓ0²)`.
    pub secular_parameter: f64,
    /// `secular_parameter < 0.1`.
    pub valid: bool,
}

pub fn secular_parameter(trap: &TrapDrive, body: &RigidBody) -> f64 {
    let q = body.quadrupole;
    let dq = (q[0] - q[1]).abs().max((q[1] - q[2]).abs()).max((q[0] - q[2]).abs());
    let i_min = body.inertia.iter().cloned().fold(f64::INFINITY, f64::min);
    trap.v0 * dq / (i_min * trap.omega_d * trap.omega_d * trap.ell0 * trap.ell0)
}

pub fn libration_frequencies(trap: &TrapDrive, body: &RigidBody) -> LibrationFrequencies {
    let [q1, q2, q3] = body.quadrupole;
    let [i1, i2, i3] = body.inertia;
    let s = trap.v0 / (3.0 * trap.ell0 * trap.ell0 * trap.omega_d);
    let param = secular_parameter(trap, body);
    LibrationFrequencies {
        omega_alpha: 2.0 / i1 * s * ((trap.a_x - trap.a_y) * (q2 - q3)).abs(),
        omega_beta: 2.0 / i2 * s * ((trap.a_x - trap.a_z) * (q1 - q3)).abs(),
        omega_gamma: 2.0 / i3 * s * ((trap.a_y - trap.a_z) * (q1 - q2)).abs(),
        secular_parameter: param,
        valid: param < 0.1,
    }
}

/// Small-oscillation frequencies in the frame co-rotating at `Ω_d/2`.
/// `None` marks a mode whose squared frequency is negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotatingFrequencies {
    /// Stable co-rotating angle, `0` or `π/2`.
    pub alpha_equilibrium: f64,
    pub w_alpha: Option<f64>,
    pub w_beta: Option<f64>,
    pub w_gamma: Option<f64>,
}

/// Closed forms linearised about β = π/2, γ = 0 and whichever of α = π/2 or
/// α = 0 is stable; moving to α = 0 flips the sign of `(a_x − a_y)`.
pub fn rotating_frame_frequencies(trap: &TrapDrive, body: &RigidBody, omega_d: f64) -> RotatingFrequencies {
    let [q1, q2, q3] = body.quadrupole;
    let [i1, i2, i3] = body.inertia;
    let l2 = trap.ell0 * trap.ell0;
    let v0 = trap.v0;
    let mut dxy = trap.a_x - trap.a_y;
    let mut alpha_equilibrium = PI / 2.0;
    if v0 * (q2 - q3) * (-dxy) < 0.0 {
        dxy = -dxy;
        alpha_equilibrium = 0.0;
    }
    let root = |x: f64| (x >= 0.0).then(|| x.sqrt());
    let spin = 0.5 * omega_d;
    RotatingFrequencies {
        alpha_equilibrium,
        w_alpha: root(v0 * (q2 - q3) * (-dxy) / (3.0 * i1 * l2)),
        w_beta: root(i1 / i2 * spin * spin - v0 * (q1 - q3) / (6.0 * i2 * l2) * dxy),
        w_gamma: root(i1 / i3 * (i1 / i2 - 1.0) * spin * spin - v0 * (q2 - q1) / (6.0 * i3 * l2) * dxy),
    }
}

/// Secular normal modes about the locked state, from the co-rotating
/// Lagrangian with the static potential `U0` kept to second order and the
/// gyroscopic coupling of `β` and `γ` treated exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotatingNormalModes {
    pub alpha_equilibrium: f64,
    pub w_alpha: Option<f64>,
    /// Lower and higher of the two coupled `β`–`γ` modes.
    pub w_low: Option<f64>,
    pub w_high: Option<f64>,
}

/// With `b = β − π/2`, `g = γ` and spin `s = Ω_d/2` the quadratic
/// Lagrangian is `½I2ḃ² + ½I3ġ² + G g ḃ − ½K(b, g)` with
/// `G = s(I2 − I1 + I3)`, `K_bb = s²(I1 − I3) + ∂²U0`, `K_gg = s²(I1 − I2) + ∂²U0`.
pub fn rotating_frame_normal_modes(trap: &TrapDrive, body: &RigidBody, omega_d: f64) -> RotatingNormalModes {
    let alpha_eq = rotating_frame_frequencies(trap, body, omega_d).alpha_equilibrium;
    let [i1, i2, i3] = body.inertia;
    let s = 0.5 * omega_d;
    let u0 = |a: f64, b: f64, g: f64| corotating_potential_decomposition((alpha_eq + a, PI / 2.0 + b, g), trap, body).u0;
    let h = 1e-4;
    let second = |f: &dyn Fn(f64) -> f64| (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h);
    let u_aa = second(&|x| u0(x, 0.0, 0.0));
    let u_bb = second(&|x| u0(0.0, x, 0.0));
    let u_gg = second(&|x| u0(0.0, 0.0, x));
    let u_bg = (u0(0.0, h, h) - u0(0.0, h, -h) - u0(0.0, -h, h) + u0(0.0, -h, -h)) / (4.0 * h * h);
    let k_bb = s * s * (i1 - i3) + u_bb;
    let k_gg = s * s * (i1 - i2) + u_gg;
    let g = s * (i2 - i1 + i3);
    // I2 I3 x² − (K_bb I3 + K_gg I2 + G²) x + (K_bb K_gg − K_bg²) = 0, x = ν².
    let qa = i2 * i3;
    let qb = -(k_bb * i3 + k_gg * i2 + g * g);
    let qc = k_bb * k_gg - u_bg * u_bg;
    let disc = qb * qb - 4.0 * qa * qc;
    let root = |x: f64| (x >= 0.0).then(|| x.sqrt());
    let (w_low, w_high) = if disc < 0.0 {
        (None, None)
    } else {
        let r = disc.sqrt();
        let big = (-qb + r) / (2.0 * qa);
        let small = if big != 0.0 { qc / (qa * big) } else { 0.0 };
        (root(small), root(big))
    };
    RotatingNormalModes { alpha_equilibrium: alpha_eq, w_alpha: root(u_aa / i1), w_low, w_high }
}

/// Co-rotating potential `U0 + u1 cos Ω_d t + u2 cos 2Ω_d t + u3 sin 2Ω_d t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorotatingPotential {
    pub u0: f64,
    pub u1: f64,
    pub u2: f64,
    pub u3: f64,
}

impl CorotatingPotential {
    pub fn at(&self, omega_d: f64, t: f64) -> f64 {
        let p = omega_d * t;
        self.u0 + self.u1 * p.cos() + self.u2 * (2.0 * p).cos() + self.u3 * (2.0 * p).sin()
    }
}

/// Harmonics of the trap potential seen from the frame co-rotating at
/// `Ω_d/2`, evaluated at the co-rotating Euler angles.
pub fn corotating_potential_decomposition(
    angles: (f64, f64, f64),
    trap: &TrapDrive,
    body: &RigidBody,
) -> CorotatingPotential {
    let (alpha, beta, gamma) = angles;
    let [q1, q2, q3] = body.quadrupole;
    let (sb2, cb2) = (beta.sin().powi(2), beta.cos().powi(2));
    let (sg2, cg2) = (gamma.sin().powi(2), gamma.cos().powi(2));
    let (s2a, c2a) = (2.0 * alpha).sin_cos();
    let l2 = trap.ell0 * trap.ell0;
    let v0 = trap.v0;
    // Q_xx − Q_yy = C cos 2α + P sin 2α for the rotated tensor.
    let c = q3 * sb2 + (q2 * sg2 + q1 * cg2) * cb2 - (q1 * sg2 + q2 * cg2);
    let p = (q2 - q1) * beta.cos() * (2.0 * gamma).sin();
    let aniso = v0 / (6.0 * l2) * (trap.a_x - trap.a_y) / 2.0;
    let zz = q3 * cb2 + (q1 * cg2 + q2 * sg2) * sb2;
    let xy_sum = (q1 * sg2 + q2 * cg2) + q3 * sb2 + (q1 * cg2 + q2 * sg2) * cb2;
    CorotatingPotential {
        u0: aniso * (c * c2a + p * s2a),
        u1: v0 / (3.0 * l2) * (trap.a_z * zz + 0.5 * (trap.a_x + trap.a_y) * xy_sum),
        u2: aniso * (c * c2a + p * s2a),
        u3: -aniso * (c * s2a - p * c2a),
    }
}

/// Centre-of-mass secular frequencies in the lowest-order approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComSecular {
    pub omega: [f64; 3],
    /// Stability parameters `q_u = 4|q V0 a_u| / (m ℓ0² Ω_d²)`.
    pub q: [f64; 3],
    /// False when any `q_u ≥ 0.4`.
    pub valid: bool,
}

pub fn com_secular_frequencies(trap: &TrapDrive, charge: f64, mass: f64) -> ComSecular {
    let q = trap.geometry().map(|a| {
        4.0 * (charge * trap.v0 * a).abs() / (mass * trap.ell0 * trap.ell0 * trap.omega_d * trap.omega_d)
    });
    ComSecular {
        omega: q.map(|qu| qu * trap.omega_d / (2.0 * 2f64.sqrt())),
        q,
        valid: q.iter().all(|&qu| qu < 0.4),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;
    use proptest::prelude::*;

    fn asym_body() -> RigidBody {
        RigidBody::new([3e-24, 2.5e-24, 1e-24], [-1e-26, -0.6e-26, 1.6e-26], 4e-16, 2.8e-13, 0.0).unwrap()
    }

    fn trap() -> TrapDrive {
        presets::rod_trap(600.0, 2.0 * PI * 5e3)
    }

    fn close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
        (a - b).abs().max() < tol
    }

    #[test]
    fn rotation_matrix_basics() {
        assert_eq!(rotation_matrix(0.0, 0.0, 0.0), Matrix3::identity());
        let e = rotation_matrix(PI / 2.0, 0.0, 0.0) * Vector3::x();
        assert!((e - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn euler_rate_map_special_cases() {
        assert_eq!(euler_rates_to_body_omega(0.0, 0.0, 2.5, 0.7, 0.3), Vector3::new(0.0, 0.0, 2.5));
        let w = euler_rates_to_body_omega(1.5, 0.0, 0.0, PI / 2.0, 0.0);
        assert!((w - Vector3::new(-1.5, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn potential_special_cases() {
        let t = trap();
        let sphere = RigidBody { quadrupole: [0.0; 3], ..asym_body() };
        let o = Orientation::from_euler(0.3, 1.1, -0.4);
        assert_eq!(potential_energy(&o, &t, &sphere, 0.1), 0.0);
        assert_eq!(torque(&o, &t, &sphere, 0.1), Vector3::zeros());
        let quarter = 0.25 * t.period();
        let peak = potential_energy(&o, &t, &asym_body(), 0.0).abs();
        assert!(potential_energy(&o, &t, &asym_body(), quarter).abs() < 1e-15 * peak);
        let b = asym_body();
        let u = potential_energy(&Orientation::identity(), &t, &b, 0.0);
        let expected = t.v0 * (t.a_x * b.quadrupole[0] + t.a_y * b.quadrupole[1] + t.a_z * b.quadrupole[2])
            / (3.0 * t.ell0 * t.ell0);
        assert!((u - expected).abs() < 1e-12 * expected.abs());
    }

    #[test]
    fn euler_rates_match_finite_difference_of_quaternion_path() {
        // Orientation along a smooth Euler path; the body rate recovered from
        // Rᵀ Ṙ must equal the closed-form map.
        let path = |t: f64| (0.3 + 2.0 * t, 1.0 + 0.5 * t.sin(), -0.2 + 3.0 * t);
        let t = 0.4;
        let h = 1e-6;
        let (a, b, g) = path(t);
        let rp = Orientation::from_euler(path(t + h).0, path(t + h).1, path(t + h).2).matrix();
        let rm = Orientation::from_euler(path(t - h).0, path(t - h).1, path(t - h).2).matrix();
        let r = rotation_matrix(a, b, g);
        let skew = r.transpose() * (rp - rm) / (2.0 * h);
        let w_fd = Vector3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]);
        let w = euler_rates_to_body_omega(2.0, 0.5 * t.cos(), 3.0, b, g);
        assert!((w - w_fd).norm() < 1e-6, "{w} vs {w_fd}");
    }

    #[test]
    fn equilibria_are_six_torque_free_stationary_points() {
        let t = trap();
        let b = asym_body();
        let set = equilibria(&t, &b).unwrap();
        assert_eq!(set.entries.len(), 6);
        let scale = 2.0 * t.v0 / (3.0 * t.ell0 * t.ell0) * 1.6e-26;
        for e in &set.entries {
            assert!(e.stable);
            assert!((e.orientation.matrix().determinant() - 1.0).abs() < 1e-12);
            assert!(torque(&e.orientation, &t, &b, 0.0).norm() < 1e-9 * scale);
            // Zero finite-difference gradient of the secular potential.
            let u0 = secular_potential(&e.orientation, &t, &b);
            for axis in 0..3 {
                let h = 1e-5;
                let rot = |s: f64| {
                    Orientation(UnitQuaternion::from_axis_angle(&Vector3::ith_axis(axis), s) * e.orientation.0)
                };
                let up = secular_potential(&rot(h), &t, &b);
                let um = secular_potential(&rot(-h), &t, &b);
                let grad = (up - um) / (2.0 * h);
                let curv = (up - 2.0 * u0 + um) / (h * h);
                assert!(grad.abs() < 1e-6 * curv.abs().max(1e-300) * h, "grad {grad} curv {curv}");
            }
        }
        assert!(matches!(
            equilibria(&t, &RigidBody { quadrupole: [1e-26, 1e-26, -2e-26], ..b }),
            Err(Rotor3dError::DegenerateSpectrum(_))
        ));
    }

    #[test]
    fn swapping_quadrupole_eigenvalues_permutes_equilibria() {
        let t = trap();
        let b = asym_body();
        let swapped = RigidBody { quadrupole: [b.quadrupole[0], b.quadrupole[2], b.quadrupole[1]], ..b };
        let set = equilibria(&t, &b).unwrap();
        let set2 = equilibria(&t, &swapped).unwrap();
        // Equal inertia for the swapped axes keeps the frequencies identical
        // up to the relabelling.
        let b_sym = RigidBody { inertia: [3e-24, 2e-24, 2e-24], ..b };
        let s_sym = RigidBody { inertia: [3e-24, 2e-24, 2e-24], ..swapped };
        let f1 = equilibria(&t, &b_sym).unwrap();
        let f2 = equilibria(&t, &s_sym).unwrap();
        for e in &f1.entries {
            let partner = [e.lab_axis[0], e.lab_axis[2], e.lab_axis[1]];
            let m = f2.entries.iter().find(|x| x.lab_axis == partner).unwrap();
            for k in 0..3 {
                assert!((e.frequencies[k] - m.frequencies[k]).abs() < 1e-12 * e.frequencies[k]);
            }
        }
        assert_eq!(set.entries.len(), set2.entries.len());
    }

    #[test]
    fn libration_formula_scalings() {
        let t = trap();
        let b = asym_body();
        let f = libration_frequencies(&t, &b);
        let g = libration_frequencies(&t.with_frequency(0.5 * t.omega_d), &b);
        for (x, y) in [(f.omega_alpha, g.omega_alpha), (f.omega_beta, g.omega_beta), (f.omega_gamma, g.omega_gamma)] {
            assert!((y / x - 2.0).abs() < 1e-14);
        }
        let h = libration_frequencies(&t.with_voltage(2.0 * t.v0), &b);
        assert!((h.omega_alpha / f.omega_alpha - 2.0).abs() < 1e-14);
        let qeq = RigidBody { quadrupole: [1e-26, -2e-26, 1e-26], ..b };
        assert_eq!(libration_frequencies(&t, &qeq).omega_beta, 0.0);
    }

    #[test]
    fn rotating_frequencies_limits() {
        let t = trap();
        let b = asym_body();
        let big = 1e9;
        let w = rotating_frame_frequencies(&t, &b, big).w_beta.unwrap();
        let expected = (b.inertia[0] / b.inertia[1]).sqrt() * big / 2.0;
        assert!((w / expected - 1.0).abs() < 1e-9);
        let sym = RigidBody { inertia: [3e-24, 3e-24, 1e-24], ..b };
        let r = rotating_frame_frequencies(&t.with_voltage(0.0), &sym, t.omega_d);
        assert_eq!(r.w_gamma, Some(0.0));
    }

    #[test]
    fn decomposition_vanishes_without_xy_anisotropy() {
        let t = TrapDrive { a_x: -0.3, a_y: -0.3, a_z: 0.6, ..trap() };
        let d = corotating_potential_decomposition((0.4, 1.2, 0.7), &t, &asym_body());
        assert_eq!((d.u2, d.u3), (0.0, 0.0));
    }

    #[test]
    fn decomposition_matches_frame_transformation() {
        let t = trap();
        let b = asym_body();
        let mut rng = 12345u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..1000 {
            let (a, be, g) = (2.0 * PI * next(), PI * next(), 2.0 * PI * next());
            let time = 3.0 * t.period() * next();
            let d = corotating_potential_decomposition((a, be, g), &t, &b);
            let lab = Orientation::from_euler(a + 0.5 * t.omega_d * time, be, g);
            let direct = potential_energy(&lab, &t, &b, time);
            let scale = t.v0 / (3.0 * t.ell0 * t.ell0) * 1.6e-26;
            assert!((d.at(t.omega_d, time) - direct).abs() < 1e-10 * scale, "{} vs {direct}", d.at(t.omega_d, time));
        }
    }

    #[test]
    fn com_frequencies_follow_geometry() {
        let t = trap();
        let c = com_secular_frequencies(&t, 4e-16, 2.8e-13);
        let c2 = com_secular_frequencies(&t, 8e-16, 2.8e-13);
        let cf = com_secular_frequencies(&t.with_frequency(2.0 * t.omega_d), 4e-16, 2.8e-13);
        let a = t.geometry();
        for u in 0..3 {
            assert!((c2.omega[u] / c.omega[u] - 2.0).abs() < 1e-14);
            assert!((cf.omega[u] / c.omega[u] - 0.5).abs() < 1e-14);
            assert!((c.omega[u] / c.omega[0] - a[u].abs() / a[0].abs()).abs() < 1e-14);
        }
        assert!(c.valid);
        assert!(!com_secular_frequencies(&t, 4e-12, 2.8e-13).valid);
    }

    proptest! {
        #[test]
        fn rotation_matrix_matches_composition(a in -PI..PI, b in 0.0..PI, g in -PI..PI) {
            let z = |x: f64| nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), x).into_inner();
            let y = |x: f64| nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), x).into_inner();
            let r = rotation_matrix(a, b, g);
            prop_assert!(close(&r, &(z(a) * y(b) * z(g)), 1e-14));
            prop_assert!(close(&(r * r.transpose()), &Matrix3::identity(), 1e-10));
            prop_assert!(close(&Orientation::from_euler(a, b, g).matrix(), &r, 1e-14));
        }

        #[test]
        fn euler_round_trip(a in -PI..PI, b in 0.0..PI, g in -PI..PI) {
            let o = Orientation::from_euler(a, b, g);
            let (a2, b2, g2) = o.euler();
            prop_assert!((0.0..=PI).contains(&b2));
            prop_assert!(close(&rotation_matrix(a2, b2, g2), &o.matrix(), 1e-9));
        }

        #[test]
        fn torque_is_minus_rotation_gradient(
            a in -PI..PI, b in 0.0..PI, g in -PI..PI, phase in 0.0..1.0f64,
        ) {
            let t = trap();
            let body = asym_body();
            let o = Orientation::from_euler(a, b, g);
            let time = phase * t.period();
            let n = torque(&o, &t, &body, time);
            let h = 1e-7;
            let scale = 2.0 * t.v0 / (3.0 * t.ell0 * t.ell0) * 1.6e-26 * 0.06;
            for axis in 0..3 {
                let rot = |s: f64| Orientation(UnitQuaternion::from_axis_angle(&Vector3::ith_axis(axis), s) * o.0);
                let du = (potential_energy(&rot(h), &t, &body, time) - potential_energy(&rot(-h), &t, &body, time)) / (2.0 * h);
                prop_assert!((n[axis] + du).abs() <= 1e-6 * scale.max(n.norm()), "axis {} n {} -dU {}", axis, n[axis], -du);
            }
        }
    }
}

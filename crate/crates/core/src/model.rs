//! Trap and particle configuration.
//!
//! The trap produces the potential `V(t)/ℓ0² (a_x x² + a_y y² + a_z z²)` with
//! `V(t) = V0 cos(Ω_d t)`. The particle enters only through its inertia, its
//! total charge and its traceless quadrupole tensor; the dipole moment is
//! taken to vanish identically.

use std::f64::consts::PI;

use thiserror::Error;

use crate::units::ELEMENTARY_CHARGE;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("constraint violated: {0}")]
    ConstraintViolation(String),
    #[error("surface quadrature did not converge (relative change {change:e} after {nodes} nodes)")]
    QuadratureFailure { change: f64, nodes: usize },
}

fn violation(msg: impl Into<String>) -> ModelError {
    ModelError::ConstraintViolation(msg.into())
}

/// AC quadrupole drive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrapDrive {
    /// Voltage amplitude (V).
    pub v0: f64,
    /// Drive angular frequency (rad/s).
    pub omega_d: f64,
    /// Trap length scale (m).
    pub ell0: f64,
    pub a_x: f64,
    pub a_y: f64,
    pub a_z: f64,
}

impl TrapDrive {
    pub fn voltage(&self, t: f64) -> f64 {
        self.v0 * (self.omega_d * t).cos()
    }

    /// Drive period `2π/Ω_d`.
    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega_d
    }

    pub fn geometry(&self) -> [f64; 3] {
        [self.a_x, self.a_y, self.a_z]
    }

    pub fn with_voltage(mut self, v0: f64) -> Self {
        self.v0 = v0;
        self
    }

    pub fn with_frequency(mut self, omega_d: f64) -> Self {
        self.omega_d = omega_d;
        self
    }
}

/// Checks the trap invariants: positive scales, the ordering
/// `a_x < a_z < 0 < a_y` and a traceless geometry, in that order.
pub fn validate_trap(raw: TrapDrive) -> Result<TrapDrive, ModelError> {
    let TrapDrive { v0, omega_d, ell0, a_x, a_y, a_z } = raw;
    for (name, v) in [("V0", v0), ("omega_d", omega_d), ("ell0", ell0), ("a_x", a_x), ("a_y", a_y), ("a_z", a_z)] {
        if !v.is_finite() {
            return Err(violation(format!("{name} must be finite")));
        }
    }
    if v0 <= 0.0 {
        return Err(violation("V0 > 0 fails"));
    }
    if omega_d <= 0.0 {
        return Err(violation("omega_d > 0 fails"));
    }
    if ell0 <= 0.0 {
        return Err(violation("ell0 > 0 fails"));
    }
    if !(a_x < a_z) {
        return Err(violation("a_x < a_z fails"));
    }
    if !(a_z < 0.0) {
        return Err(violation("a_z < 0 fails"));
    }
    if !(a_y > 0.0) {
        return Err(violation("a_y > 0 fails"));
    }
    let sum = a_x + a_y + a_z;
    if sum.abs() > 1e-12 {
        return Err(violation(format!("a_x + a_y + a_z = 0 fails (sum = {sum:e})")));
    }
    Ok(raw)
}

/// Rigid particle described in its principal frame. The quadrupole tensor is
/// diagonal in the same frame as the inertia tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidBody {
    /// Principal moments of inertia (kg·m²).
    pub inertia: [f64; 3],
    /// Quadrupole eigenvalues (C·m²).
    pub quadrupole: [f64; 3],
    /// Total charge (C).
    pub charge: f64,
    /// Mass (kg).
    pub mass: f64,
    /// Isotropic angular damping rate (rad/s).
    pub gamma0: f64,
}

impl RigidBody {
    pub fn new(
        inertia: [f64; 3],
        quadrupole: [f64; 3],
        charge: f64,
        mass: f64,
        gamma0: f64,
    ) -> Result<Self, ModelError> {
        let body = Self { inertia, quadrupole, charge, mass, gamma0 };
        body.validate()?;
        Ok(body)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.inertia.iter().any(|&i| !(i > 0.0) || !i.is_finite()) {
            return Err(violation("I_k > 0 fails"));
        }
        if !(self.mass > 0.0) {
            return Err(violation("mass > 0 fails"));
        }
        if !(self.gamma0 >= 0.0) {
            return Err(violation("gamma0 >= 0 fails"));
        }
        let [q1, q2, q3] = self.quadrupole;
        let scale = q1.abs().max(q2.abs()).max(q3.abs());
        if (q1 + q2 + q3).abs() > 1e-12 * scale {
            return Err(violation("quadrupole trace Q1 + Q2 + Q3 = 0 fails"));
        }
        Ok(())
    }

    /// The dipole moment; always zero for the particles modelled here.
    pub fn dipole(&self) -> [f64; 3] {
        [0.0; 3]
    }

    pub fn with_gamma0(mut self, gamma0: f64) -> Self {
        self.gamma0 = gamma0;
        self
    }

    /// Uniform-density spheroid whose quadrupole comes from `source`.
    /// Body axis 3 is the symmetry (long) axis.
    pub fn from_spheroid(
        spec: &SpheroidSpec,
        gamma0: f64,
        source: QuadrupoleSource,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        let quadrupole = match source {
            QuadrupoleSource::ClosedForm => {
                let dq = spec.delta_q_approx();
                [-dq / 3.0, -dq / 3.0, 2.0 * dq / 3.0]
            }
            QuadrupoleSource::Surface(model) => spheroid_quadrupole_with(spec, model)?.q,
        };
        Self::new(spec.inertia(), quadrupole, spec.q_tot, spec.mass(), gamma0)
    }
}

/// Where a spheroid's quadrupole tensor comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadrupoleSource {
    /// The thin-rod estimate `ΔQ ≈ q b² (1 + 2a²/b²) / 4`, full axis lengths.
    ClosedForm,
    /// Numerical surface quadrature.
    Surface(SurfaceCharge),
}

/// Surface charge distribution on a spheroid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SurfaceCharge {
    /// Constant charge per unit area.
    #[default]
    Uniform,
    /// Charge density of an isolated conductor, `σ ∝ 1/|∇f|` on the surface
    /// `f = 0`. Its projection onto any axis is a uniform line density.
    Equipotential,
}

/// Prolate spheroid specified by full axis lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpheroidSpec {
    /// Full length of the minor axis (m).
    pub a_minor: f64,
    /// Full length of the major axis (m).
    pub b_major: f64,
    /// Total charge (C).
    pub q_tot: f64,
    /// Mass density (kg/m³).
    pub density: f64,
}

impl SpheroidSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.a_minor > 0.0 && self.a_minor <= self.b_major) {
            return Err(violation("0 < a_minor <= b_major fails"));
        }
        if !(self.density > 0.0) {
            return Err(violation("density > 0 fails"));
        }
        Ok(())
    }

    /// Semi-axes `(a/2, b/2)`.
    pub fn semi_axes(&self) -> (f64, f64) {
        (0.5 * self.a_minor, 0.5 * self.b_major)
    }

    pub fn volume(&self) -> f64 {
        let (s, c) = self.semi_axes();
        4.0 / 3.0 * PI * s * s * c
    }

    pub fn mass(&self) -> f64 {
        self.density * self.volume()
    }

    /// Solid uniform spheroid: `I1 = I2 = M(s² + c²)/5`, `I3 = 2Ms²/5`.
    pub fn inertia(&self) -> [f64; 3] {
        let (s, c) = self.semi_axes();
        let m = self.mass();
        let perp = m * (s * s + c * c) / 5.0;
        [perp, perp, 2.0 * m * s * s / 5.0]
    }

    /// `q b² (1 + 2a²/b²) / 4` with the full axis lengths plugged in.
    pub fn delta_q_approx(&self) -> f64 {
        let b = self.b_major;
        let ratio = self.a_minor / b;
        self.q_tot * b * b * (1.0 + 2.0 * ratio * ratio) / 4.0
    }
}

/// Result of [`spheroid_quadrupole`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpheroidQuadrupole {
    /// Traceless eigenvalues; index 2 is the symmetry axis.
    pub q: [f64; 3],
    /// Closed-form thin-rod estimate of `Q_long − Q_perp`.
    pub delta_q_approx: f64,
}

impl SpheroidQuadrupole {
    /// `Q_long − Q_perp` from the quadrature.
    pub fn delta_q(&self) -> f64 {
        self.q[2] - self.q[0]
    }
}

/// Quadrupole of a uniformly charged spheroid surface.
pub fn spheroid_quadrupole(spec: &SpheroidSpec) -> Result<SpheroidQuadrupole, ModelError> {
    spheroid_quadrupole_with(spec, SurfaceCharge::Uniform)
}

pub fn spheroid_quadrupole_with(
    spec: &SpheroidSpec,
    charge: SurfaceCharge,
) -> Result<SpheroidQuadrupole, ModelError> {
    spec.validate()?;
    let delta_q_approx = spec.delta_q_approx();
    if spec.a_minor == spec.b_major {
        return Ok(SpheroidQuadrupole { q: [0.0; 3], delta_q_approx });
    }
    let (s, c) = spec.semi_axes();
    // Surface parametrised by the polar angle u: z = c cos u, ρ = s sin u.
    // The azimuthal integral is done analytically; `weight` is the charge
    // per unit u up to a constant factor.
    let weight = |u: f64| {
        let (sin_u, cos_u) = u.sin_cos();
        let area = s * sin_u * (s * s * cos_u * cos_u + c * c * sin_u * sin_u).sqrt();
        match charge {
            SurfaceCharge::Uniform => area,
            SurfaceCharge::Equipotential => {
                area / (sin_u * sin_u / (s * s) + cos_u * cos_u / (c * c)).sqrt()
            }
        }
    };
    let moments = |n: usize| {
        let mut total = 0.0;
        let mut q_axis = 0.0;
        for (x, w) in gauss_legendre(n, 0.0, PI) {
            let (sin_u, cos_u) = x.sin_cos();
            let z = c * cos_u;
            let rho = s * sin_u;
            let dq = w * weight(x);
            total += dq;
            q_axis += dq * (2.0 * z * z - rho * rho);
        }
        q_axis / total
    };

    let mut nodes = 16;
    let mut prev = moments(nodes);
    loop {
        nodes *= 2;
        let next = moments(nodes);
        let change = ((next - prev) / next).abs();
        if change < 1e-12 {
            let q3 = spec.q_tot * next;
            return Ok(SpheroidQuadrupole { q: [-0.5 * q3, -0.5 * q3, q3], delta_q_approx });
        }
        if nodes >= 4096 {
            if change < 1e-8 {
                let q3 = spec.q_tot * next;
                return Ok(SpheroidQuadrupole { q: [-0.5 * q3, -0.5 * q3, q3], delta_q_approx });
            }
            return Err(ModelError::QuadratureFailure { change, nodes });
        }
        prev = next;
    }
}

/// Gauss–Legendre nodes and weights on `[lo, hi]`.
fn gauss_legendre(n: usize, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let mid = 0.5 * (hi + lo);
    let half = 0.5 * (hi - lo);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((mid + half * x, half * w));
    }
    out
}

/// Angular frequency scale of the reduced planar pendulum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumFrequency {
    /// `ω0 = sqrt(|V0 (a_x − a_y)(Q2 − Q3)| / (3 ℓ0² I1))` (rad/s).
    pub omega0: f64,
    /// True when `V0 (a_x − a_y)(Q2 − Q3) < 0`: the roles of α = 0 and
    /// α = π/2 are exchanged relative to the positive-coefficient form.
    pub equilibria_swapped: bool,
}

/// Signed coefficient `V0 (a_x − a_y)(Q2 − Q3) / (3 ℓ0² I1)` (rad²/s²).
pub fn pendulum_coefficient(trap: &TrapDrive, body: &RigidBody) -> f64 {
    let [_, q2, q3] = body.quadrupole;
    trap.v0 * (trap.a_x - trap.a_y) * (q2 - q3) / (3.0 * trap.ell0 * trap.ell0 * body.inertia[0])
}

pub fn pendulum_omega0(trap: &TrapDrive, body: &RigidBody) -> PendulumFrequency {
    let k = pendulum_coefficient(trap, body);
    PendulumFrequency { omega0: k.abs().sqrt(), equilibria_swapped: k < 0.0 }
}

/// Reference parameter set: a silica rod (15 µm × 4 µm, 2500 e) in a
/// 30 µm trap with `|a_x − a_y| = 0.103`, damped at `γ0/2π = 1 kHz`.
pub mod presets {
    use super::*;

    pub const ROD_LENGTH: f64 = 15e-6;
    pub const ROD_DIAMETER: f64 = 4e-6;
    pub const ROD_CHARGES: f64 = 2500.0;
    pub const SILICA_DENSITY: f64 = 2200.0;
    pub const TRAP_LENGTH: f64 = 30e-6;
    pub const DAMPING_HZ: f64 = 1e3;

    /// Geometry with `a_x − a_y = −0.103` obeying `a_x < a_z < 0 < a_y`.
    pub const GEOMETRY: [f64; 3] = [-0.040, 0.063, -0.023];

    pub fn rod_spheroid() -> SpheroidSpec {
        SpheroidSpec {
            a_minor: ROD_DIAMETER,
            b_major: ROD_LENGTH,
            q_tot: ROD_CHARGES * ELEMENTARY_CHARGE,
            density: SILICA_DENSITY,
        }
    }

    pub fn rod_body() -> RigidBody {
        RigidBody::from_spheroid(&rod_spheroid(), 2.0 * PI * DAMPING_HZ, QuadrupoleSource::ClosedForm)
            .expect("preset spheroid is valid")
    }

    pub fn rod_trap(v0: f64, omega_d: f64) -> TrapDrive {
        let [a_x, a_y, a_z] = GEOMETRY;
        TrapDrive { v0, omega_d, ell0: TRAP_LENGTH, a_x, a_y, a_z }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trap(a: [f64; 3]) -> TrapDrive {
        TrapDrive { v0: 500.0, omega_d: 2.0 * PI * 5e3, ell0: 30e-6, a_x: a[0], a_y: a[1], a_z: a[2] }
    }

    #[test]
    fn accepts_ordered_traceless_geometry() {
        assert!(validate_trap(trap([-0.6, 0.7, -0.1])).is_ok());
        assert!(validate_trap(trap(presets::GEOMETRY)).is_ok());
        let [a_x, a_y, _] = presets::GEOMETRY;
        assert!((a_x - a_y + 0.103).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonnegative_a_z() {
        let err = validate_trap(trap([-0.5, 0.6, 0.0])).unwrap_err();
        assert_eq!(err, ModelError::ConstraintViolation("a_z < 0 fails".into()));
    }

    #[test]
    fn rejects_bad_scales_and_trace() {
        assert!(validate_trap(trap([-0.6, 0.7, -0.2])).is_err());
        assert!(validate_trap(TrapDrive { v0: 0.0, ..trap([-0.6, 0.7, -0.1]) }).is_err());
        assert!(validate_trap(TrapDrive { omega_d: -1.0, ..trap([-0.6, 0.7, -0.1]) }).is_err());
        assert!(validate_trap(TrapDrive { ell0: f64::NAN, ..trap([-0.6, 0.7, -0.1]) }).is_err());
    }

    #[test]
    fn body_requires_traceless_quadrupole() {
        assert!(RigidBody::new([1.0; 3], [1.0, 1.0, -2.0], 1.0, 1.0, 0.0).is_ok());
        assert!(RigidBody::new([1.0; 3], [1.0, 1.0, -1.0], 1.0, 1.0, 0.0).is_err());
        assert!(RigidBody::new([1.0, 0.0, 1.0], [0.0; 3], 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn sphere_has_no_quadrupole() {
        let spec = SpheroidSpec { a_minor: 5e-6, b_major: 5e-6, q_tot: 1e-16, density: 2200.0 };
        for model in [SurfaceCharge::Uniform, SurfaceCharge::Equipotential] {
            assert_eq!(spheroid_quadrupole_with(&spec, model).unwrap().q, [0.0; 3]);
        }
    }

    #[test]
    fn rod_closed_form_value() {
        // q b² (1 + 2a²/b²)/4 with b = 15 µm, a = 4 µm, q = 2500 e.
        let dq = presets::rod_spheroid().delta_q_approx();
        let expected = 2500.0 * ELEMENTARY_CHARGE * 225e-12 * (1.0 + 2.0 * 16.0 / 225.0) / 4.0;
        assert!((dq - expected).abs() < 1e-12 * expected);
        assert!((dq - 2.573e-26).abs() < 0.001e-26);
    }

    #[test]
    fn equipotential_quadrature_matches_exact_conductor_result() {
        // Uniform line density along each axis gives ΔQ = q (c² − s²).
        let spec = SpheroidSpec { a_minor: 4e-6, b_major: 15e-6, q_tot: 4e-16, density: 2200.0 };
        let (s, c) = spec.semi_axes();
        let quad = spheroid_quadrupole_with(&spec, SurfaceCharge::Equipotential).unwrap();
        let exact = spec.q_tot * (c * c - s * s);
        assert!((quad.delta_q() - exact).abs() < 1e-10 * exact);
    }

    #[test]
    fn thin_rod_closed_form_agrees_with_equipotential_quadrature() {
        let spec = SpheroidSpec { a_minor: 0.75e-6, b_major: 15e-6, q_tot: 4e-16, density: 2200.0 };
        let quad = spheroid_quadrupole_with(&spec, SurfaceCharge::Equipotential).unwrap();
        let rel = (quad.delta_q() - quad.delta_q_approx).abs() / quad.delta_q_approx;
        assert!(rel < 0.02, "relative gap {rel}");
    }

    #[test]
    fn uniform_surface_charge_on_thin_rod_is_three_quarters_of_closed_form() {
        // Uniform area density on a needle projects to a semicircular line
        // density, so ⟨z²⟩ = c²/4 instead of c²/3.
        let spec = SpheroidSpec { a_minor: 0.15e-6, b_major: 15e-6, q_tot: 4e-16, density: 2200.0 };
        let quad = spheroid_quadrupole(&spec).unwrap();
        let ratio = quad.delta_q() / quad.delta_q_approx;
        assert!((ratio - 0.75).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let nodes = gauss_legendre(8, -1.0, 2.0);
        let integral: f64 = nodes.iter().map(|(x, w)| w * x.powi(15)).sum();
        let exact = (2f64.powi(16) - 1.0) / 16.0;
        assert!((integral - exact).abs() < 1e-10 * exact);
    }

    #[test]
    fn omega0_vanishes_for_symmetric_particle_and_scales_with_root_voltage() {
        let body = RigidBody::new([1e-24; 3], [1e-26, 1e-26, -2e-26], 1e-16, 1e-13, 0.0).unwrap();
        let t = trap([-0.6, 0.7, -0.1]);
        assert!(pendulum_omega0(&t, &body).omega0 > 0.0);
        let sym = RigidBody::new([1e-24; 3], [-2e-26, 1e-26, 1e-26], 1e-16, 1e-13, 0.0).unwrap();
        assert_eq!(pendulum_omega0(&t, &sym).omega0, 0.0);
        let w1 = pendulum_omega0(&t, &body).omega0;
        let w2 = pendulum_omega0(&t.with_voltage(2.0 * t.v0), &body).omega0;
        assert!((w2 / w1 - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn rod_preset_has_positive_pendulum_coefficient() {
        let body = presets::rod_body();
        let t = presets::rod_trap(500.0, 2.0 * PI * 5e3);
        let freq = pendulum_omega0(&t, &body);
        assert!(!freq.equilibria_swapped);
        // Regression value for the reference rod at 500 V.
        let expected = (500.0 * 0.103 * presets::rod_spheroid().delta_q_approx()
            / (3.0 * 900e-12 * body.inertia[0]))
            .sqrt();
        assert!((freq.omega0 - expected).abs() < 1e-9 * expected);
    }

    proptest! {
        #[test]
        fn quadrupole_is_traceless_and_linear_in_charge(
            a in 0.5e-6f64..10e-6, ratio in 1.0f64..20.0, scale in -8i32..8,
        ) {
            let spec = SpheroidSpec { a_minor: a, b_major: a * ratio, q_tot: 3e-16, density: 2000.0 };
            for model in [SurfaceCharge::Uniform, SurfaceCharge::Equipotential] {
                let base = spheroid_quadrupole_with(&spec, model).unwrap();
                let norm = base.q.iter().map(|q| q * q).sum::<f64>().sqrt();
                prop_assert!(base.q.iter().sum::<f64>().abs() <= 1e-12 * norm.max(f64::MIN_POSITIVE));
                let lambda = 2f64.powi(scale);
                let scaled = spheroid_quadrupole_with(&SpheroidSpec { q_tot: lambda * spec.q_tot, ..spec }, model).unwrap();
                for k in 0..3 {
                    prop_assert_eq!(scaled.q[k], lambda * base.q[k]);
                }
            }
        }

        #[test]
        fn omega0_is_homogeneous_in_voltage(lambda in 0.01f64..100.0) {
            let body = presets::rod_body();
            let t = presets::rod_trap(700.0, 1e4);
            let w = pendulum_omega0(&t, &body).omega0;
            let ws = pendulum_omega0(&t.with_voltage(lambda * t.v0), &body).omega0;
            prop_assert!((ws - lambda.sqrt() * w).abs() <= 1e-13 * ws);
        }
    }
}

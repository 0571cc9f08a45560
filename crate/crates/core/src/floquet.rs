//! Floquet analysis of two-dimensional linear periodic systems `ẋ = A(t) x`.

use std::f64::consts::PI;

use thiserror::Error;

use crate::ode::{Dopri5, OdeError, OdeSystem};
use crate::rotor1d::Pendulum;

pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FloquetError {
    #[error("integration failed: {0}")]
    StepFailure(#[from] OdeError),
    #[error("no stability change found in the scanned range")]
    BoundaryNotFound,
}

/// `ẋ = A(t) x` with `A(t + period) = A(t)`.
pub struct PeriodicLinearSystem<F: Fn(f64) -> Mat2> {
    pub period: f64,
    pub coefficients: F,
}

impl<F: Fn(f64) -> Mat2> PeriodicLinearSystem<F> {
    pub fn new(period: f64, coefficients: F) -> Self {
        assert!(period > 0.0, "period must be positive");
        Self { period, coefficients }
    }
}

// Both fundamental solutions are integrated together as one 4-vector
// `[x11, x21, x12, x22]` (column-major).
impl<F: Fn(f64) -> Mat2> OdeSystem<4> for PeriodicLinearSystem<F> {
    fn derivative(&self, t: f64, y: &[f64; 4]) -> [f64; 4] {
        let a = (self.coefficients)(t);
        [
            a[0][0] * y[0] + a[0][1] * y[1],
            a[1][0] * y[0] + a[1][1] * y[1],
            a[0][0] * y[2] + a[0][1] * y[3],
            a[1][0] * y[2] + a[1][1] * y[3],
        ]
    }
}

/// State-transition matrix over one period.
pub fn monodromy<F: Fn(f64) -> Mat2>(sys: &PeriodicLinearSystem<F>) -> Result<Mat2, FloquetError> {
    let ode = Dopri5::with_tolerance(1e-12, 1e-14);
    let (y, _) = ode.integrate(sys, 0.0, [1.0, 0.0, 0.0, 1.0], sys.period, |_| {})?;
    Ok([[y[0], y[2]], [y[1], y[3]]])
}

/// Largest modulus among the eigenvalues of a real 2×2 matrix.
pub fn spectral_radius(m: &Mat2) -> f64 {
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = 0.25 * tr * tr - det;
    if disc >= 0.0 {
        let r = disc.sqrt();
        (0.5 * tr + r).abs().max((0.5 * tr - r).abs())
    } else {
        // Complex pair: |λ|² = det.
        det.abs().sqrt()
    }
}

pub fn is_stable<F: Fn(f64) -> Mat2>(sys: &PeriodicLinearSystem<F>) -> Result<bool, FloquetError> {
    Ok(spectral_radius(&monodromy(sys)?) <= 1.0 + 1e-9)
}

/// `ü + c u̇ + (a − 2q cos 2τ) u = 0`, period π.
pub fn mathieu(a: f64, q: f64, damping: f64) -> PeriodicLinearSystem<impl Fn(f64) -> Mat2> {
    PeriodicLinearSystem::new(PI, move |tau: f64| [[0.0, 1.0], [-(a - 2.0 * q * (2.0 * tau).cos()), -damping]])
}

/// First `q` at which the stability of the Mathieu equation changes, scanning
/// upward from `q = 0.01` in steps of 0.01 and bisecting to `1e-4`.
pub fn mathieu_boundary_q(a: f64) -> Result<f64, FloquetError> {
    mathieu_boundary_q_damped(a, 0.0)
}

pub fn mathieu_boundary_q_damped(a: f64, damping: f64) -> Result<f64, FloquetError> {
    let stable = |q: f64| is_stable(&mathieu(a, q, damping));
    let step = 0.01;
    let first = stable(step)?;
    let mut lo = step;
    let mut hi = None;
    for k in 2..=1000 {
        let q = k as f64 * step;
        if stable(q)? != first {
            hi = Some(q);
            break;
        }
        lo = q;
    }
    let mut hi = hi.ok_or(FloquetError::BoundaryNotFound)?;
    while hi - lo > 1e-4 {
        let mid = 0.5 * (lo + hi);
        if stable(mid)? == first {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Motion linearised about α = 0:
/// `δα̈ + γ0 δα̇ + 2ω0² cos(Ω_d t) δα = 0`.
pub fn linearised_pendulum(p: &Pendulum) -> PeriodicLinearSystem<impl Fn(f64) -> Mat2> {
    let (k, gamma, omega) = (p.omega0_sq, p.gamma0, p.omega_d);
    PeriodicLinearSystem::new(2.0 * PI / omega, move |t: f64| [[0.0, 1.0], [-2.0 * k * (omega * t).cos(), -gamma]])
}

/// True when small librations about α = 0 grow.
pub fn pendulum_instability(p: &Pendulum) -> Result<bool, FloquetError> {
    Ok(!is_stable(&linearised_pendulum(p))?)
}

/// Highest `Ω_d` in `omega_range` at which [`pendulum_instability`] holds,
/// found by a 1% geometric downward scan refined to `1e-4` relative. `None`
/// when the linearisation is stable over the whole range.
pub fn instability_onset(p: &Pendulum, omega_range: (f64, f64)) -> Result<Option<f64>, FloquetError> {
    let (lo, hi) = omega_range;
    let unstable = |omega: f64| pendulum_instability(&p.with_frequency(omega));
    if unstable(hi)? {
        return Ok(Some(hi));
    }
    let mut above = hi;
    let mut omega = hi;
    loop {
        omega /= 1.01;
        if omega < lo {
            return Ok(None);
        }
        if unstable(omega)? {
            break;
        }
        above = omega;
    }
    let (mut a, mut b) = (omega, above);
    while b / a - 1.0 > 1e-4 {
        let mid = (a * b).sqrt();
        if unstable(mid)? {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(Some(a))
}

/// `(v0, Ω_d, stable)` over a rectangular grid, row-major in `v0`.
pub fn stability_grid(p: &Pendulum, v0_ref: f64, v0_grid: &[f64], omega_grid: &[f64]) -> Result<Vec<(f64, f64, bool)>, FloquetError> {
    use rayon::prelude::*;
    let cells: Vec<(f64, f64)> = v0_grid.iter().flat_map(|&v| omega_grid.iter().map(move |&w| (v, w))).collect();
    cells
        .par_iter()
        .map(|&(v0, omega)| {
            // ω0² is linear in V0.
            let q = Pendulum { omega0_sq: p.omega0_sq * v0 / v0_ref, gamma0: p.gamma0, omega_d: omega };
            Ok((v0, omega, !pendulum_instability(&q)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn expm_series(a: Mat2, t: f64) -> Mat2 {
        let mut term = [[1.0, 0.0], [0.0, 1.0]];
        let mut sum = term;
        for k in 1..60 {
            let mut next = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    next[i][j] = (term[i][0] * a[0][j] + term[i][1] * a[1][j]) * t / k as f64;
                }
            }
            term = next;
            for i in 0..2 {
                for j in 0..2 {
                    sum[i][j] += term[i][j];
                }
            }
        }
        sum
    }

    #[test]
    fn zero_system_gives_identity() {
        let m = monodromy(&PeriodicLinearSystem::new(1.3, |_| [[0.0; 2]; 2])).unwrap();
        assert_eq!(m, [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn constant_system_matches_series_exponential() {
        let a = [[0.3, -1.1], [0.7, -0.4]];
        let m = monodromy(&PeriodicLinearSystem::new(2.0, move |_| a)).unwrap();
        let e = expm_series(a, 2.0);
        for i in 0..2 {
            for j in 0..2 {
                assert!((m[i][j] - e[i][j]).abs() < 1e-9, "{m:?} vs {e:?}");
            }
        }
    }

    #[test]
    fn damped_constant_system_is_stable() {
        assert!(is_stable(&PeriodicLinearSystem::new(1.0, |_| [[-1.0, 0.0], [0.0, -2.0]])).unwrap());
    }

    #[test]
    fn mathieu_reference_points() {
        assert!(!is_stable(&mathieu(0.0, 1.2, 0.0)).unwrap());
        assert!(is_stable(&mathieu(0.0, 0.5, 0.0)).unwrap());
        for a in [0.1, 0.5, 0.9] {
            assert!(is_stable(&mathieu(a, 0.0, 0.0)).unwrap());
        }
    }

    #[test]
    fn mathieu_edge_at_zero_a() {
        let q = mathieu_boundary_q(0.0).unwrap();
        assert!((q - 0.908).abs() < 0.005, "q_c = {q}");
        let damped = mathieu_boundary_q_damped(0.0, 0.2).unwrap();
        assert!(damped > q, "{damped} <= {q}");
    }

    #[test]
    fn undamped_pendulum_onset_near_2_1_omega0() {
        let w0 = 1e4;
        let p = Pendulum { omega0_sq: w0 * w0, gamma0: 0.0, omega_d: 10.0 * w0 };
        assert!(!pendulum_instability(&p).unwrap());
        let onset = instability_onset(&p, (0.5 * w0, 10.0 * w0)).unwrap().unwrap();
        let q_c = mathieu_boundary_q(0.0).unwrap();
        let expected = 2.0 * w0 / q_c.sqrt();
        assert!((onset / expected - 1.0).abs() < 2e-3, "{onset} vs {expected}");
        assert!((onset / w0 - 2.10).abs() < 0.01);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn liouville_formula(c0 in -1.0f64..1.0, c1 in -1.0f64..1.0, k in 0.0f64..3.0, d in -0.5f64..0.5) {
            let period = 1.7;
            let w = 2.0 * PI / period;
            let sys = PeriodicLinearSystem::new(period, move |t: f64| {
                [[c0 * (w * t).sin(), 1.0], [-k * (w * t).cos(), d + c1 * (w * t).cos()]]
            });
            let m = monodromy(&sys).unwrap();
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            // The periodic parts of the trace integrate to zero.
            let expected = (d * period).exp();
            prop_assert!((det - expected).abs() < 1e-9 * expected.max(1.0));
        }

        #[test]
        fn instability_depends_only_on_dimensionless_groups(
            ratio in 0.5f64..4.0, damping in 0.0f64..0.3, scale in 0.1f64..10.0,
        ) {
            let base = Pendulum { omega0_sq: 1.0, gamma0: damping * ratio, omega_d: ratio };
            let scaled = Pendulum {
                omega0_sq: base.omega0_sq * scale * scale,
                gamma0: base.gamma0 * scale,
                omega_d: base.omega_d * scale,
            };
            let ra = spectral_radius(&monodromy(&linearised_pendulum(&base)).unwrap());
            let rb = spectral_radius(&monodromy(&linearised_pendulum(&scaled)).unwrap());
            prop_assert!((ra - rb).abs() < 1e-7 * ra.max(1.0));
        }
    }
}

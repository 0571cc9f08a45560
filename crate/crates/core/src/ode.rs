//! Adaptive Dormand–Prince 5(4) integrator with continuous (dense) output.
//!
//! Every trajectory in the crate is produced by this one integrator: the
//! planar pendulum, the full rigid body, and the columns of Floquet
//! monodromy matrices. States are fixed-size arrays so the hot loop never
//! allocates.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t:e} (h = {h:e})")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("step budget of {max_steps} exhausted at t = {t:e}")]
    TooManySteps { t: f64, max_steps: usize },
    #[error("non-finite state at t = {t:e}")]
    NonFinite { t: f64 },
}

/// A first-order system `y' = f(t, y)`.
pub trait OdeSystem<const N: usize> {
    fn derivative(&self, t: f64, y: &[f64; N]) -> [f64; N];

    /// Called after each accepted step; systems living on a manifold
    /// (unit quaternions) pull the state back onto it here.
    fn project(&self, _y: &mut [f64; N]) -> bool {
        false
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// One accepted step together with its fourth-order interpolant.
#[derive(Debug, Clone)]
pub struct DenseStep<const N: usize> {
    t_start: f64,
    h: f64,
    coeffs: [[f64; N]; 5],
    y_end: [f64; N],
}

impl<const N: usize> DenseStep<N> {
    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.h
    }

    pub fn y_end(&self) -> &[f64; N] {
        &self.y_end
    }

    /// Interpolated state at `t`, which should lie inside the step.
    pub fn eval(&self, t: f64) -> [f64; N] {
        let theta = (t - self.t_start) / self.h;
        let theta1 = 1.0 - theta;
        let [r1, r2, r3, r4, r5] = &self.coeffs;
        let mut y = [0.0; N];
        for i in 0..N {
            y[i] = r1[i] + theta * (r2[i] + theta1 * (r3[i] + theta * (r4[i] + theta1 * r5[i])));
        }
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dopri5 {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on the internal step.
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for Dopri5 {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-12, h_max: f64::INFINITY, max_steps: 50_000_000 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Stats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

impl Dopri5 {
    pub fn with_tolerance(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }

    pub fn with_max_step(mut self, h_max: f64) -> Self {
        self.h_max = h_max;
        self
    }

    /// Integrates from `(t0, y0)` to `t_end`, handing every accepted step to
    /// `on_step`. Returns the final state.
    pub fn integrate<S, F, const N: usize>(
        &self,
        sys: &S,
        t0: f64,
        y0: [f64; N],
        t_end: f64,
        mut on_step: F,
    ) -> Result<([f64; N], Stats), OdeError>
    where
        S: OdeSystem<N> + ?Sized,
        F: FnMut(&DenseStep<N>),
    {
        let mut stats = Stats::default();
        let mut t = t0;
        let mut y = y0;
        if t_end == t0 {
            return Ok((y, stats));
        }
        let dir = (t_end - t0).signum();
        let span = (t_end - t0).abs();
        let h_max = self.h_max.min(span);

        let mut k1 = sys.derivative(t, &y);
        stats.evaluations += 1;
        let mut h = self.initial_step(sys, t, &y, &k1, dir, h_max, &mut stats);
        let mut rejected_last = false;

        loop {
            if stats.accepted + stats.rejected >= self.max_steps {
                return Err(OdeError::TooManySteps { t, max_steps: self.max_steps });
            }
            let remaining = (t_end - t) * dir;
            let last = h >= remaining * (1.0 - 1e-12);
            if last {
                h = remaining;
            }
            let hs = h * dir;
            if h <= 1e-14 * t.abs().max(span) {
                return Err(OdeError::StepSizeUnderflow { t, h });
            }

            let mut tmp = [0.0; N];
            for i in 0..N {
                tmp[i] = y[i] + hs * A21 * k1[i];
            }
            let k2 = sys.derivative(t + C2 * hs, &tmp);
            for i in 0..N {
                tmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
            }
            let k3 = sys.derivative(t + C3 * hs, &tmp);
            for i in 0..N {
                tmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            let k4 = sys.derivative(t + C4 * hs, &tmp);
            for i in 0..N {
                tmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            let k5 = sys.derivative(t + C5 * hs, &tmp);
            for i in 0..N {
                tmp[i] = y[i]
                    + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            let t_new = if last { t_end } else { t + hs };
            let k6 = sys.derivative(t + hs, &tmp);
            let mut y_new = [0.0; N];
            for i in 0..N {
                y_new[i] = y[i]
                    + hs * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            let k7 = sys.derivative(t_new, &y_new);
            stats.evaluations += 6;

            let mut err_sq = 0.0;
            for i in 0..N {
                let e = hs
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sc = self.atol + self.rtol * y[i].abs().max(y_new[i].abs());
                err_sq += (e / sc) * (e / sc);
            }
            let err = (err_sq / N as f64).sqrt();
            if !err.is_finite() {
                if y_new.iter().all(|v| v.is_finite()) {
                    h *= 0.2;
                    stats.rejected += 1;
                    continue;
                }
                return Err(OdeError::NonFinite { t });
            }

            if err <= 1.0 {
                stats.accepted += 1;
                let mut coeffs = [[0.0; N]; 5];
                for i in 0..N {
                    let ydiff = y_new[i] - y[i];
                    let bspl = hs * k1[i] - ydiff;
                    coeffs[0][i] = y[i];
                    coeffs[1][i] = ydiff;
                    coeffs[2][i] = bspl;
                    coeffs[3][i] = ydiff - hs * k7[i] - bspl;
                    coeffs[4][i] = hs
                        * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i]
                            + D7 * k7[i]);
                }
                let mut y_acc = y_new;
                let projected = sys.project(&mut y_acc);
                on_step(&DenseStep { t_start: t, h: hs, coeffs, y_end: y_acc });
                t = t_new;
                y = y_acc;
                k1 = if projected {
                    stats.evaluations += 1;
                    sys.derivative(t, &y)
                } else {
                    k7
                };
                if last {
                    return Ok((y, stats));
                }
                let mut fac = 0.9 * err.max(1e-10).powf(-0.2);
                fac = fac.clamp(0.2, 10.0);
                if rejected_last {
                    fac = fac.min(1.0);
                }
                rejected_last = false;
                h = (h * fac).min(h_max);
            } else {
                stats.rejected += 1;
                rejected_last = true;
                h *= (0.9 * err.powf(-0.2)).max(0.2);
            }
        }
    }

    fn initial_step<S, const N: usize>(
        &self,
        sys: &S,
        t: f64,
        y: &[f64; N],
        f0: &[f64; N],
        dir: f64,
        h_max: f64,
        stats: &mut Stats,
    ) -> f64
    where
        S: OdeSystem<N> + ?Sized,
    {
        // Hairer–Wanner starting step heuristic.
        let mut d0 = 0.0;
        let mut d1 = 0.0;
        for i in 0..N {
            let sc = self.atol + self.rtol * y[i].abs();
            d0 += (y[i] / sc).powi(2);
            d1 += (f0[i] / sc).powi(2);
        }
        d0 = (d0 / N as f64).sqrt();
        d1 = (d1 / N as f64).sqrt();
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(h_max);
        let mut y1 = [0.0; N];
        for i in 0..N {
            y1[i] = y[i] + dir * h0 * f0[i];
        }
        let f1 = sys.derivative(t + dir * h0, &y1);
        stats.evaluations += 1;
        let mut d2 = 0.0;
        for i in 0..N {
            let sc = self.atol + self.rtol * y[i].abs();
            d2 += ((f1[i] - f0[i]) / sc).powi(2);
        }
        d2 = (d2 / N as f64).sqrt() / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(h_max)
    }

    /// Integrates and samples the dense output on `t0, t0 + dt, ...`, always
    /// including `t_end` as the final sample.
    pub fn sample<S, const N: usize>(
        &self,
        sys: &S,
        t0: f64,
        y0: [f64; N],
        t_end: f64,
        dt: f64,
    ) -> Result<Vec<(f64, [f64; N])>, OdeError>
    where
        S: OdeSystem<N> + ?Sized,
    {
        assert!(dt > 0.0, "sample spacing must be positive");
        // A span that is a whole number of steps up to round-off must not
        // grow a sliver interval at the end.
        let ratio = (t_end - t0) / dt;
        let n_intervals = if (ratio - ratio.round()).abs() <= 1e-9 * ratio.abs().max(1.0) {
            ratio.round()
        } else {
            ratio.ceil()
        }
        .max(0.0) as usize;
        let times: Vec<f64> = (0..n_intervals)
            .map(|k| t0 + k as f64 * dt)
            .chain(std::iter::once(t_end))
            .collect();
        let mut out = Vec::with_capacity(times.len());
        out.push((t0, y0));
        let mut next = 1;
        let integrator = self.with_max_step(self.h_max.min(dt));
        let (y_final, _) = integrator.integrate(sys, t0, y0, t_end, |step| {
            while next < times.len() - 1 && times[next] <= step.t_end() {
                out.push((times[next], step.eval(times[next])));
                next += 1;
            }
        })?;
        if times.len() > 1 {
            out.push((t_end, y_final));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Decay(f64);
    impl OdeSystem<1> for Decay {
        fn derivative(&self, _t: f64, y: &[f64; 1]) -> [f64; 1] {
            [-self.0 * y[0]]
        }
    }

    struct Oscillator;
    impl OdeSystem<2> for Oscillator {
        fn derivative(&self, _t: f64, y: &[f64; 2]) -> [f64; 2] {
            [y[1], -y[0]]
        }
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let solver = Dopri5::with_tolerance(1e-12, 1e-14);
        let (y, stats) = solver.integrate(&Decay(3.0), 0.0, [2.0], 2.0, |_| {}).unwrap();
        assert!((y[0] - 2.0 * (-6.0f64).exp()).abs() < 1e-12);
        assert!(stats.accepted > 10);
    }

    #[test]
    fn dense_output_tracks_harmonic_motion() {
        let solver = Dopri5::with_tolerance(1e-11, 1e-13);
        let samples = solver.sample(&Oscillator, 0.0, [1.0, 0.0], 20.0, 0.37).unwrap();
        assert_eq!(samples.last().unwrap().0, 20.0);
        for (t, y) in &samples {
            assert!((y[0] - t.cos()).abs() < 1e-8, "t = {t}");
            assert!((y[1] + t.sin()).abs() < 1e-8, "t = {t}");
        }
        let spacing = samples[2].0 - samples[1].0;
        assert!((spacing - 0.37).abs() < 1e-12);
    }

    #[test]
    fn backward_integration() {
        let solver = Dopri5::with_tolerance(1e-12, 1e-14);
        let (y, _) = solver.integrate(&Decay(1.0), 1.0, [1.0], 0.0, |_| {}).unwrap();
        assert!((y[0] - 1.0f64.exp()).abs() < 1e-11);
    }

    #[test]
    fn step_budget_is_enforced() {
        let solver = Dopri5 { max_steps: 5, ..Dopri5::with_tolerance(1e-12, 1e-14) };
        let err = solver.integrate(&Oscillator, 0.0, [1.0, 0.0], 100.0, |_| {}).unwrap_err();
        assert!(matches!(err, OdeError::TooManySteps { .. }));
    }
}

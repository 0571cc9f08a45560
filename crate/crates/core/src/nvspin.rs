//! NV⁻ ensemble in a rotating diamond.
//!
//! Each of the four [111] classes is a ground-state spin 1 with
//! `H = D Sz² + γe (B∥ Sz + B⊥ Sx)` in its own frame, with the transverse
//! field taken along x so that `H` is real symmetric. Frequencies are in Hz,
//! fields in tesla.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{Read, Write};

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::symmetric_eigen3;
use crate::rotor3d::Orientation;
use crate::units::{fwhm_to_sigma, NV_GYROMAGNETIC_RATIO, NV_ZERO_FIELD_SPLITTING};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NvError {
    #[error("invalid NV model: {0}")]
    InvalidModel(String),
    #[error("class {class}: |cos θ| exceeds 1 by {excess:e} before clamping")]
    ClampWarning { class: usize, excess: f64 },
    #[error("pulse duration {tau:e} s exceeds 1% of the rotation period ({limit:e} s)")]
    PulseTooLong { tau: f64, limit: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("map file: {0}")]
    Format(String),
}

/// Linewidth used when none is configured (Hz, FWHM).
pub const DEFAULT_FWHM: f64 = 6.5e6;
pub const DEFAULT_CONTRAST: f64 = 0.02;
/// Time samples per rotation period in the continuous-ODMR average.
pub const CONTINUOUS_SAMPLES: usize = 256;

/// The four [111] directions in the diamond frame.
pub fn nv_axes() -> [Vector3<f64>; 4] {
    let s = 1.0 / 3f64.sqrt();
    [
        Vector3::new(s, s, s),
        Vector3::new(s, -s, -s),
        Vector3::new(-s, s, -s),
        Vector3::new(-s, -s, s),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct NvModel {
    /// Zero-field splitting (Hz).
    pub d: f64,
    /// Hz/T.
    pub gamma_e: f64,
    /// Class axes in the diamond frame.
    pub axes0: [Vector3<f64>; 4],
    /// Gaussian standard deviation of each line (Hz).
    pub linewidth_sigma: f64,
    /// Peak dip depth of each line, per class.
    pub contrast: [f64; 4],
}

impl Default for NvModel {
    fn default() -> Self {
        Self {
            d: NV_ZERO_FIELD_SPLITTING,
            gamma_e: NV_GYROMAGNETIC_RATIO,
            axes0: nv_axes(),
            linewidth_sigma: fwhm_to_sigma(DEFAULT_FWHM),
            contrast: [DEFAULT_CONTRAST; 4],
        }
    }
}

impl NvModel {
    pub fn new(d: f64, gamma_e: f64, fwhm: f64, contrast: f64) -> Result<Self, NvError> {
        Self { d, gamma_e, axes0: nv_axes(), linewidth_sigma: fwhm_to_sigma(fwhm), contrast: [contrast; 4] }.validate()
    }

    pub fn validate(self) -> Result<Self, NvError> {
        let bad = |m: String| Err(NvError::InvalidModel(m));
        if !(self.d.is_finite() && self.gamma_e.is_finite() && self.linewidth_sigma > 0.0) {
            return bad(format!("D = {}, gamma_e = {}, sigma = {}", self.d, self.gamma_e, self.linewidth_sigma));
        }
        for (i, a) in self.axes0.iter().enumerate() {
            if (a.norm() - 1.0).abs() > 1e-9 {
                return bad(format!("axis {i} is not unit length"));
            }
            for b in &self.axes0[i + 1..] {
                if (a.dot(b).abs() - 1.0 / 3.0).abs() > 1e-9 {
                    return bad(format!("axis {i} is not at the tetrahedral angle to its partners"));
                }
            }
        }
        if self.contrast.iter().any(|&c| !(c > 0.0 && c < 1.0)) {
            return bad(format!("contrast {:?} outside (0, 1)", self.contrast));
        }
        Ok(self)
    }

    /// Same model with class axes relabelled: class `k` of the result is
    /// class `perm[k]` of `self`.
    pub fn permuted(&self, perm: [usize; 4]) -> Self {
        Self {
            axes0: perm.map(|k| self.axes0[k]),
            contrast: perm.map(|k| self.contrast[k]),
            ..self.clone()
        }
    }
}

/// Spin-1 Hamiltonian (Hz) in the basis `|+1⟩, |0⟩, |−1⟩` of the class
/// whose lab-frame axis is `axis`.
pub fn nv_hamiltonian(b_lab: &Vector3<f64>, axis: &Vector3<f64>, model: &NvModel) -> Matrix3<f64> {
    let n = axis.normalize();
    let b_par = b_lab.dot(&n);
    let b_perp = (b_lab - n * b_par).norm();
    let z = model.gamma_e * b_par;
    let x = model.gamma_e * b_perp * FRAC_1_SQRT_2;
    Matrix3::new(model.d + z, x, 0.0, x, 0.0, x, 0.0, x, model.d - z)
}

/// `(f_minus, f_plus)` of the two transitions out of the state with the
/// largest `|0⟩` weight. Valid for `|B| ≲ 0.3 T`.
pub fn transition_frequencies(b_lab: &Vector3<f64>, axis: &Vector3<f64>, model: &NvModel) -> (f64, f64) {
    let eig = symmetric_eigen3(&nv_hamiltonian(b_lab, axis, model));
    let zero = (0..3).max_by(|&a, &b| eig.vectors[a][1].abs().total_cmp(&eig.vectors[b][1].abs())).unwrap();
    let e0 = eig.values[zero];
    let mut f: Vec<f64> = (0..3).filter(|&k| k != zero).map(|k| (eig.values[k] - e0).abs()).collect();
    f.sort_by(f64::total_cmp);
    (f[0], f[1])
}

/// Transitions of all four classes for a diamond at `orientation`.
pub fn class_transitions(orientation: &Orientation, b_lab: &Vector3<f64>, model: &NvModel) -> [(f64, f64); 4] {
    model.axes0.map(|a| transition_frequencies(b_lab, &(orientation.0 * a), model))
}

/// Rigid rotation at constant rate about a fixed lab axis:
/// `R(t) = AxisRotation(axis, ω t + phase) · orientation0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationModel {
    pub axis: Unit<Vector3<f64>>,
    /// rad/s.
    pub omega_rot: f64,
    pub orientation0: Orientation,
    /// Rotation angle at t = 0 (rad).
    pub phase: f64,
}

impl RotationModel {
    pub fn new(axis: Vector3<f64>, omega_rot: f64, orientation0: Orientation) -> Result<Self, NvError> {
        if !(axis.norm() > 0.0 && axis.iter().all(|v| v.is_finite())) {
            return Err(NvError::InvalidArgument("rotation axis must be a nonzero finite vector".into()));
        }
        if !(omega_rot.is_finite() && omega_rot != 0.0) {
            return Err(NvError::InvalidArgument(format!("rotation rate {omega_rot} must be finite and nonzero")));
        }
        Ok(Self { axis: Unit::new_normalize(axis), omega_rot, orientation0, phase: 0.0 })
    }

    pub fn with_phase(self, phase: f64) -> Self {
        Self { phase, ..self }
    }

    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega_rot.abs()
    }

    pub fn orientation(&self, t: f64) -> Orientation {
        let turn = UnitQuaternion::from_axis_angle(&self.axis, self.omega_rot * t + self.phase);
        Orientation(turn * self.orientation0.0)
    }

    /// Lab direction of class `class` at time `t`.
    pub fn class_axis(&self, model: &NvModel, class: usize, t: f64) -> Vector3<f64> {
        self.orientation(t).0 * model.axes0[class]
    }
}

/// Angle between class `class` and the field direction at time `t`.
pub fn theta_angle(
    rot: &RotationModel,
    model: &NvModel,
    class: usize,
    b_dir: &Vector3<f64>,
    t: f64,
) -> Result<f64, NvError> {
    let c = rot.class_axis(model, class, t).dot(b_dir);
    let excess = c.abs() - 1.0;
    if excess > 1e-9 {
        return Err(NvError::ClampWarning { class, excess });
    }
    Ok(c.clamp(-1.0, 1.0).acos())
}

/// `cos θ(t) = a + b cos(ω t + φ)` for one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaSinusoid {
    pub a: f64,
    pub b: f64,
    pub phi: f64,
    /// RMS misfit in `cos θ`.
    pub residual_rms: f64,
}

impl ThetaSinusoid {
    pub fn cos_theta(&self, omega: f64, t: f64) -> f64 {
        self.a + self.b * (omega * t + self.phi).cos()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaTrace {
    pub omega_rot: f64,
    pub classes: Vec<ThetaSinusoid>,
}

/// Linear least squares of `cos θ` on `{1, cos ωt, sin ωt}`.
pub fn fit_theta_sinusoid(times: &[f64], thetas: &[f64], omega: f64) -> Result<ThetaSinusoid, NvError> {
    if times.len() != thetas.len() || times.len() < 3 {
        return Err(NvError::InvalidArgument("need at least three (t, θ) samples of equal length".into()));
    }
    let n = times.len();
    let design = nalgebra::DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => (omega * times[i]).cos(),
        _ => (omega * times[i]).sin(),
    });
    let y = nalgebra::DVector::from_iterator(n, thetas.iter().map(|t| t.cos()));
    let coef = design
        .clone()
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| NvError::InvalidArgument(e.into()))?;
    let resid = &design * &coef - &y;
    // b cos(ωt + φ) = b cos φ cos ωt − b sin φ sin ωt
    Ok(ThetaSinusoid {
        a: coef[0],
        b: coef[1].hypot(coef[2]),
        phi: (-coef[2]).atan2(coef[1]),
        residual_rms: (resid.norm_squared() / n as f64).sqrt(),
    })
}

/// θ sampled at `times` for every class and fitted with [`fit_theta_sinusoid`].
pub fn theta_trace(rot: &RotationModel, model: &NvModel, b_dir: &Vector3<f64>, times: &[f64]) -> Result<ThetaTrace, NvError> {
    let dir = b_dir.normalize();
    let classes = (0..4)
        .map(|i| {
            let th = times.iter().map(|&t| theta_angle(rot, model, i, &dir, t)).collect::<Result<Vec<_>, _>>()?;
            fit_theta_sinusoid(times, &th, rot.omega_rot)
        })
        .collect::<Result<_, _>>()?;
    Ok(ThetaTrace { omega_rot: rot.omega_rot, classes })
}

fn gaussian(f: f64, f0: f64, sigma: f64) -> f64 {
    let x = (f - f0) / sigma;
    (-0.5 * x * x).exp()
}

/// Smallest PL value reported; keeps the spectrum strictly positive.
const PL_FLOOR: f64 = 1e-12;

/// `PL(f) = 1 − Σ contrast · G(f; f_k, σ)` over the eight lines.
pub fn odmr_spectrum_static(orientation: &Orientation, b_lab: &Vector3<f64>, model: &NvModel, freqs: &[f64]) -> Vec<f64> {
    let lines = class_transitions(orientation, b_lab, model);
    freqs
        .iter()
        .map(|&f| {
            let dip: f64 = lines
                .iter()
                .zip(&model.contrast)
                .map(|(&(lo, hi), &c)| c * (gaussian(f, lo, model.linewidth_sigma) + gaussian(f, hi, model.linewidth_sigma)))
                .sum();
            (1.0 - dip).max(PL_FLOOR)
        })
        .collect()
}

/// Static spectrum averaged over one rotation period with
/// [`CONTINUOUS_SAMPLES`] uniform samples.
pub fn odmr_continuous_rotating(rot: &RotationModel, b_lab: &Vector3<f64>, model: &NvModel, freqs: &[f64]) -> Vec<f64> {
    odmr_rotating_average(rot, b_lab, model, freqs, 1, CONTINUOUS_SAMPLES)
}

/// Average over `periods` whole periods with `samples_per_period` uniform
/// samples in each.
pub fn odmr_rotating_average(
    rot: &RotationModel,
    b_lab: &Vector3<f64>,
    model: &NvModel,
    freqs: &[f64],
    periods: usize,
    samples_per_period: usize,
) -> Vec<f64> {
    let n = (periods * samples_per_period).max(1);
    let dt = rot.period() / samples_per_period.max(1) as f64;
    let spectra: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|k| odmr_spectrum_static(&rot.orientation(k as f64 * dt), b_lab, model, freqs))
        .collect();
    let mut avg = vec![0.0; freqs.len()];
    for s in &spectra {
        for (a, v) in avg.iter_mut().zip(s) {
            *a += v;
        }
    }
    avg.iter_mut().for_each(|a| *a /= n as f64);
    avg
}

/// Stroboscopic ODMR map: one static spectrum per delay.
#[derive(Debug, Clone, PartialEq)]
pub struct StroboMap {
    pub label: String,
    /// s.
    pub delays: Vec<f64>,
    /// Hz.
    pub freqs: Vec<f64>,
    /// `pl[i][j]` at `delays[i]`, `freqs[j]`.
    pub pl: Vec<Vec<f64>>,
    /// Pulse duration (s).
    pub tau: f64,
    /// T.
    pub b_lab: Vector3<f64>,
    pub omega_rot: f64,
    pub model: NvModel,
    pub seed: u64,
}

pub fn strobe_map(
    rot: &RotationModel,
    b_lab: &Vector3<f64>,
    model: &NvModel,
    delays: &[f64],
    freqs: &[f64],
    tau: f64,
    label: &str,
) -> Result<StroboMap, NvError> {
    let limit = 0.01 * rot.period();
    if !(tau >= 0.0 && tau <= limit) {
        return Err(NvError::PulseTooLong { tau, limit });
    }
    let pl = delays
        .par_iter()
        .map(|&dt| odmr_spectrum_static(&rot.orientation(dt), b_lab, model, freqs))
        .collect();
    Ok(StroboMap {
        label: label.into(),
        delays: delays.to_vec(),
        freqs: freqs.to_vec(),
        pl,
        tau,
        b_lab: *b_lab,
        omega_rot: rot.omega_rot,
        model: model.clone(),
        seed: 0,
    })
}

impl StroboMap {
    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega_rot.abs()
    }

    /// Multiplicative Gaussian noise `PL (1 + rel ε)`; each spectrum is then
    /// renormalised to its own maximum so PL stays in `(0, 1]`.
    pub fn with_pl_noise(mut self, rel: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for row in &mut self.pl {
            for v in row.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v = (*v * (1.0 + rel * e)).max(PL_FLOOR);
            }
            let max = row.iter().fold(PL_FLOOR, |m, &v| m.max(v));
            row.iter_mut().for_each(|v| *v = (*v / max).max(PL_FLOOR));
        }
        self.seed = seed;
        self
    }

    /// Header `delay_s,<f1>,<f2>,…` then one row per delay.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), NvError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let fmt = |e: csv::Error| NvError::Format(e.to_string());
        let mut header = vec!["delay_s".to_string()];
        header.extend(self.freqs.iter().map(|f| format!("{f:e}")));
        w.write_record(&header).map_err(fmt)?;
        for (dt, row) in self.delays.iter().zip(&self.pl) {
            let mut rec = vec![format!("{dt:e}")];
            rec.extend(row.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec).map_err(fmt)?;
        }
        w.flush().map_err(|e| NvError::Format(e.to_string()))
    }

    /// `key = value` metadata needed to interpret the map.
    pub fn sidecar(&self) -> String {
        let m = &self.model;
        let c = m.contrast.map(|c| format!("{c:e}")).join(", ");
        format!(
            "label = {}\nb_lab_t = {:e}, {:e}, {:e}\nomega_rot_rad_s = {:e}\ntau_s = {:e}\nnv.d_hz = {:e}\nnv.gamma_hz_per_t = {:e}\nnv.sigma_hz = {:e}\nnv.contrast = {}\nseed = {}\n",
            self.label, self.b_lab.x, self.b_lab.y, self.b_lab.z, self.omega_rot, self.tau, m.d, m.gamma_e, m.linewidth_sigma, c, self.seed
        )
    }

    /// Inverse of [`write_csv`](Self::write_csv) plus [`sidecar`](Self::sidecar).
    /// Class axes are the standard [111] set.
    pub fn read<R: Read>(csv_data: R, sidecar: &str) -> Result<Self, NvError> {
        let meta = parse_sidecar(sidecar)?;
        let num = |k: &str| -> Result<f64, NvError> {
            let v = meta.get(k).ok_or_else(|| NvError::Format(format!("sidecar lacks `{k}`")))?;
            v.parse().map_err(|_| NvError::Format(format!("sidecar `{k}`: cannot parse `{v}`")))
        };
        let list = |k: &str| -> Result<Vec<f64>, NvError> {
            let v = meta.get(k).ok_or_else(|| NvError::Format(format!("sidecar lacks `{k}`")))?;
            v.split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| NvError::Format(format!("sidecar `{k}`: cannot parse `{v}`")))
        };
        let b = list("b_lab_t")?;
        let contrast = list("nv.contrast")?;
        if b.len() != 3 || contrast.len() != 4 {
            return Err(NvError::Format("b_lab_t needs 3 values and nv.contrast 4".into()));
        }
        let model = NvModel {
            d: num("nv.d_hz")?,
            gamma_e: num("nv.gamma_hz_per_t")?,
            axes0: nv_axes(),
            linewidth_sigma: num("nv.sigma_hz")?,
            contrast: [contrast[0], contrast[1], contrast[2], contrast[3]],
        }
        .validate()?;

        let fmt = |e: csv::Error| NvError::Format(e.to_string());
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(csv_data);
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| NvError::Format(format!("bad number `{s}`")));
        let freqs = r.headers().map_err(fmt)?.iter().skip(1).map(parse).collect::<Result<Vec<_>, _>>()?;
        let (mut delays, mut pl) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec.map_err(fmt)?;
            let vals = rec.iter().map(parse).collect::<Result<Vec<_>, _>>()?;
            if vals.len() != freqs.len() + 1 {
                return Err(NvError::Format(format!("row with {} cells, expected {}", vals.len(), freqs.len() + 1)));
            }
            delays.push(vals[0]);
            pl.push(vals[1..].to_vec());
        }
        Ok(Self {
            label: meta.get("label").cloned().unwrap_or_default(),
            delays,
            freqs,
            pl,
            tau: num("tau_s")?,
            b_lab: Vector3::new(b[0], b[1], b[2]),
            omega_rot: num("omega_rot_rad_s")?,
            model,
            seed: meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0),
        })
    }
}

fn parse_sidecar(text: &str) -> Result<BTreeMap<String, String>, NvError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| NvError::Format(format!("sidecar line {}: expected `key = value`", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Uniform grid of `n` points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

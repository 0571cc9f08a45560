//! Synthetic detector signal and spectral analysis.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::Vector3;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use thiserror::Error;

use crate::rotor3d::Trajectory3D;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SignalError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

/// Map from the long-axis projection `c = axis · n3` to detected power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DetectionModel {
    /// `c²`: blind to `n3 → −n3`, like a shadow.
    #[default]
    Squared,
    /// `c`: distinguishes the two ends of the particle.
    Linear,
}

impl DetectionModel {
    pub fn apply(self, c: f64) -> f64 {
        match self {
            Self::Squared => c * c,
            Self::Linear => c,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Squared => "squared",
            Self::Linear => "linear",
        }
    }
}

impl std::str::FromStr for DetectionModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "squared" => Ok(Self::Squared),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown detector `{other}` (expected squared or linear)")),
        }
    }
}

/// `(axis · n3)²` for every sample: the squared projection of the long axis.
pub fn detection_signal(traj: &Trajectory3D, axis: &Vector3<f64>) -> Vec<f64> {
    detection_signal_with(traj, axis, DetectionModel::Squared)
}

pub fn detection_signal_with(traj: &Trajectory3D, axis: &Vector3<f64>, model: DetectionModel) -> Vec<f64> {
    let axis = axis.normalize();
    traj.states.iter().map(|s| model.apply(axis.dot(&s.orientation.body_axis(2)))).collect()
}

/// One-sided power spectral density.
#[derive(Debug, Clone, PartialEq)]
pub struct Psd {
    /// Bin frequencies (Hz), `0 ..= fs/2`.
    pub freq: Vec<f64>,
    /// Density (units²/Hz).
    pub power: Vec<f64>,
    /// Equivalent noise bandwidth of the window (Hz).
    pub rbw: f64,
    /// Bin spacing (Hz).
    pub df: f64,
}

impl Psd {
    /// `∫ PSD df`, which equals the mean square of the input.
    pub fn total_power(&self) -> f64 {
        self.power.iter().sum::<f64>() * self.df
    }

    pub fn power_db(&self) -> Vec<f64> {
        self.power.iter().map(|&p| 10.0 * p.max(f64::MIN_POSITIVE).log10()).collect()
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos()).collect()
}

/// Welch estimate with a periodic Hann window. `overlap` is the fraction of
/// a segment shared with the next one. The mean is not removed, so a DC
/// offset shows up in the zero bin.
pub fn psd(series: &[f64], sample_rate: f64, segment_length: usize, overlap: f64) -> Result<Psd, SignalError> {
    if segment_length < 2 || segment_length > series.len() {
        return Err(SignalError::InsufficientData(format!(
            "segment length {segment_length} with {} samples",
            series.len()
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(SignalError::InsufficientData(format!("overlap {overlap} outside [0, 1)")));
    }
    let n = segment_length;
    let hop = ((n as f64 * (1.0 - overlap)).round() as usize).max(1);
    let window = hann(n);
    let w2: f64 = window.iter().map(|w| w * w).sum();
    let w1: f64 = window.iter().sum();
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n);
    let bins = n / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut segments = 0usize;
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut start = 0;
    while start + n <= series.len() {
        for (k, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(series[start + k] * window[k], 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        segments += 1;
        start += hop;
    }
    let norm = 1.0 / (sample_rate * w2 * segments as f64);
    let power = acc
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let one_sided = if k == 0 || (n & 1 == 0 && k == n / 2) { 1.0 } else { 2.0 };
            p * norm * one_sided
        })
        .collect();
    let df = sample_rate / n as f64;
    Ok(Psd {
        freq: (0..bins).map(|k| k as f64 * df).collect(),
        power,
        rbw: sample_rate * w2 / (w1 * w1),
        df,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub freq: f64,
    pub power_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsdClassification {
    pub has_half_harmonic: bool,
    /// A peak within one resolution bandwidth of `Ω_d/2π`.
    pub has_drive_peak: bool,
    pub peaks: Vec<Peak>,
    pub floor_db: f64,
}

/// Local maxima at least `threshold_db` above the median level.
pub fn classify_psd(psd: &Psd, omega_d: f64, threshold_db: f64) -> PsdClassification {
    let db = psd.power_db();
    let mut sorted = db.clone();
    sorted.sort_by(f64::total_cmp);
    let floor_db = sorted[sorted.len() / 2];
    let mut peaks = Vec::new();
    for k in 1..db.len().saturating_sub(1) {
        if db[k] > db[k - 1] && db[k] >= db[k + 1] && db[k] - floor_db >= threshold_db {
            peaks.push(Peak { freq: psd.freq[k], power_db: db[k] });
        }
    }
    let f_drive = omega_d / (2.0 * PI);
    let near = |f: f64| peaks.iter().any(|p| (p.freq - f).abs() <= psd.rbw);
    PsdClassification { has_half_harmonic: near(0.5 * f_drive), has_drive_peak: near(f_drive), peaks, floor_db }
}

pub const DEFAULT_THRESHOLD_DB: f64 = 10.0;

/// Frequency of the strongest spectral component inside `band` (Hz), from a
/// Hann-windowed, zero-padded periodogram refined by parabolic
/// interpolation of the log power.
pub fn peak_frequency(series: &[f64], sample_rate: f64, band: (f64, f64)) -> Option<f64> {
    let n = series.len();
    if n < 8 {
        return None;
    }
    let padded = (4 * n).next_power_of_two();
    let window = hann(n);
    let mean = series.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = (0..padded)
        .map(|k| Complex::new(if k < n { (series[k] - mean) * window[k] } else { 0.0 }, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(padded).process(&mut buf);
    let df = sample_rate / padded as f64;
    let lo = ((band.0 / df).ceil() as usize).max(1);
    let hi = ((band.1 / df).floor() as usize).min(padded / 2 - 1);
    if lo > hi {
        return None;
    }
    let k = (lo..=hi).max_by(|&a, &b| buf[a].norm_sqr().total_cmp(&buf[b].norm_sqr()))?;
    let ln = |i: usize| buf[i].norm_sqr().max(f64::MIN_POSITIVE).ln();
    let (a, b, c) = (ln(k - 1), ln(k), ln(k + 1));
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    Some((k as f64 + shift.clamp(-0.5, 0.5)) * df)
}

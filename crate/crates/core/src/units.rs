//! Physical constants and the unit conversions applied at the I/O boundary.
//! Everything inside the crate is SI.

use std::f64::consts::PI;

/// Elementary charge (C), exact in SI.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// NV⁻ ground-state electron gyromagnetic ratio (Hz/T).
pub const NV_GYROMAGNETIC_RATIO: f64 = 28.024e9;

/// NV⁻ ground-state zero-field splitting (Hz).
pub const NV_ZERO_FIELD_SPLITTING: f64 = 2.87e9;

pub const MICRO: f64 = 1e-6;
pub const MILLI: f64 = 1e-3;

pub fn hz_to_rad_s(f: f64) -> f64 {
    2.0 * PI * f
}

pub fn rad_s_to_hz(w: f64) -> f64 {
    w / (2.0 * PI)
}

pub fn khz_to_rad_s(f: f64) -> f64 {
    hz_to_rad_s(f * 1e3)
}

pub fn um_to_m(x: f64) -> f64 {
    x * MICRO
}

pub fn mt_to_t(b: f64) -> f64 {
    b * MILLI
}

/// FWHM → standard deviation of a Gaussian line.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (8.0 * 2f64.ln()).sqrt()
}

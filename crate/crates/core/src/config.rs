//! Flat `key = value` configuration shared by every command.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Values are kept as strings and converted on access, so a snapshot can be
//! written back verbatim for run manifests.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{
    validate_trap, ModelError, QuadrupoleSource, RigidBody, SpheroidSpec, SurfaceCharge, TrapDrive,
};
use crate::units::{um_to_m, ELEMENTARY_CHARGE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Every key the tools understand.
pub const KNOWN_KEYS: &[&str] = &[
    "trap.v0_volts",
    "trap.freq_hz",
    "trap.ell0_um",
    "trap.ax",
    "trap.ay",
    "trap.az",
    "body.i1",
    "body.i2",
    "body.i3",
    "body.q1",
    "body.q2",
    "body.q3",
    "body.charge_c",
    "body.mass_kg",
    "body.spheroid.a_um",
    "body.spheroid.b_um",
    "body.spheroid.charges_e",
    "body.spheroid.density",
    "body.spheroid.quadrupole",
    "damping.gamma0_hz",
    "sim.alpha0_rad",
    "sim.alpha_dot0_rad_s",
    "sim.euler0_rad",
    "sim.omega0_body_rad_s",
    "sim.periods",
    "sim.samples_per_period",
    "sweep.v0_min_volts",
    "sweep.v0_max_volts",
    "sweep.v0_points",
    "sweep.f_min_hz",
    "sweep.f_max_hz",
    "nv.d_hz",
    "nv.gamma_hz_per_t",
    "nv.fwhm_hz",
    "nv.contrast",
    "rotation.axis",
    "rotation.freq_hz",
    "rotation.phase_rad",
    "rotation.r0_euler_rad",
    "field.b1_mt",
    "field.b2_mt",
    "odmr.f_min_hz",
    "odmr.f_max_hz",
    "odmr.points",
    "strobe.delays",
    "strobe.tau_s",
    "noise.line_sigma_hz",
    "noise.pl_relative",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected `key = value`, found `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line, message: "empty key".into() });
            }
            if !KNOWN_KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            }
            if config.values.insert(key.into(), value.into()).is_some() {
                return Err(ConfigError::Syntax { line, message: format!("duplicate key `{key}`") });
            }
        }
        Ok(config)
    }

    /// Applies a `key=value` override such as a `--set` flag.
    pub fn set_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            message: format!("override `{assignment}` is not `key=value`"),
        })?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey { line: 0, key: key.into() });
        }
        self.values.insert(key.into(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| ConfigError::BadValue { key: key.into(), value: v.into() }),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    pub fn require_f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.parse_value(key)?.ok_or_else(|| ConfigError::Missing(key.into()))
    }

    /// Comma-separated list of numbers.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(v) = self.get(key) else { return Ok(None) };
        v.split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|_| ConfigError::BadValue { key: key.into(), value: v.into() })
    }

    pub fn vec3(&self, key: &str) -> Result<Option<[f64; 3]>, ConfigError> {
        match self.f64_list(key)? {
            None => Ok(None),
            Some(v) if v.len() == 3 => Ok(Some([v[0], v[1], v[2]])),
            Some(_) => Err(ConfigError::BadValue { key: key.into(), value: self.get(key).unwrap().into() }),
        }
    }

    pub fn trap(&self) -> Result<TrapDrive, ConfigError> {
        let trap = TrapDrive {
            v0: self.require_f64("trap.v0_volts")?,
            omega_d: 2.0 * PI * self.require_f64("trap.freq_hz")?,
            ell0: um_to_m(self.require_f64("trap.ell0_um")?),
            a_x: self.require_f64("trap.ax")?,
            a_y: self.require_f64("trap.ay")?,
            a_z: self.require_f64("trap.az")?,
        };
        Ok(validate_trap(trap)?)
    }

    /// Builds the particle from either the spheroid keys or explicit
    /// inertia, quadrupole, charge and mass.
    pub fn body(&self) -> Result<RigidBody, ConfigError> {
        let gamma0 = 2.0 * PI * self.f64_or("damping.gamma0_hz", 0.0)?;
        if self.contains("body.spheroid.a_um") || self.contains("body.spheroid.b_um") {
            let spec = SpheroidSpec {
                a_minor: um_to_m(self.require_f64("body.spheroid.a_um")?),
                b_major: um_to_m(self.require_f64("body.spheroid.b_um")?),
                q_tot: self.require_f64("body.spheroid.charges_e")? * ELEMENTARY_CHARGE,
                density: self.require_f64("body.spheroid.density")?,
            };
            let source = match self.get("body.spheroid.quadrupole").unwrap_or("closed_form") {
                "closed_form" => QuadrupoleSource::ClosedForm,
                "uniform" => QuadrupoleSource::Surface(SurfaceCharge::Uniform),
                "equipotential" => QuadrupoleSource::Surface(SurfaceCharge::Equipotential),
                other => {
                    return Err(ConfigError::BadValue {
                        key: "body.spheroid.quadrupole".into(),
                        value: other.into(),
                    })
                }
            };
            return Ok(RigidBody::from_spheroid(&spec, gamma0, source)?);
        }
        let inertia = [
            self.require_f64("body.i1")?,
            self.require_f64("body.i2")?,
            self.require_f64("body.i3")?,
        ];
        let quadrupole = [
            self.require_f64("body.q1")?,
            self.require_f64("body.q2")?,
            self.require_f64("body.q3")?,
        ];
        Ok(RigidBody::new(
            inertia,
            quadrupole,
            self.require_f64("body.charge_c")?,
            self.require_f64("body.mass_kg")?,
            gamma0,
        )?)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

impl fmt::Display for Config {
    /// Sorted `key = value` lines; parses back to the same configuration.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// The reference rod and trap as a configuration text.
pub const REFERENCE_CONFIG: &str = "\
# silica rod in a 30 um trap
trap.v0_volts = 600
trap.freq_hz = 5000
trap.ell0_um = 30
trap.ax = -0.040
trap.ay = 0.063
trap.az = -0.023
body.spheroid.a_um = 4
body.spheroid.b_um = 15
body.spheroid.charges_e = 2500
body.spheroid.density = 2200
damping.gamma0_hz = 1000
";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;

    #[test]
    fn reference_config_matches_presets() {
        let cfg = Config::parse(REFERENCE_CONFIG).unwrap();
        let trap = cfg.trap().unwrap();
        let expected = presets::rod_trap(600.0, 2.0 * PI * 5000.0);
        assert!((trap.ell0 - expected.ell0).abs() < 1e-18);
        assert_eq!(trap.geometry(), expected.geometry());
        let body = cfg.body().unwrap();
        let reference = presets::rod_body();
        for k in 0..3 {
            assert!((body.inertia[k] - reference.inertia[k]).abs() <= 1e-12 * reference.inertia[k]);
            assert!((body.quadrupole[k] - reference.quadrupole[k]).abs() <= 1e-12 * reference.quadrupole[k].abs());
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = Config::parse("trap.ax = 1\n\n  nonsense\n").unwrap_err();
        assert_eq!(err, ConfigError::Syntax { line: 3, message: "expected `key = value`, found `nonsense`".into() });
        let err = Config::parse("# c\ntrap.bogus = 2").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey { line: 2, key: "trap.bogus".into() });
        let err = Config::parse("trap.ax = 1\ntrap.ax = 2").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }));
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut cfg = Config::parse(REFERENCE_CONFIG).unwrap();
        cfg.set_override("trap.v0_volts=900").unwrap();
        assert_eq!(cfg.trap().unwrap().v0, 900.0);
        assert!(cfg.set_override("trap.nothing=1").is_err());
    }

    #[test]
    fn display_round_trips() {
        let cfg = Config::parse(REFERENCE_CONFIG).unwrap();
        assert_eq!(Config::parse(&cfg.to_string()).unwrap(), cfg);
    }

    #[test]
    fn invalid_trap_is_reported() {
        let mut cfg = Config::parse(REFERENCE_CONFIG).unwrap();
        cfg.set("trap.az", "0.1").unwrap();
        assert!(matches!(cfg.trap(), Err(ConfigError::Model(_))));
        cfg.set("trap.az", "x").unwrap();
        assert!(matches!(cfg.trap(), Err(ConfigError::BadValue { .. })));
    }
}

//! ODMR, stroboscopic map and reconstruction commands.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rotortrap::config::Config;
use rotortrap::nvspin::{
    linspace, odmr_continuous_rotating, odmr_spectrum_static, strobe_map, NvModel, RotationModel, StroboMap,
    DEFAULT_CONTRAST, DEFAULT_FWHM,
};
use rotortrap::reconstruct::{extract_resonances, fit_rotation, matched_lines, FitOptions, ResonanceTraces};
use rotortrap::rotor3d::Orientation;
use rotortrap::units::mt_to_t;

use crate::output::{csv_bytes, num, read_input, CliError, CliResult, Family, Outputs, Report, RunManifest};
use crate::{Common, FitArgs};

const DEFAULT_AXIS: [f64; 3] = [0.35, -0.25, 0.9];
const DEFAULT_EULER: [f64; 3] = [0.9, 0.7, -1.4];

fn nv_model(config: &Config) -> CliResult<NvModel> {
    let d = NvModel::default();
    Ok(NvModel::new(
        config.f64_or("nv.d_hz", d.d)?,
        config.f64_or("nv.gamma_hz_per_t", d.gamma_e)?,
        config.f64_or("nv.fwhm_hz", DEFAULT_FWHM)?,
        config.f64_or("nv.contrast", DEFAULT_CONTRAST)?,
    )?)
}

/// Rotation at `rotation.freq_hz`, or half the drive frequency when unset.
fn rotation(config: &Config) -> CliResult<RotationModel> {
    let axis = config.vec3("rotation.axis")?.unwrap_or(DEFAULT_AXIS);
    let f = match config.parse_value::<f64>("rotation.freq_hz")? {
        Some(f) => f,
        None => 0.5 * config.require_f64("trap.freq_hz")?,
    };
    if !(f > 0.0) {
        return Err(CliError::config("rotation frequency must be positive"));
    }
    let [a, b, g] = config.vec3("rotation.r0_euler_rad")?.unwrap_or(DEFAULT_EULER);
    let rot = RotationModel::new(Vector3::from(axis), 2.0 * PI * f, Orientation::from_euler(a, b, g))?;
    Ok(rot.with_phase(config.f64_or("rotation.phase_rad", 0.0)?))
}

fn field(config: &Config, key: &str, default: [f64; 3]) -> CliResult<Vector3<f64>> {
    Ok(Vector3::from(config.vec3(key)?.unwrap_or(default)).map(mt_to_t))
}

fn freq_grid(config: &Config) -> CliResult<Vec<f64>> {
    let lo = config.f64_or("odmr.f_min_hz", 2.5e9)?;
    let hi = config.f64_or("odmr.f_max_hz", 3.25e9)?;
    let n = config.f64_or("odmr.points", 1501.0)?;
    if !(lo > 0.0 && hi > lo && n >= 2.0 && n.fract() == 0.0) {
        return Err(CliError::config("odmr range must be ascending with at least two integer points"));
    }
    Ok(linspace(lo, hi, n as usize))
}

pub fn odmr(common: &Common) -> CliResult<()> {
    let config = common.load_config()?;
    let model = nv_model(&config)?;
    let rot = rotation(&config)?;
    let b = field(&config, "field.b1_mt", [10.0, 0.0, 0.0])?;
    let freqs = freq_grid(&config)?;
    let rotating = odmr_continuous_rotating(&rot, &b, &model, &freqs);
    let fixed = odmr_spectrum_static(&rot.orientation(0.0), &b, &model, &freqs);

    let rows = (0..freqs.len()).map(|k| vec![num(freqs[k]), num(rotating[k]), num(fixed[k])]);
    let mut out = Outputs::new(&common.out);
    out.add("odmr.csv", csv_bytes(&["f_hz", "pl_rotating", "pl_static_t0"], rows)?);
    let mut manifest = RunManifest::new("odmr", config, common.seed);
    out.write(&mut manifest)
}

pub fn strobe(common: &Common) -> CliResult<()> {
    let config = common.load_config()?;
    let model = nv_model(&config)?;
    let rot = rotation(&config)?;
    let b1 = field(&config, "field.b1_mt", [10.0, 0.0, 0.0])?;
    let b2 = field(&config, "field.b2_mt", [0.0, 10.0, 0.0])?;
    let freqs = freq_grid(&config)?;
    let n = config.f64_or("strobe.delays", 48.0)?;
    if !(n >= 1.0 && n.fract() == 0.0) {
        return Err(CliError::config("`strobe.delays` must be a positive integer"));
    }
    let delays: Vec<f64> = (0..n as usize).map(|k| k as f64 * rot.period() / n).collect();
    let tau = config.f64_or("strobe.tau_s", 1e-7)?;
    let noise = config.f64_or("noise.pl_relative", 0.0)?;
    if !(noise >= 0.0) {
        return Err(CliError::config("`noise.pl_relative` must be non-negative"));
    }

    let mut out = Outputs::new(&common.out);
    for (label, b, seed) in [("b1", b1, common.seed), ("b2", b2, common.seed.wrapping_add(1))] {
        let mut map = strobe_map(&rot, &b, &model, &delays, &freqs, tau, label)?;
        if noise > 0.0 {
            map = map.with_pl_noise(noise, seed);
        }
        let mut csv = Vec::new();
        map.write_csv(&mut csv)?;
        out.add(&format!("strobe_{label}.csv"), csv);
        out.add(&format!("strobe_{label}.sidecar"), map.sidecar().into_bytes());
    }
    let o = rot.orientation0.euler();
    let mut r = Report::new();
    r.put("axis", vec3(&rot.axis))
        .put("omega_rot_rad_s", num(rot.omega_rot))
        .put("phase_rad", num(rot.phase))
        .put("r0_euler_rad", format!("{}, {}, {}", num(o.0), num(o.1), num(o.2)));
    out.add("strobe_truth.txt", r.into_bytes());
    let mut manifest = RunManifest::new("strobe", config, common.seed);
    out.write(&mut manifest)
}

fn vec3(v: &Vector3<f64>) -> String {
    format!("{}, {}, {}", num(v.x), num(v.y), num(v.z))
}

fn load_map(path: &Path, manifest: &mut RunManifest) -> CliResult<StroboMap> {
    let csv = read_input(path, manifest)?;
    let side_path = path.with_extension("sidecar");
    let side = read_input(&side_path, manifest)?;
    let side = String::from_utf8(side).map_err(|e| CliError::new(Family::Config, e))?;
    StroboMap::read(csv.as_slice(), &side).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn fit(common: &Common, args: &FitArgs) -> CliResult<()> {
    let config = common.load_config()?;
    let line_sigma = config.f64_or("noise.line_sigma_hz", 0.0)?;
    if !(line_sigma >= 0.0) {
        return Err(CliError::config("`noise.line_sigma_hz` must be non-negative"));
    }
    if args.lines == 0 || args.starts == 0 {
        return Err(CliError::config("--lines and --starts must be positive"));
    }
    let mut manifest = RunManifest::new("fit", config, common.seed);
    let map1 = load_map(&args.map1, &mut manifest)?;
    let map2 = args.map2.as_ref().map(|p| load_map(p, &mut manifest)).transpose()?;

    let traces = |map: &StroboMap, seed: u64| -> CliResult<ResonanceTraces> {
        let t = extract_resonances(map, args.lines)?;
        Ok(if line_sigma > 0.0 { t.with_center_noise(line_sigma, seed) } else { t })
    };
    let t1 = traces(&map1, common.seed)?;
    let (t2, b2) = match &map2 {
        Some(m) => (traces(m, common.seed.wrapping_add(1))?, m.b_lab),
        None => (ResonanceTraces::empty(), Vector3::zeros()),
    };
    let model = map1.model;
    let opts = FitOptions { starts: args.starts, ..FitOptions::default() };
    let fit = fit_rotation(&t1, &map1.b_lab, &t2, &b2, &model, map1.omega_rot, &opts)?;

    let mut rows = Vec::new();
    let mut fields = vec![("b1", &t1, map1.b_lab)];
    if map2.is_some() {
        fields.push(("b2", &t2, b2));
    }
    for (label, t, b) in fields {
        for (delay, measured, sigma, fitted) in matched_lines(&fit.rotation, t, &b, &model) {
            rows.push(vec![label.to_string(), num(delay), num(measured), num(sigma), num(fitted)]);
        }
    }
    let mut out = Outputs::new(&common.out);
    out.add("fit_lines.csv", csv_bytes(&["field", "delay_s", "measured_hz", "sigma_hz", "fitted_hz"], rows)?);

    let o = fit.orientation0.euler();
    let mut r = Report::new();
    r.put("axis", vec3(&fit.axis))
        .put("axis_polar_rad", num(fit.axis_polar))
        .put("axis_azimuth_rad", num(fit.axis_azimuth))
        .put("phase_rad", num(fit.phase))
        .put("r0_euler_rad", format!("{}, {}, {}", num(o.0), num(o.1), num(o.2)));
    if let Some(m) = &fit.mirror {
        r.put("mirror_axis", vec3(&m.axis));
    }
    r.put("residual_rms_hz", num(fit.residual_rms))
        .put("chi2", num(fit.chi2))
        .put("n_residuals", fit.n_residuals)
        .put("covariance_diagonal", fit.covariance.diagonal().iter().map(|&v| num(v)).collect::<Vec<_>>().join(", "))
        .put(
            "information_eigenvalues",
            fit.information_eigenvalues.iter().map(|&v| num(v)).collect::<Vec<_>>().join(", "),
        )
        .put("unconstrained_modes", fit.unconstrained_modes.len());
    for (k, m) in fit.unconstrained_modes.iter().enumerate() {
        r.put(&format!("unconstrained_mode.{k}"), m.iter().map(|&v| num(v)).collect::<Vec<_>>().join(", "));
    }
    if map2.is_none() {
        let free = fit.rotation_about(&map1.b_lab);
        r.put("rotation_about_b1", free.iter().map(|&v| num(v)).collect::<Vec<_>>().join(", "));
    }
    r.put("start_index", fit.start_index).put("iterations", fit.iterations).put("converged_starts", fit.converged_starts);
    out.add("fit_report.txt", r.into_bytes());
    out.write(&mut manifest)
}

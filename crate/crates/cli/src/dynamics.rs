//! Pendulum, phase-diagram, rigid-body and spectrum commands.

use std::f64::consts::PI;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rotortrap::config::Config;
use rotortrap::floquet::stability_grid;
use rotortrap::model::{pendulum_omega0, RigidBody, TrapDrive};
use rotortrap::rotor1d::{
    classify_regime, corotating_fixed_point, integrate_pendulum, omega_max, phase_diagram as sweep_grid, OmegaMax,
    Pendulum, PendulumState, SweepOptions,
};
use rotortrap::rotor3d::{
    equilibria, integrate_rigid, libration_frequencies, rotating_frame_frequencies, rotating_frame_normal_modes,
    BodyState, Orientation, Trajectory3D,
};
use rotortrap::signal::{classify_psd, detection_signal_with, psd as welch};

use crate::output::{csv_bytes, num, opt_num, read_input, CliError, CliResult, Family, Outputs, Report, RunManifest};
use crate::{Common, PsdArgs};

/// Drive-frequency samples per voltage in the Floquet stability grid.
const FLOQUET_POINTS: usize = 64;

fn hz(w: f64) -> f64 {
    w / (2.0 * PI)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

fn count(config: &Config, key: &str, default: usize) -> CliResult<usize> {
    let v = config.f64_or(key, default as f64)?;
    if !(v >= 1.0 && v.fract() == 0.0 && v < 1e9) {
        return Err(CliError::config(format!("`{key}` must be a positive integer, got {v}")));
    }
    Ok(v as usize)
}

/// Time span and sampling of a simulation from `sim.periods` and
/// `sim.samples_per_period`.
fn span(config: &Config, trap: &TrapDrive) -> CliResult<(f64, f64)> {
    let periods = config.f64_or("sim.periods", 200.0)?;
    if !(periods > 0.0) {
        return Err(CliError::config("`sim.periods` must be positive"));
    }
    let spp = count(config, "sim.samples_per_period", 200)?;
    if spp < 200 {
        return Err(CliError::config("`sim.samples_per_period` must be at least 200"));
    }
    Ok((periods * trap.period(), trap.period() / spp as f64))
}

fn model(config: &Config) -> CliResult<(TrapDrive, RigidBody)> {
    Ok((config.trap()?, config.body()?))
}

pub fn simulate_pendulum(common: &Common) -> CliResult<()> {
    let config = common.load_config()?;
    let (trap, body) = model(&config)?;
    let default = PendulumState::librating(trap.omega_d);
    let state0 = PendulumState::new(
        config.f64_or("sim.alpha0_rad", default.alpha)?,
        config.f64_or("sim.alpha_dot0_rad_s", default.alpha_dot)?,
    );
    let (t_end, dt) = span(&config, &trap)?;
    let traj = integrate_pendulum(&trap, &body, state0, t_end, dt)?;
    let label = classify_regime(&trap, &body, state0)?;

    let rows = traj.states.iter().map(|s| vec![num(s.t), num(s.alpha), num(s.alpha_dot)]);
    let mut out = Outputs::new(&common.out);
    out.add("trajectory.csv", csv_bytes(&["t_s", "alpha_rad", "alpha_dot_rad_s"], rows)?);

    let w0 = pendulum_omega0(&trap, &body);
    let p = Pendulum::new(&trap, &body);
    let mut r = Report::new();
    r.put("regime", label.regime.as_str())
        .put("eta_rot", num(label.eta))
        .put("omega0_rad_s", num(w0.omega0))
        .put("equilibria_swapped", w0.equilibria_swapped)
        .put(
            "omega_max_rad_s",
            match omega_max(w0.omega0, body.gamma0) {
                OmegaMax::Finite(w) => num(w),
                OmegaMax::Unbounded => "inf".into(),
            },
        )
        .put("corotating_fixed_point_rad", opt_num(corotating_fixed_point(&p)));
    out.add("regime_report.txt", r.into_bytes());

    let mut manifest = RunManifest::new("simulate-pendulum", config, common.seed);
    out.write(&mut manifest)
}

pub fn phase_diagram(common: &Common) -> CliResult<()> {
    let config = common.load_config()?;
    let (trap, body) = model(&config)?;
    let v_lo = config.f64_or("sweep.v0_min_volts", 400.0)?;
    let v_hi = config.f64_or("sweep.v0_max_volts", 2000.0)?;
    let n = count(&config, "sweep.v0_points", 10)?;
    let f_lo = config.f64_or("sweep.f_min_hz", 1e3)?;
    let f_hi = config.f64_or("sweep.f_max_hz", 25e3)?;
    if !(v_lo > 0.0 && v_hi >= v_lo && f_lo > 0.0 && f_hi > f_lo) {
        return Err(CliError::config("sweep ranges must be positive and ascending"));
    }
    let grid = linspace(v_lo, v_hi, n);
    let range = (2.0 * PI * f_lo, 2.0 * PI * f_hi);
    let diagram = sweep_grid(&trap, &body, &grid, range, SweepOptions::default());
    if diagram.errors.iter().all(Option::is_some) {
        let first = diagram.errors[0].clone().unwrap_or_default();
        return Err(CliError::new(Family::Numerical, anyhow::anyhow!("every sweep failed; first: {first}")));
    }

    let rows = (0..diagram.len()).map(|k| {
        vec![
            num(diagram.v0_grid[k]),
            opt_num(diagram.omega_lr[k].map(hz)),
            opt_num(diagram.omega_rl[k].map(hz)),
            opt_num(diagram.instability_boundary[k].map(hz)),
        ]
    });
    let mut out = Outputs::new(&common.out);
    out.add("phase_diagram.csv", csv_bytes(&["v0_volts", "f_lr_hz", "f_rl_hz", "f_floquet_hz"], rows)?);

    let omegas: Vec<f64> = linspace(range.0, range.1, FLOQUET_POINTS);
    let reference = Pendulum::new(&trap.with_voltage(grid[0]), &body);
    let cells = stability_grid(&reference, grid[0], &grid, &omegas)?;
    let rows = cells.iter().map(|&(v, w, stable)| vec![num(v), num(hz(w)), stable.to_string()]);
    out.add("floquet_grid.csv", csv_bytes(&["v0_volts", "f_hz", "stable_bool"], rows)?);

    let mut r = Report::new();
    for (k, e) in diagram.errors.iter().enumerate() {
        if let Some(e) = e {
            r.put(&format!("error.v0_{}", num(diagram.v0_grid[k])), e);
        }
    }
    for &v in &grid {
        let w0 = pendulum_omega0(&trap.with_voltage(v), &body).omega0;
        if let OmegaMax::Finite(w) = omega_max(w0, body.gamma0) {
            r.put(&format!("f_max_hz.v0_{}", num(v)), num(hz(w)));
        }
    }
    out.add("phase_report.txt", r.into_bytes());

    let mut manifest = RunManifest::new("phase-diagram", config, common.seed);
    out.write(&mut manifest)
}

pub fn simulate_3d(common: &Common) -> CliResult<()> {
    let config = common.load_config()?;
    let (trap, body) = model(&config)?;
    let [a, b, g] = config.vec3("sim.euler0_rad")?.unwrap_or([0.02, PI / 2.0 + 0.02, 0.02]);
    let w = config.vec3("sim.omega0_body_rad_s")?.unwrap_or([0.0; 3]);
    let state0 = BodyState { omega_body: Vector3::from(w), ..BodyState::at_rest(Orientation::from_euler(a, b, g)) };
    let (t_end, dt) = span(&config, &trap)?;
    let traj = integrate_rigid(&trap, &body, state0, t_end, dt)?;

    let rows = traj.states.iter().map(|s| {
        let q = s.orientation.0.quaternion();
        let (al, be, ga) = s.orientation.euler();
        [s.t, q.w, q.i, q.j, q.k, al, be, ga, s.omega_body.x, s.omega_body.y, s.omega_body.z]
            .iter()
            .map(|&v| num(v))
            .collect()
    });
    let header =
        ["t_s", "qw", "qx", "qy", "qz", "alpha_rad", "beta_rad", "gamma_rad", "w1_rad_s", "w2_rad_s", "w3_rad_s"];
    let mut out = Outputs::new(&common.out);
    out.add("trajectory_3d.csv", csv_bytes(&header, rows)?);

    let lib = libration_frequencies(&trap, &body);
    let rot = rotating_frame_frequencies(&trap, &body, trap.omega_d);
    let modes = rotating_frame_normal_modes(&trap, &body, trap.omega_d);
    let mut r = Report::new();
    r.put("libration.f_alpha_hz", num(hz(lib.omega_alpha)))
        .put("libration.f_beta_hz", num(hz(lib.omega_beta)))
        .put("libration.f_gamma_hz", num(hz(lib.omega_gamma)))
        .put("libration.secular_parameter", num(lib.secular_parameter))
        .put("libration.valid", lib.valid)
        .put("rotating.alpha_equilibrium_rad", num(rot.alpha_equilibrium))
        .put("rotating.f_alpha_hz", opt_num(rot.w_alpha.map(hz)))
        .put("rotating.f_beta_hz", opt_num(rot.w_beta.map(hz)))
        .put("rotating.f_gamma_hz", opt_num(rot.w_gamma.map(hz)))
        .put("normal_modes.f_alpha_hz", opt_num(modes.w_alpha.map(hz)))
        .put("normal_modes.f_low_hz", opt_num(modes.w_low.map(hz)))
        .put("normal_modes.f_high_hz", opt_num(modes.w_high.map(hz)));
    if let Ok(set) = equilibria(&trap, &body) {
        for (k, e) in set.entries.iter().enumerate() {
            let axes = e.lab_axis.map(|i| ["x", "y", "z"][i]).join("");
            r.put(&format!("equilibrium.{k}.body_axes_along"), axes).put(&format!("equilibrium.{k}.stable"), e.stable);
        }
    }
    out.add("secular_report.txt", r.into_bytes());

    let mut manifest = RunManifest::new("simulate-3d", config, common.seed);
    out.write(&mut manifest)
}

fn read_trajectory(bytes: &[u8]) -> CliResult<Trajectory3D> {
    let bad = |m: String| CliError::new(Family::Config, anyhow::anyhow!("trajectory file: {m}"));
    let mut rd = csv::Reader::from_reader(bytes);
    let header = rd.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| bad(format!("missing column `{name}`")));
    let idx = [col("t_s")?, col("qw")?, col("qx")?, col("qy")?, col("qz")?];
    let mut states = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let mut v = [0.0; 5];
        for (slot, &i) in v.iter_mut().zip(&idx) {
            let cell = rec.get(i).unwrap_or("");
            *slot = cell.parse().map_err(|_| bad(format!("row {}: cannot parse `{cell}`", line + 2)))?;
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(v[1], v[2], v[3], v[4]));
        states.push(BodyState { t: v[0], ..BodyState::at_rest(Orientation(q)) });
    }
    if states.len() < 2 {
        return Err(bad("fewer than two samples".into()));
    }
    Ok(Trajectory3D { states })
}

pub fn psd(common: &Common, args: &PsdArgs) -> CliResult<()> {
    let config = common.load_config()?;
    let mut manifest = RunManifest::new("psd", config.clone(), common.seed);
    let omega_d = 2.0 * PI * config.require_f64("trap.freq_hz")?;
    let axis: Vec<f64> = args.axis.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>().map_err(|_| {
        CliError::config(format!("--axis `{}` is not `x,y,z`", args.axis))
    })?;
    if axis.len() != 3 || axis.iter().all(|&v| v == 0.0) {
        return Err(CliError::config(format!("--axis `{}` is not a nonzero `x,y,z`", args.axis)));
    }
    if !(0.0..1.0).contains(&args.overlap) || args.segments == 0 {
        return Err(CliError::config("--psd-segments must be positive and --psd-overlap in [0, 1)"));
    }

    let bytes = read_input(&args.trajectory, &mut manifest)?;
    let traj = read_trajectory(&bytes)?;
    let n = traj.states.len();
    let fs = (n - 1) as f64 / (traj.states[n - 1].t - traj.states[0].t);
    let series = detection_signal_with(&traj, &Vector3::new(axis[0], axis[1], axis[2]), args.detector);
    let segment = (n as f64 / (1.0 + (args.segments - 1) as f64 * (1.0 - args.overlap))).floor() as usize;
    let spectrum = welch(&series, fs, segment, args.overlap)?;
    let class = classify_psd(&spectrum, omega_d, args.threshold_db);

    let mut out = Outputs::new(&common.out);
    let rows = spectrum.freq.iter().zip(spectrum.power_db()).map(|(&f, p)| vec![num(f), num(p)]);
    out.add("psd.csv", csv_bytes(&["f_hz", "power_db"], rows)?);

    let mean_square = series.iter().map(|x| x * x).sum::<f64>() / n as f64;
    let mut r = Report::new();
    r.put("detector", args.detector.as_str())
        .put("axis", &args.axis)
        .put("sample_rate_hz", num(fs))
        .put("segment_length", segment)
        .put("rbw_hz", num(spectrum.rbw))
        .put("has_half_harmonic", class.has_half_harmonic)
        .put("has_drive_peak", class.has_drive_peak)
        .put("floor_db", num(class.floor_db))
        .put("parseval_ratio", num(spectrum.total_power() / mean_square));
    for (k, p) in class.peaks.iter().enumerate() {
        r.put(&format!("peak.{k}"), format!("{}, {}", num(p.freq), num(p.power_db)));
    }
    out.add("psd_report.txt", r.into_bytes());
    out.write(&mut manifest)
}

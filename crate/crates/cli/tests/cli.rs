use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rotortrap::model::presets;
use rotortrap::rotor1d::{sweep_hysteresis, SweepOptions};

fn dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&d);
    d
}

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rotortrap"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("ROTORTRAP_JOBS")
        .output()
        .unwrap()
}

/// `key = value` report lines.
fn report(path: &Path) -> Vec<(String, String)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn value<'a>(lines: &'a [(String, String)], key: &str) -> &'a str {
    &lines.iter().find(|(k, _)| k == key).unwrap_or_else(|| panic!("missing {key}")).1
}

fn vec3(s: &str) -> [f64; 3] {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse().unwrap()).collect();
    [v[0], v[1], v[2]]
}

fn angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let n = |v: [f64; 3]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (n(a) * n(b))).clamp(-1.0, 1.0).acos()
}

#[test]
fn one_point_phase_diagram_matches_the_library_sweep() {
    let out = dir("phase");
    let o = run(&out, &["phase-diagram", "--set", "sweep.v0_min_volts=800", "--set", "sweep.v0_max_volts=800", "--set", "sweep.v0_points=1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("phase_diagram.csv")).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next(), Some("v0_volts,f_lr_hz,f_rl_hz,f_floquet_hz"));
    let cells: Vec<&str> = rows.next().unwrap().split(',').collect();
    let trap = presets::rod_trap(800.0, 2.0 * PI * 5e3);
    let h = sweep_hysteresis(&trap, &presets::rod_body(), 800.0, (2.0 * PI * 1e3, 2.0 * PI * 25e3), SweepOptions::default())
        .unwrap();
    let f_lr: f64 = cells[1].parse().unwrap();
    let f_rl: f64 = cells[2].parse().unwrap();
    assert!((f_lr - h.omega_lr / (2.0 * PI)).abs() <= 1e-9 * f_lr);
    assert!((f_rl - h.omega_rl / (2.0 * PI)).abs() <= 1e-9 * f_rl);
    assert!(out.join("floquet_grid.csv").exists());
}

#[test]
fn strobe_then_fit_recovers_the_axis_up_to_the_mirror() {
    let out = dir("fit");
    let o = run(&out, &["strobe", "--set", "strobe.delays=32"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (m1, m2) = (out.join("strobe_b1.csv"), out.join("strobe_b2.csv"));
    let o = run(&out, &["fit", "--map1", m1.to_str().unwrap(), "--map2", m2.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let truth = vec3(value(&report(&out.join("strobe_truth.txt")), "axis"));
    let fit = report(&out.join("fit_report.txt"));
    let err = angle(vec3(value(&fit, "axis")), truth).min(angle(vec3(value(&fit, "mirror_axis")), truth));
    assert!(err < 1e-3, "axis error {err}");
    assert_eq!(value(&fit, "unconstrained_modes"), "0");

    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("command = fit\n"));
    assert!(manifest.contains("input.strobe_b1.csv = ") && manifest.contains("input.strobe_b2.sidecar = "));
    assert!(manifest.contains("output.fit_report.txt = "));
}

#[test]
fn configuration_errors_exit_with_two() {
    let out = dir("config");
    let o = run(&out, &["odmr", "--set", "trap.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("manifest.txt").exists());

    fs::create_dir_all(&out).unwrap();
    let bad = out.join("bad.cfg");
    fs::write(&bad, "this line has no equals sign\n").unwrap();
    let o = run(&out, &["simulate-pendulum", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_exits_with_one() {
    let out = dir("io");
    let o = run(&out, &["psd", "--trajectory", "/nonexistent/trajectory_3d.csv"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pendulum_run_labels_its_regime() {
    let out = dir("pendulum");
    let o = run(&out, &["simulate-pendulum", "--set", "sim.periods=20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out.join("regime_report.txt"));
    assert!(["librating", "locked+", "locked-", "unclassified"]
        .contains(&value(&r, "regime")));
    let text = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("t_s,alpha_rad,alpha_dot_rad_s"));
    assert_eq!(text.lines().count(), 1 + 20 * 200 + 1);
}

use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use rotortrap::model::{presets, RigidBody};
use rotortrap::ode::Dopri5;
use rotortrap::rotor1d::{classify_regime, integrate_pendulum, sweep_hysteresis, PendulumState, Regime, SweepOptions};
use rotortrap::rotor3d::{integrate_rigid, potential_energy, propagate, torque, BodyState, Orientation, RigidRotor};

fn asymmetric() -> RigidBody {
    RigidBody::new([3e-24, 2.5e-24, 1e-24], [-1e-26, -0.6e-26, 1.6e-26], 4e-16, 2.8e-13, 0.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn torque_is_minus_the_potential_gradient(
        a in 0.0..2.0 * PI, b in 0.05..PI - 0.05, g in 0.0..2.0 * PI, phase in 0.0..1.0f64,
    ) {
        let trap = presets::rod_trap(600.0, 2.0 * PI * 5e3);
        let body = asymmetric();
        let o = Orientation::from_euler(a, b, g);
        let t = phase * trap.period();
        let n = torque(&o, &trap, &body, t);
        let h = 1e-4;
        let mut fd = Vector3::zeros();
        for k in 0..3 {
            let turn = |s: f64| Orientation(UnitQuaternion::from_axis_angle(&Vector3::ith_axis(k), s) * o.0);
            fd[k] = -(potential_energy(&turn(h), &trap, &body, t) - potential_energy(&turn(-h), &trap, &body, t)) / (2.0 * h);
        }
        prop_assert!((n - fd).norm() <= 1e-6 * n.norm().max(1e-40));
    }
}

#[test]
fn free_body_conserves_momentum_and_energy() {
    let trap = presets::rod_trap(600.0, 2.0 * PI * 5e3);
    let body = asymmetric();
    let sys = RigidRotor { static_voltage: Some(0.0), ..RigidRotor::new(trap, body) };
    let s0 = BodyState {
        omega_body: Vector3::new(300.0, -200.0, 500.0),
        ..BodyState::at_rest(Orientation::from_euler(0.3, 1.1, -0.4))
    };
    let s1 = propagate(&sys, &Dopri5::with_tolerance(1e-13, 1e-15), s0, 500.0 * trap.period()).unwrap();
    let (l0, l1) = (s0.angular_momentum(&body), s1.angular_momentum(&body));
    assert!((l1 - l0).norm() / l0.norm() < 1e-10);
    let (e0, e1) = (sys.total_energy(&s0), sys.total_energy(&s1));
    assert!((e1 - e0).abs() / e0 < 1e-10);
}

#[test]
fn planar_rod_follows_the_pendulum() {
    let trap = presets::rod_trap(600.0, 2.0 * PI * 5e3);
    let rod = presets::rod_body();
    let (t_end, dt) = (5.0 * trap.period(), trap.period() / 200.0);
    let s3 = BodyState::at_rest(Orientation::from_euler(0.3, PI / 2.0, 0.0));
    let t3 = integrate_rigid(&trap, &rod, s3, t_end, dt).unwrap();
    let t1 = integrate_pendulum(&trap, &rod, PendulumState::new(0.3, 0.0), t_end, dt).unwrap();
    assert_eq!(t3.states.len(), t1.states.len());
    for (x, y) in t3.states.iter().zip(&t1.states) {
        assert!((x.orientation.euler().0 - y.alpha).abs() < 1e-6);
    }
}

#[test]
fn locked_rotation_repeats_every_two_drive_periods() {
    let body = presets::rod_body();
    let trap = presets::rod_trap(600.0, 2.0 * PI * 3e3);
    let s0 = PendulumState::rotating(trap.omega_d, 1.0);
    let label = classify_regime(&trap, &body, s0).unwrap();
    assert_eq!(label.regime, Regime::RotationLockedPositive);
    let spp = 200;
    let traj = integrate_pendulum(&trap, &body, s0, 120.0 * trap.period(), trap.period() / spp as f64).unwrap();
    let a: Vec<f64> = traj.states.iter().map(|s| s.alpha).collect();
    let lag = 2 * spp;
    for k in 100 * spp..a.len() - lag {
        assert!((a[k + lag] - a[k] - 2.0 * PI).abs() < 1e-3);
    }
}

#[test]
fn hysteresis_loop_opens_downwards() {
    let body = presets::rod_body();
    let trap = presets::rod_trap(800.0, 2.0 * PI * 5e3);
    let h = sweep_hysteresis(&trap, &body, 800.0, (2.0 * PI * 1e3, 2.0 * PI * 25e3), SweepOptions::default()).unwrap();
    assert!(h.omega_lr > 0.0 && h.omega_rl >= h.omega_lr);
}

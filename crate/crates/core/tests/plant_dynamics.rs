use nalgebra::{Matrix4, Vector4};
use proptest::prelude::*;

use comid::kinematics::{balanced_pose, ChainGeometry, Pose};
use comid::mass::make_default_truth;
use comid::metalearn::generate_pool;
use comid::plant::{aggregate, WipPlant, WipState, GRAVITY};

fn default_plant(pose: &Pose) -> WipPlant {
    let geom = ChainGeometry::default_seven_link();
    let truth = make_default_truth(&geom).unwrap();
    WipPlant::new(aggregate(&geom, pose, &truth).unwrap(), *geom.wheel()).unwrap()
}

fn simulate(plant: &WipPlant, start: WipState, dt: f64, duration: f64) -> WipState {
    let steps = (duration / dt).round() as usize;
    (0..steps).fold(start, |s, _| plant.step(&s, 0.0, 0.0, dt).unwrap())
}

#[test]
fn balanced_pose_has_no_gravity_torque() {
    let geom = ChainGeometry::default_seven_link();
    let truth = make_default_truth(&geom).unwrap();
    let pool = generate_pool(&geom, &truth, 50, 17).unwrap();
    for i in 0..pool.len() {
        let pose = balanced_pose(&geom, &pool.pose(i), &truth).unwrap();
        let body = aggregate(&geom, &pose, &truth).unwrap();
        let torque = body.mass * GRAVITY * body.com_distance * body.balance_offset.sin();
        assert!(torque.abs() < 1e-9, "pose {i}: gravity torque {torque:e} N·m");

        let plant = WipPlant::new(body, *geom.wheel()).unwrap();
        let rest = WipState::new(0.0, 0.0, body.balance_offset, 0.0);
        let d = plant.dynamics(&rest, 0.0, 0.0).unwrap();
        assert!(d.x_dot.abs() < 1e-9 && d.theta_dot.abs() < 1e-9);
    }
}

#[test]
fn rk4_is_fourth_order() {
    let plant = default_plant(&Pose::new(vec![0.0, 0.3, -0.2, 0.4, 0.1, -0.5, 0.2]));
    let start = WipState::new(0.0, 0.1, 0.2, -0.3);
    let ends: Vec<Vector4<f64>> = [0.01, 0.005, 0.0025]
        .iter()
        .map(|dt| simulate(&plant, start, *dt, 1.0).to_vector())
        .collect();
    let order = ((ends[0] - ends[1]).norm() / (ends[1] - ends[2]).norm()).log2();
    assert!(order >= 3.5, "observed order {order:.2}");
}

#[test]
fn small_motions_follow_the_linearization() {
    let plant = default_plant(&Pose::new(vec![0.0; 7]));
    let a = plant.linearize().a;
    let dt = 1e-3;
    let start = WipState::new(0.0, 1e-5, 1e-5, 0.0);
    let linear_rk4 = |y: Vector4<f64>, a: &Matrix4<f64>| {
        let k1 = a * y;
        let k2 = a * (y + k1 * (dt / 2.0));
        let k3 = a * (y + k2 * (dt / 2.0));
        let k4 = a * (y + k3 * dt);
        y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
    };
    let mut nonlinear = start;
    let mut linear = start.to_vector();
    for _ in 0..300 {
        nonlinear = plant.step(&nonlinear, 0.0, 0.0, dt).unwrap();
        linear = linear_rk4(linear, &a);
    }
    let gap = (nonlinear.to_vector() - linear).norm() / linear.norm();
    assert!(gap < 1e-6, "relative gap {gap:e}");
}

#[test]
fn torque_pushes_wheel_and_body_opposite_ways() {
    let plant = default_plant(&Pose::new(vec![0.0; 7]));
    let d = plant.dynamics(&WipState::default(), 1.0, 0.0).unwrap();
    assert!(d.x_dot > 0.0);
    assert!(d.theta_dot < 0.0);
    let lin = plant.linearize();
    assert!((d.x_dot - lin.b_x).abs() < 1e-12 && (d.theta_dot - lin.b_theta).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unforced_energy_is_conserved(
        q in prop::collection::vec(-1.2f64..1.2, 7),
        theta in -0.3f64..0.3,
        theta_dot in -0.5f64..0.5,
        x_dot in -0.5f64..0.5,
    ) {
        let plant = default_plant(&Pose::new(q));
        let start = WipState::new(0.0, x_dot, theta, theta_dot);
        let e0 = plant.energy(&start);
        let end = simulate(&plant, start, 1e-3, 1.0);
        prop_assert!((plant.energy(&end) - e0).abs() <= 1e-6 * e0.abs());
    }

    #[test]
    fn forward_then_backward_returns(
        theta in -0.5f64..0.5,
        theta_dot in -1.0f64..1.0,
        tau in -5.0f64..5.0,
    ) {
        let plant = default_plant(&Pose::new(vec![0.0; 7]));
        let start = WipState::new(0.3, 0.1, theta, theta_dot);
        let there = plant.integrate(&start, tau, 0.0, 1e-3).unwrap();
        let back = plant.integrate(&there, tau, 0.0, -1e-3).unwrap();
        prop_assert!((back.to_vector() - start.to_vector()).norm() < 1e-9);
    }
}

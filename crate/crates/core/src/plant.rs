//! The locked-joint robot as a single rigid body on wheels.
//!
//! Generalized coordinates are the wheel ground position `x` and the pitch
//! `θ` of the axle→CoM line from vertical. With `M_t = m + m_w + I_w/r²`:
//!
//! ```text
//! M_t ẍ + m l cosθ θ̈ − m l sinθ θ̇² = τ_w / r
//! m l cosθ ẍ + I_a θ̈ − m g l sinθ  = −τ_w + τ_D
//! ```
//!
//! `τ_w` is the summed wheel motor torque (reacting on the body) and `τ_D`
//! an external torque about the axle. No friction, no slip.

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};

use crate::error::{Error, Result};
use crate::kinematics::{forward_transforms, ChainGeometry, Pose, WheelParams};
use crate::mass::BetaVector;

pub const GRAVITY: f64 = 9.81;
pub const MAX_STEP: f64 = 0.01;

/// Locked chain collapsed to one body. Links are point masses at their CoMs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateBody {
    pub mass: f64,
    /// Axle-to-CoM distance `l`.
    pub com_distance: f64,
    /// Pitch of the CoM line at the pose the body was built from. The
    /// body is balanced once the base pitch has moved by `−balance_offset`.
    pub balance_offset: f64,
    /// Inertia about the axle, `Σ m_i d_i²`.
    pub axle_inertia: f64,
}

pub fn aggregate(geom: &ChainGeometry, pose: &Pose, beta: &BetaVector) -> Result<AggregateBody> {
    beta.check_links(geom.link_count())?;
    beta.check_masses()?;
    let transforms = forward_transforms(geom, pose)?;
    let (mut mass, mut mx, mut mz, mut inertia) = (0.0, 0.0, 0.0, 0.0);
    for (i, t) in transforms.iter().enumerate() {
        let m = beta.mass(i);
        let p = t.apply(&(beta.first_moment(i) / m));
        mass += m;
        mx += m * p.x;
        mz += m * p.z;
        inertia += m * (p.x * p.x + p.z * p.z);
    }
    let (x, z) = (mx / mass, mz / mass);
    let l = x.hypot(z);
    if l < 1e-9 {
        return Err(Error::DegenerateBody(l));
    }
    if inertia < mass * l * l * (1.0 - 1e-12) {
        return Err(Error::NumericDegeneracy(format!(
            "axle inertia {inertia} below m l² = {}",
            mass * l * l
        )));
    }
    Ok(AggregateBody {
        mass,
        com_distance: l,
        balance_offset: x.atan2(z),
        axle_inertia: inertia,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WipState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl WipState {
    pub fn new(x: f64, x_dot: f64, theta: f64, theta_dot: f64) -> Self {
        Self {
            x,
            x_dot,
            theta,
            theta_dot,
        }
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.x, self.x_dot, self.theta, self.theta_dot)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// `Ẋ = A X + B τ_w` around the upright equilibrium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearization {
    pub a: Matrix4<f64>,
    pub b: Vector4<f64>,
    pub b_x: f64,
    pub b_theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WipPlant {
    pub body: AggregateBody,
    pub wheel: WheelParams,
}

impl WipPlant {
    pub fn new(body: AggregateBody, wheel: WheelParams) -> Result<Self> {
        if !(body.com_distance >= 1e-9) {
            return Err(Error::DegenerateBody(body.com_distance));
        }
        if !(body.mass > 0.0) || !(wheel.radius > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "plant needs positive mass and wheel radius: {body:?}, {wheel:?}"
            )));
        }
        Ok(Self { body, wheel })
    }

    /// Translational mass of body plus wheels, wheel inertia included.
    pub fn translational_mass(&self) -> f64 {
        self.body.mass + self.wheel.mass + self.wheel.inertia / (self.wheel.radius * self.wheel.radius)
    }

    pub fn mass_matrix(&self, theta: f64) -> Matrix2<f64> {
        let ml = self.body.mass * self.body.com_distance;
        let c = ml * theta.cos();
        Matrix2::new(self.translational_mass(), c, c, self.body.axle_inertia)
    }

    /// Time derivative of the state.
    pub fn dynamics(&self, state: &WipState, tau_w: f64, tau_d: f64) -> Result<WipState> {
        let mm = self.mass_matrix(state.theta);
        let det = mm.determinant();
        if !(det.abs() >= 1e-12) {
            return Err(Error::NumericDegeneracy(format!("mass matrix determinant {det:e}")));
        }
        let ml = self.body.mass * self.body.com_distance;
        let (s, _) = state.theta.sin_cos();
        let rhs = Vector2::new(
            tau_w / self.wheel.radius + ml * s * state.theta_dot * state.theta_dot,
            -tau_w + tau_d + ml * GRAVITY * s,
        );
        // 2×2 inverse in closed form
        let acc = Vector2::new(
            (mm[(1, 1)] * rhs[0] - mm[(0, 1)] * rhs[1]) / det,
            (mm[(0, 0)] * rhs[1] - mm[(1, 0)] * rhs[0]) / det,
        );
        Ok(WipState::new(state.x_dot, acc[0], state.theta_dot, acc[1]))
    }

    pub fn linearize(&self) -> Linearization {
        let m = self.body.mass;
        let l = self.body.com_distance;
        let ia = self.body.axle_inertia;
        let mt = self.translational_mass();
        let r = self.wheel.radius;
        let det = mt * ia - m * m * l * l;

        let a_x_theta = -m * m * l * l * GRAVITY / det;
        let a_theta_theta = mt * m * GRAVITY * l / det;
        let b_x = (ia / r + m * l) / det;
        let b_theta = -(mt + m * l / r) / det;

        #[rustfmt::skip]
        let a = Matrix4::new(
            0.0, 1.0, 0.0,           0.0,
            0.0, 0.0, a_x_theta,     0.0,
            0.0, 0.0, 0.0,           1.0,
            0.0, 0.0, a_theta_theta, 0.0,
        );
        Linearization {
            a,
            b: Vector4::new(0.0, b_x, 0.0, b_theta),
            b_x,
            b_theta,
        }
    }

    /// One classical RK4 step with the torques held. Accepts any `dt`,
    /// including negative ones.
    pub fn integrate(&self, state: &WipState, tau_w: f64, tau_d: f64, dt: f64) -> Result<WipState> {
        let f = |s: &Vector4<f64>| -> Result<Vector4<f64>> {
            Ok(self.dynamics(&WipState::from_vector(s), tau_w, tau_d)?.to_vector())
        };
        let y = state.to_vector();
        let k1 = f(&y)?;
        let k2 = f(&(y + k1 * (dt / 2.0)))?;
        let k3 = f(&(y + k2 * (dt / 2.0)))?;
        let k4 = f(&(y + k3 * dt))?;
        Ok(WipState::from_vector(
            &(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)),
        ))
    }

    pub fn step(&self, state: &WipState, tau_w: f64, tau_d: f64, dt: f64) -> Result<WipState> {
        if !(dt > 0.0 && dt <= MAX_STEP) {
            return Err(Error::InvalidParameter(format!(
                "step size must lie in (0, {MAX_STEP}], got {dt}"
            )));
        }
        let next = self.integrate(state, tau_w, tau_d, dt)?;
        if !next.is_finite() {
            return Err(Error::SimulationDiverged(format!("non-finite state {next:?}")));
        }
        Ok(next)
    }

    /// Total mechanical energy, zero potential at axle height.
    pub fn energy(&self, state: &WipState) -> f64 {
        let m = self.body.mass;
        let l = self.body.com_distance;
        let (s, c) = (state.theta.sin(), state.theta.cos());
        let _ = s;
        0.5 * self.translational_mass() * state.x_dot * state.x_dot
            + m * l * c * state.x_dot * state.theta_dot
            + 0.5 * self.body.axle_inertia * state.theta_dot * state.theta_dot
            + m * GRAVITY * l * c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{feature_vector, solve_balance_angle, LinkSpec};
    use crate::mass::make_default_truth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn default_plant() -> WipPlant {
        let geom = ChainGeometry::default_seven_link();
        let truth = make_default_truth(&geom).unwrap();
        let pose = Pose::new(vec![0.1, 0.4, -0.3, 0.8, 0.2, -0.5, 0.3]);
        WipPlant::new(aggregate(&geom, &pose, &truth).unwrap(), *geom.wheel()).unwrap()
    }

    #[test]
    fn single_upright_link() {
        let geom = ChainGeometry::new(
            vec![LinkSpec {
                length: 1.0,
                lower: -PI,
                upper: PI,
            }],
            4.0,
            WheelParams::default(),
        )
        .unwrap();
        let beta = BetaVector::from_slice(&[4.0 * 0.6, 0.0, 0.0, 4.0]);
        let body = aggregate(&geom, &Pose::new(vec![0.0]), &beta).unwrap();
        assert_eq!(body.com_distance, 0.6);
        assert_eq!(body.balance_offset, 0.0);
        assert!((body.axle_inertia - 4.0 * 0.36).abs() < 1e-15);
    }

    #[test]
    fn balanced_pose_has_zero_offset() {
        let geom = ChainGeometry::default_seven_link();
        let truth = make_default_truth(&geom).unwrap();
        let locked = Pose::new(vec![0.0, 0.9, -1.2, 0.4, 1.1, -0.6, 0.2]);
        let q1 = solve_balance_angle(&geom, &locked, &truth).unwrap();
        let body = aggregate(&geom, &locked.with_base_pitch(q1), &truth).unwrap();
        assert!(body.balance_offset.abs() < 1e-9);

        // the offset follows the base pitch one-to-one
        let tilted = aggregate(&geom, &locked.with_base_pitch(q1 + 0.2), &truth).unwrap();
        assert!((tilted.balance_offset - 0.2).abs() < 1e-9);
        assert!((tilted.axle_inertia - body.axle_inertia).abs() < 1e-12);
    }

    #[test]
    fn inertia_matches_pointwise_sum() {
        let geom = ChainGeometry::default_seven_link();
        let truth = make_default_truth(&geom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let pose = Pose::new((0..7).map(|_| rng.random_range(-2.0..2.0)).collect());
            let body = aggregate(&geom, &pose, &truth).unwrap();
            // independent route: per-link CoM from cumulative angles directly
            let (mut th, mut ox, mut oz, mut sum) = (0.0, 0.0, 0.0, 0.0);
            for (i, q) in pose.angles().iter().enumerate() {
                th += q;
                let d = geom.links()[i].length;
                let (cx, cz) = (ox + 0.5 * d * th.sin(), oz + 0.5 * d * th.cos());
                sum += truth.mass(i) * (cx * cx + cz * cz);
                ox += d * th.sin();
                oz += d * th.cos();
            }
            assert!((body.axle_inertia - sum).abs() <= 1e-12 * sum);
            assert!(body.axle_inertia >= body.mass * body.com_distance.powi(2));
            let x_com = feature_vector(&geom, &pose).unwrap().predict(&truth);
            assert!((body.com_distance * body.balance_offset.sin() - x_com).abs() < 1e-12);
        }
    }

    #[test]
    fn upright_equilibrium_is_still() {
        let plant = default_plant();
        let d = plant.dynamics(&WipState::default(), 0.0, 0.0).unwrap();
        assert_eq!(d, WipState::default());
        let s = WipState::new(0.3, 0.0, 0.0, 0.0);
        assert_eq!(plant.step(&s, 0.0, 0.0, 1e-3).unwrap(), s);
    }

    #[test]
    fn heavy_wheels_give_a_pure_pendulum() {
        let mut plant = default_plant();
        plant.wheel.mass = 1e13;
        let b = plant.body;
        for theta in [0.05, 0.4, 1.2] {
            let d = plant.dynamics(&WipState::new(0.0, 0.0, theta, 0.0), 0.0, 0.0).unwrap();
            let expected = b.mass * GRAVITY * b.com_distance / b.axle_inertia * theta.sin();
            assert!((d.theta_dot - expected).abs() < 1e-9 * expected.abs());
            assert!(d.x_dot.abs() < 1e-9);
        }
    }

    #[test]
    fn linearization_structure() {
        let lin = default_plant().linearize();
        assert_eq!(lin.a[(0, 1)], 1.0);
        assert_eq!(lin.a[(2, 3)], 1.0);
        assert_eq!(lin.a.row(0).iter().filter(|v| **v != 0.0).count(), 1);
        assert!(lin.a[(3, 2)] > 0.0);
        assert!(lin.b_x != 0.0 && lin.b_theta != 0.0);
        assert_eq!(lin.b, Vector4::new(0.0, lin.b_x, 0.0, lin.b_theta));
    }

    #[test]
    fn mass_matrix_is_positive_definite() {
        let plant = default_plant();
        for theta in [-1.4, -0.3, 0.0, 0.7, 1.5] {
            let mm = plant.mass_matrix(theta);
            assert_eq!(mm[(0, 1)], mm[(1, 0)]);
            assert!(mm[(0, 0)] > 0.0 && mm.determinant() > 0.0);
        }
    }

    #[test]
    fn rk4_reversibility() {
        let plant = default_plant();
        let start = WipState::new(0.1, 0.2, 0.05, -0.1);
        let fwd = plant.integrate(&start, 1.5, 0.0, 1e-3).unwrap();
        let back = plant.integrate(&fwd, 1.5, 0.0, -1e-3).unwrap();
        assert!((back.to_vector() - start.to_vector()).norm() < 1e-9);
    }

    #[test]
    fn step_validates_dt() {
        let plant = default_plant();
        for dt in [0.0, -1e-3, 0.02] {
            assert!(plant.step(&WipState::default(), 0.0, 0.0, dt).is_err());
        }
    }
}

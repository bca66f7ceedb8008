//! Planar sagittal-chain forward kinematics.
//!
//! Frame 0 sits at the wheel-axle midpoint with x along the heading and z
//! vertical. Every joint pitches about the axle direction, so link `i` is
//! fully described by its cumulative pitch `Θ_i = q_1 + … + q_i`. The local
//! x-axis of link `i` points along `(sin Θ_i, 0, cos Θ_i)` in frame 0, which
//! makes `q_1 = 0` the upright base link. Local z points along
//! `(cos Θ_i, 0, −sin Θ_i)` and local y along world −y, keeping every
//! rotation block proper (det = +1).

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DVector, Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mass::BetaVector;

/// Length and joint range of one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub length: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Wheel pair parameters, used only by the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WheelParams {
    pub radius: f64,
    /// Combined mass of both wheels.
    pub mass: f64,
    /// Combined inertia of both wheels about the axle.
    pub inertia: f64,
}

impl Default for WheelParams {
    fn default() -> Self {
        Self {
            radius: 0.25,
            mass: 12.0,
            inertia: 0.375,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainGeometry {
    links: Vec<LinkSpec>,
    total_mass: f64,
    wheel: WheelParams,
}

pub const DEFAULT_LINK_LENGTHS: [f64; 7] = [0.55, 0.30, 0.30, 0.30, 0.25, 0.25, 0.20];
pub const DEFAULT_BASE_LIMIT: f64 = FRAC_PI_2;
pub const DEFAULT_BODY_LIMIT: f64 = 2.0;

impl ChainGeometry {
    pub fn new(links: Vec<LinkSpec>, total_mass: f64, wheel: WheelParams) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::InvalidParameter("chain needs at least one link".into()));
        }
        for (i, link) in links.iter().enumerate() {
            if !(link.length > 0.0) || !link.length.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "link {} length must be positive, got {}",
                    i + 1,
                    link.length
                )));
            }
            if !(link.lower < link.upper) {
                return Err(Error::InvalidParameter(format!(
                    "link {} joint limits [{}, {}] are empty",
                    i + 1,
                    link.lower,
                    link.upper
                )));
            }
        }
        if !(total_mass > 0.0) || !total_mass.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "total mass must be positive, got {total_mass}"
            )));
        }
        if !(wheel.radius > 0.0) || wheel.mass < 0.0 || wheel.inertia < 0.0 {
            return Err(Error::InvalidParameter(format!("invalid wheel parameters {wheel:?}")));
        }
        Ok(Self {
            links,
            total_mass,
            wheel,
        })
    }

    /// Seven-link chain with the default lengths, ±π/2 on the base pitch,
    /// ±2 rad on the body joints and a 100 kg body.
    pub fn default_seven_link() -> Self {
        let links = DEFAULT_LINK_LENGTHS
            .iter()
            .enumerate()
            .map(|(i, &length)| {
                let limit = if i == 0 { DEFAULT_BASE_LIMIT } else { DEFAULT_BODY_LIMIT };
                LinkSpec {
                    length,
                    lower: -limit,
                    upper: limit,
                }
            })
            .collect();
        Self::new(links, 100.0, WheelParams::default()).expect("default geometry is valid")
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[LinkSpec] {
        &self.links
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn wheel(&self) -> &WheelParams {
        &self.wheel
    }

    /// Dimension of β and φ.
    pub fn param_dim(&self) -> usize {
        4 * self.links.len()
    }

    pub fn with_total_mass(&self, total_mass: f64) -> Result<Self> {
        Self::new(self.links.clone(), total_mass, self.wheel)
    }

    pub fn within_limits(&self, pose: &Pose) -> bool {
        pose.len() == self.links.len()
            && pose
                .angles()
                .iter()
                .zip(&self.links)
                .all(|(q, l)| *q >= l.lower && *q <= l.upper)
    }

    fn check_pose(&self, pose: &Pose) -> Result<()> {
        if pose.len() != self.links.len() {
            return Err(Error::dims("pose length", self.links.len(), pose.len()));
        }
        Ok(())
    }
}

/// Joint angles `q_1..q_L` in radians. `q_1` is the base-link pitch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose(Vec<f64>);

impl Pose {
    pub fn new(angles: Vec<f64>) -> Self {
        Self(angles)
    }

    pub fn angles(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn base_pitch(&self) -> f64 {
        self.0[0]
    }

    /// Same locked body joints with a different base pitch.
    pub fn with_base_pitch(&self, q1: f64) -> Self {
        let mut angles = self.0.clone();
        angles[0] = q1;
        Self(angles)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Pose {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Homogeneous transform from a link frame to frame 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTransform(Matrix4<f64>);

impl FrameTransform {
    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn apply(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * local + self.origin()
    }
}

/// φ(q) ∈ R^{4L}: block i is the first row of `T_i^0(q)` divided by M.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(DVector<f64>);

impl FeatureVector {
    pub fn from_vector(v: DVector<f64>) -> Self {
        Self(v)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Predicted x-CoM, `φᵀβ`.
    pub fn predict(&self, beta: &BetaVector) -> f64 {
        self.0.dot(beta.as_vector())
    }

    pub fn norm_squared(&self) -> f64 {
        self.0.norm_squared()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComCoordinates {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

fn cumulative_pitch(pose: &Pose) -> Vec<f64> {
    pose.angles()
        .iter()
        .scan(0.0, |acc, q| {
            *acc += q;
            Some(*acc)
        })
        .collect()
}

/// Link-frame origins in the sagittal plane as `(x, z)`, plus `Θ_i`.
fn planar_frames(geom: &ChainGeometry, pose: &Pose) -> Vec<(f64, f64, f64)> {
    let mut frames = Vec::with_capacity(pose.len());
    let (mut ox, mut oz) = (0.0, 0.0);
    for (theta, link) in cumulative_pitch(pose).into_iter().zip(geom.links()) {
        frames.push((theta, ox, oz));
        let (s, c) = theta.sin_cos();
        ox += link.length * s;
        oz += link.length * c;
    }
    frames
}

pub fn forward_transforms(geom: &ChainGeometry, pose: &Pose) -> Result<Vec<FrameTransform>> {
    geom.check_pose(pose)?;
    Ok(planar_frames(geom, pose)
        .into_iter()
        .map(|(theta, ox, oz)| {
            let (s, c) = theta.sin_cos();
            #[rustfmt::skip]
            let m = Matrix4::new(
                s,   0.0,  c,   ox,
                0.0, -1.0, 0.0, 0.0,
                c,   0.0,  -s,  oz,
                0.0, 0.0,  0.0, 1.0,
            );
            FrameTransform(m)
        })
        .collect())
}

pub fn feature_vector(geom: &ChainGeometry, pose: &Pose) -> Result<FeatureVector> {
    geom.check_pose(pose)?;
    let inv_mass = 1.0 / geom.total_mass();
    let mut phi = DVector::zeros(geom.param_dim());
    for (i, (theta, ox, _)) in planar_frames(geom, pose).into_iter().enumerate() {
        let (s, c) = theta.sin_cos();
        phi[4 * i] = s * inv_mass;
        phi[4 * i + 2] = c * inv_mass;
        phi[4 * i + 3] = ox * inv_mass;
    }
    Ok(FeatureVector(phi))
}

/// Body CoM in frame 0 by mass-weighted summation of per-link CoMs.
pub fn com_of(geom: &ChainGeometry, pose: &Pose, beta: &BetaVector) -> Result<ComCoordinates> {
    geom.check_pose(pose)?;
    beta.check_links(geom.link_count())?;
    beta.check_masses()?;
    let transforms = forward_transforms(geom, pose)?;
    let mut weighted = Vector3::zeros();
    let mut mass = 0.0;
    for (i, t) in transforms.iter().enumerate() {
        let m = beta.mass(i);
        let local = beta.first_moment(i) / m;
        weighted += m * t.apply(&local);
        mass += m;
    }
    let c = weighted / mass;
    Ok(ComCoordinates { x: c.x, y: c.y, z: c.z })
}

/// Sagittal first moments `(Σ m_i x_i^0, Σ m_i z_i^0) / M`.
fn planar_moment(geom: &ChainGeometry, pose: &Pose, beta: &BetaVector) -> (f64, f64) {
    let v = beta.as_vector();
    let (mut x, mut z) = (0.0, 0.0);
    for (i, (theta, ox, oz)) in planar_frames(geom, pose).into_iter().enumerate() {
        let (s, c) = theta.sin_cos();
        let (mx, mz, m) = (v[4 * i], v[4 * i + 2], v[4 * i + 3]);
        x += mx * s + mz * c + m * ox;
        z += mx * c - mz * s + m * oz;
    }
    let inv = 1.0 / geom.total_mass();
    (x * inv, z * inv)
}

const BALANCE_GRID: usize = 64;
const BALANCE_TOL: f64 = 1e-10;

/// Base pitch `q_1*` that puts the model CoM over the axle with the body
/// joints `q_2..q_L` of `locked` held fixed (`q_1` of `locked` is ignored).
///
/// Brackets sign changes of `x_com(q_1)` on a grid over `[−π, π]`, bisects
/// each, and keeps the root with the CoM above the axle.
pub fn solve_balance_angle(geom: &ChainGeometry, locked: &Pose, beta: &BetaVector) -> Result<f64> {
    geom.check_pose(locked)?;
    beta.check_links(geom.link_count())?;

    let x_at = |q1: f64| planar_moment(geom, &locked.with_base_pitch(q1), beta).0;
    let (x0, z0) = planar_moment(geom, &locked.with_base_pitch(0.0), beta);
    if x0.hypot(z0) < 1e-12 {
        return Err(Error::DegenerateConfiguration(
            "model CoM coincides with the axle".into(),
        ));
    }

    let step = 2.0 * PI / BALANCE_GRID as f64;
    let mut best: Option<(f64, f64)> = None;
    let mut consider = |q1: f64| {
        let z = planar_moment(geom, &locked.with_base_pitch(q1), beta).1;
        if z > 0.0 && best.is_none_or(|(_, bz)| z > bz) {
            best = Some((q1, z));
        }
    };

    let mut lo = -PI;
    let mut f_lo = x_at(lo);
    for k in 1..=BALANCE_GRID {
        let hi = -PI + step * k as f64;
        let f_hi = x_at(hi);
        if f_lo == 0.0 {
            consider(lo);
        } else if f_lo.signum() != f_hi.signum() && f_hi != 0.0 {
            consider(bisect(&x_at, lo, hi, f_lo));
        }
        lo = hi;
        f_lo = f_hi;
    }
    if f_lo == 0.0 {
        consider(lo);
    }

    let (q1, _) = best.ok_or_else(|| Error::DegenerateConfiguration("no upright balance root in [-π, π]".into()))?;
    let residual = x_at(q1);
    if residual.abs() >= BALANCE_TOL {
        return Err(Error::NumericDegeneracy(format!(
            "balance root residual {residual:e} m"
        )));
    }
    Ok(q1)
}

fn bisect(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, mut f_lo: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return mid;
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    if f_lo.abs() <= f(hi).abs() {
        lo
    } else {
        hi
    }
}

/// `locked` with its base pitch replaced by the balance angle under `beta`.
pub fn balanced_pose(geom: &ChainGeometry, locked: &Pose, beta: &BetaVector) -> Result<Pose> {
    let q1 = solve_balance_angle(geom, locked, beta)?;
    Ok(locked.with_base_pitch(q1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(length: f64, mass: f64) -> ChainGeometry {
        ChainGeometry::new(
            vec![LinkSpec {
                length,
                lower: -PI,
                upper: PI,
            }],
            mass,
            WheelParams::default(),
        )
        .unwrap()
    }

    fn random_geometry(rng: &mut impl Rng, links: usize) -> ChainGeometry {
        let specs = (0..links)
            .map(|_| LinkSpec {
                length: rng.random_range(0.1..0.8),
                lower: -2.0,
                upper: 2.0,
            })
            .collect();
        ChainGeometry::new(specs, rng.random_range(10.0..120.0), WheelParams::default()).unwrap()
    }

    /// Composes per-joint matrices: base orientation, then for each link a
    /// pitch about local y followed by a translation along local x.
    fn composed_transforms(geom: &ChainGeometry, pose: &Pose) -> Vec<Matrix4<f64>> {
        #[rustfmt::skip]
        let base = Matrix4::new(
            0.0, 0.0,  1.0, 0.0,
            0.0, -1.0, 0.0, 0.0,
            1.0, 0.0,  0.0, 0.0,
            0.0, 0.0,  0.0, 1.0,
        );
        let mut out = Vec::new();
        let mut t = base;
        for (i, q) in pose.angles().iter().enumerate() {
            if i > 0 {
                let shift = Matrix4::new_translation(&Vector3::new(geom.links()[i - 1].length, 0.0, 0.0));
                t *= shift;
            }
            t *= Rotation3::from_axis_angle(&Vector3::y_axis(), -q).to_homogeneous();
            out.push(t);
        }
        out
    }

    #[test]
    fn upright_single_link_point_is_straight_up() {
        let geom = single(1.0, 10.0);
        let t = forward_transforms(&geom, &Pose::new(vec![0.0])).unwrap();
        let p = t[0].apply(&Vector3::new(0.4, 0.0, 0.0));
        assert_eq!(p, Vector3::new(0.0, 0.0, 0.4));
    }

    #[test]
    fn quarter_turn_single_link_lies_along_heading() {
        let geom = single(1.0, 10.0);
        let t = forward_transforms(&geom, &Pose::new(vec![FRAC_PI_2])).unwrap();
        let p = t[0].apply(&Vector3::new(0.4, 0.0, 0.0));
        assert!((p - Vector3::new(0.4, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn transforms_match_matrix_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let geom = random_geometry(&mut rng, 3);
            let pose = Pose::new((0..3).map(|_| rng.random_range(-3.0..3.0)).collect());
            let fast = forward_transforms(&geom, &pose).unwrap();
            let oracle = composed_transforms(&geom, &pose);
            for (a, b) in fast.iter().zip(&oracle) {
                assert!((a.matrix() - b).abs().max() < 1e-12);
                let r = a.rotation();
                assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-10);
                assert!((r.determinant() - 1.0).abs() < 1e-12);
                assert_eq!(
                    a.matrix().row(3).into_owned(),
                    Matrix4::<f64>::identity().row(3).into_owned()
                );
            }
        }
    }

    #[test]
    fn single_link_features() {
        let geom = single(1.0, 10.0);
        let phi = feature_vector(&geom, &Pose::new(vec![0.0])).unwrap();
        assert_eq!(phi.as_vector().as_slice(), &[0.0, 0.0, 0.1, 0.0]);
        let phi = feature_vector(&geom, &Pose::new(vec![FRAC_PI_2])).unwrap();
        let v = phi.as_vector();
        assert!((v[0] - 0.1).abs() < 1e-16 && v[1] == 0.0 && v[2].abs() < 1e-17 && v[3] == 0.0);
    }

    #[test]
    fn wrong_pose_length_is_rejected() {
        let geom = ChainGeometry::default_seven_link();
        assert!(matches!(
            feature_vector(&geom, &Pose::new(vec![0.0; 3])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn com_of_single_link() {
        let geom = single(1.0, 5.0);
        let beta = BetaVector::from_slice(&[0.0, 0.0, 5.0 * 0.3, 5.0]);
        let com = com_of(&geom, &Pose::new(vec![0.0]), &beta).unwrap();
        // z-offset of the local CoM maps to world x at q1 = 0
        assert!((com.x - 0.3).abs() < 1e-15 && com.z.abs() < 1e-15);

        let beta = BetaVector::from_slice(&[5.0 * 0.3, 0.0, 0.0, 5.0]);
        let com = com_of(&geom, &Pose::new(vec![0.0]), &beta).unwrap();
        assert_eq!((com.x, com.y, com.z), (0.0, 0.0, 0.3));
    }

    #[test]
    fn com_is_homogeneous_in_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = random_geometry(&mut rng, 4);
        let pose = Pose::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
        let beta = BetaVector::from_vec(
            (0..16)
                .map(|k| {
                    if k % 4 == 3 {
                        rng.random_range(1.0..9.0)
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect(),
        );
        let a = com_of(&geom, &pose, &beta).unwrap();
        let scaled = BetaVector::from_vector(beta.as_vector() * 3.5);
        let b = com_of(&geom.with_total_mass(geom.total_mass() * 3.5).unwrap(), &pose, &scaled).unwrap();
        assert!((a.x - b.x).abs() < 1e-14 && (a.y - b.y).abs() < 1e-14 && (a.z - b.z).abs() < 1e-14);
    }

    #[test]
    fn com_rejects_nonpositive_mass() {
        let geom = single(1.0, 5.0);
        let beta = BetaVector::from_slice(&[0.1, 0.0, 0.0, 0.0]);
        assert!(matches!(
            com_of(&geom, &Pose::new(vec![0.0]), &beta),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn balance_on_axis_is_upright() {
        let geom = single(1.0, 5.0);
        let beta = BetaVector::from_slice(&[5.0 * 0.4, 0.0, 0.0, 5.0]);
        let q1 = solve_balance_angle(&geom, &Pose::new(vec![0.7]), &beta).unwrap();
        assert!(q1.abs() < 1e-12);
    }

    #[test]
    fn balance_matches_closed_form() {
        let geom = single(1.0, 5.0);
        for &(d, h) in &[(0.4, 0.05), (0.3, -0.12), (0.2, 0.2), (0.05, -0.01)] {
            let beta = BetaVector::from_slice(&[5.0 * d, 0.0, 5.0 * h, 5.0]);
            let q1 = solve_balance_angle(&geom, &Pose::new(vec![0.0]), &beta).unwrap();
            let expected = -f64::atan2(h, d);
            assert!((q1 - expected).abs() < 1e-10, "{q1} vs {expected}");
        }
    }

    #[test]
    fn balance_rejects_com_on_axle() {
        let geom = single(1.0, 5.0);
        let beta = BetaVector::from_slice(&[0.0, 0.3, 0.0, 5.0]);
        assert!(matches!(
            solve_balance_angle(&geom, &Pose::new(vec![0.0]), &beta),
            Err(Error::DegenerateConfiguration(_))
        ));
    }
}

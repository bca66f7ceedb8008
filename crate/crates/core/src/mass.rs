//! The mass-parameter vector β and how to make, perturb and constrain it.
//!
//! β stacks one block per link, `[m_i x_i, m_i y_i, m_i z_i, m_i]`, where
//! `(x_i, y_i, z_i)` is the link CoM in its own frame. The CoM model is
//! linear in β, which is what makes plain gradient descent applicable.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kinematics::ChainGeometry;
use crate::metalearn::generate_pool;
use crate::seed;

/// Smallest mass the projection leaves on a link.
pub const MASS_FLOOR: f64 = 1e-6;

/// Ground-truth link masses of the default seven-link model. Links 1 and 3
/// follow the reference robot (70 kg base, 6 kg third link); the others are
/// configuration defaults.
pub const DEFAULT_LINK_MASSES: [f64; 7] = [70.0, 8.0, 6.0, 6.0, 4.0, 4.0, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct BetaVector(DVector<f64>);

impl BetaVector {
    pub fn from_vector(v: DVector<f64>) -> Self {
        Self(v)
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(DVector::from_vec(v))
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self(DVector::from_column_slice(v))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_vector_mut(&mut self) -> &mut DVector<f64> {
        &mut self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn link_count(&self) -> usize {
        self.0.len() / 4
    }

    pub fn mass(&self, link: usize) -> f64 {
        self.0[4 * link + 3]
    }

    /// `m_i X_i^i` without the homogeneous entry.
    pub fn first_moment(&self, link: usize) -> Vector3<f64> {
        Vector3::new(self.0[4 * link], self.0[4 * link + 1], self.0[4 * link + 2])
    }

    pub fn masses(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().skip(3).step_by(4).copied()
    }

    pub fn mass_sum(&self) -> f64 {
        self.masses().sum()
    }

    /// Short hex digest of the exact bit pattern, for traces.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.0.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    pub(crate) fn check_links(&self, links: usize) -> Result<()> {
        if self.0.len() != 4 * links {
            return Err(Error::dims("beta length", 4 * links, self.0.len()));
        }
        Ok(())
    }

    pub(crate) fn check_masses(&self) -> Result<()> {
        match self.masses().position(|m| !(m > 0.0)) {
            Some(i) => Err(Error::InvalidParameter(format!(
                "link {} mass {} is not positive",
                i + 1,
                self.mass(i)
            ))),
            None => Ok(()),
        }
    }
}

/// Erroneous parameter vectors, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaEnsemble {
    pub betas: DMatrix<f64>,
    pub seed: u64,
    pub noise_fraction: f64,
    pub target_error: f64,
    /// Mean |x_com error| of each member over the probe set, at generation.
    pub probe_errors: Vec<f64>,
}

impl BetaEnsemble {
    pub fn len(&self) -> usize {
        self.betas.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.ncols() == 0
    }

    pub fn member(&self, k: usize) -> BetaVector {
        BetaVector(self.betas.column(k).into_owned())
    }

    pub fn members(&self) -> impl Iterator<Item = BetaVector> + '_ {
        (0..self.len()).map(|k| self.member(k))
    }
}

/// Truth with every link CoM at mid-link on the link axis.
pub fn truth_from_masses(geom: &ChainGeometry, masses: &[f64]) -> Result<BetaVector> {
    if masses.len() != geom.link_count() {
        return Err(Error::dims("link masses", geom.link_count(), masses.len()));
    }
    if let Some(m) = masses.iter().find(|m| !(**m > 0.0)) {
        return Err(Error::InvalidParameter(format!("link mass {m} is not positive")));
    }
    let sum: f64 = masses.iter().sum();
    let total = geom.total_mass();
    if (sum - total).abs() > 1e-9 * total {
        return Err(Error::InvalidParameter(format!(
            "link masses sum to {sum} kg but the geometry total mass is {total} kg"
        )));
    }
    let mut v = DVector::zeros(geom.param_dim());
    for (i, (m, link)) in masses.iter().zip(geom.links()).enumerate() {
        v[4 * i] = m * link.length / 2.0;
        v[4 * i + 3] = *m;
    }
    Ok(BetaVector(v))
}

pub fn make_default_truth(geom: &ChainGeometry) -> Result<BetaVector> {
    if geom.link_count() != DEFAULT_LINK_MASSES.len() {
        return Err(Error::dims(
            "default truth link count",
            DEFAULT_LINK_MASSES.len(),
            geom.link_count(),
        ));
    }
    truth_from_masses(geom, &DEFAULT_LINK_MASSES)
}

fn check_noise(noise_fraction: f64) -> Result<()> {
    if !(noise_fraction > 0.0 && noise_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "noise fraction must lie in (0, 1), got {noise_fraction}"
        )));
    }
    Ok(())
}

/// Scales every component by an independent factor drawn uniformly from
/// `[1 − noise, 1 + noise]`.
pub fn perturb_with<R: Rng + ?Sized>(truth: &BetaVector, noise_fraction: f64, rng: &mut R) -> Result<BetaVector> {
    check_noise(noise_fraction)?;
    let mut v = truth.0.clone();
    for (k, c) in v.iter_mut().enumerate() {
        let factor = rng.random_range(1.0 - noise_fraction..=1.0 + noise_fraction);
        *c *= factor;
        if k % 4 == 3 {
            *c = c.max(MASS_FLOOR);
        }
    }
    Ok(BetaVector(v))
}

pub fn perturb(truth: &BetaVector, noise_fraction: f64, seed: u64) -> Result<BetaVector> {
    perturb_with(truth, noise_fraction, &mut seed::stream(seed, "perturb"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MassProjection {
    pub beta: BetaVector,
    /// Some mass hit [`MASS_FLOOR`] and the remainder was redistributed.
    pub clamped: bool,
}

/// Euclidean projection of the mass components onto `Σ m_i = total_mass`.
///
/// Every mass moves by the same amount; first moments are untouched. Masses
/// that would drop below [`MASS_FLOOR`] are pinned there and the deficit is
/// spread over the rest.
pub fn project_mass_sum(beta: &BetaVector, total_mass: f64) -> Result<MassProjection> {
    if !(total_mass > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "total mass must be positive, got {total_mass}"
        )));
    }
    let links = beta.link_count();
    if (beta.mass_sum() - total_mass).abs() <= 1e-12 * total_mass {
        return Ok(MassProjection {
            beta: beta.clone(),
            clamped: false,
        });
    }
    if total_mass < MASS_FLOOR * links as f64 {
        return Err(Error::InvalidParameter(format!(
            "total mass {total_mass} kg cannot give {links} links at least {MASS_FLOOR} kg each"
        )));
    }

    let mut masses: Vec<f64> = beta.masses().collect();
    let mut free = vec![true; links];
    let mut clamped = false;
    loop {
        let n_free = free.iter().filter(|f| **f).count();
        let shift = (total_mass - masses.iter().sum::<f64>()) / n_free as f64;
        for (m, f) in masses.iter_mut().zip(&free) {
            if *f {
                *m += shift;
            }
        }
        let mut pinned_any = false;
        for (m, f) in masses.iter_mut().zip(free.iter_mut()) {
            if *f && *m < MASS_FLOOR {
                *m = MASS_FLOOR;
                *f = false;
                pinned_any = true;
            }
        }
        if !pinned_any {
            break;
        }
        clamped = true;
    }

    let mut v = beta.0.clone();
    for (i, m) in masses.into_iter().enumerate() {
        v[4 * i + 3] = m;
    }
    Ok(MassProjection {
        beta: BetaVector(v),
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleOptions {
    pub noise_fraction: f64,
    pub probe_poses: usize,
    /// Project each member onto the total-mass hyperplane before testing it.
    pub mass_feasible: bool,
    pub max_consecutive_rejections: usize,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            noise_fraction: 0.5,
            probe_poses: 100,
            mass_feasible: true,
            max_consecutive_rejections: 10_000,
        }
    }
}

pub fn generate_ensemble(
    truth: &BetaVector,
    n_betas: usize,
    target_error: f64,
    geom: &ChainGeometry,
    seed: u64,
) -> Result<BetaEnsemble> {
    generate_ensemble_with(truth, n_betas, target_error, geom, seed, &EnsembleOptions::default())
}

/// Rejection-samples perturbed βs whose mean |x_com error| over random
/// balanced probe poses falls in `[target, 2·target]`.
///
/// With `mass_feasible`, candidates whose projection pins a mass at the
/// floor are rejected: a near-massless link carrying a finite first moment
/// puts its CoM metres away and gives an absurd body inertia.
pub fn generate_ensemble_with(
    truth: &BetaVector,
    n_betas: usize,
    target_error: f64,
    geom: &ChainGeometry,
    seed: u64,
    opts: &EnsembleOptions,
) -> Result<BetaEnsemble> {
    if n_betas == 0 {
        return Err(Error::InvalidParameter("ensemble needs at least one member".into()));
    }
    if !(target_error > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "target error must be positive, got {target_error}"
        )));
    }
    check_noise(opts.noise_fraction)?;
    truth.check_links(geom.link_count())?;

    let probe = generate_pool(geom, truth, opts.probe_poses, seed::derive(seed, "probe"))?;
    let mut rng = seed::stream(seed, "ensemble");
    let mut betas = DMatrix::zeros(geom.param_dim(), n_betas);
    let mut probe_errors = Vec::with_capacity(n_betas);
    let mut rejections = 0;
    while probe_errors.len() < n_betas {
        let mut candidate = perturb_with(truth, opts.noise_fraction, &mut rng)?;
        let mut clamped = false;
        if opts.mass_feasible {
            let projected = project_mass_sum(&candidate, geom.total_mass())?;
            candidate = projected.beta;
            clamped = projected.clamped;
        }
        let err = probe.mean_abs_error(&candidate);
        if !clamped && err >= target_error && err <= 2.0 * target_error && candidate.check_masses().is_ok() {
            betas.set_column(probe_errors.len(), candidate.as_vector());
            probe_errors.push(err);
            rejections = 0;
        } else {
            rejections += 1;
            if rejections >= opts.max_consecutive_rejections {
                return Err(Error::InfeasibleTarget(rejections));
            }
        }
    }
    Ok(BetaEnsemble {
        betas,
        seed,
        noise_fraction: opts.noise_fraction,
        target_error,
        probe_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{com_of, Pose};

    fn default_truth() -> (ChainGeometry, BetaVector) {
        let geom = ChainGeometry::default_seven_link();
        let truth = make_default_truth(&geom).unwrap();
        (geom, truth)
    }

    #[test]
    fn default_truth_has_reference_masses() {
        let (geom, truth) = default_truth();
        assert_eq!(truth.as_vector()[3], 70.0);
        assert_eq!(truth.as_vector()[11], 6.0);
        assert_eq!(truth.mass_sum(), geom.total_mass());
        let com = com_of(&geom, &Pose::new(vec![0.0; 7]), &truth).unwrap();
        assert_eq!(com.x, 0.0);
        assert!(com.z > 0.0);
    }

    #[test]
    fn default_truth_needs_seven_links() {
        let geom = ChainGeometry::new(
            ChainGeometry::default_seven_link().links()[..3].to_vec(),
            84.0,
            Default::default(),
        )
        .unwrap();
        assert!(make_default_truth(&geom).is_err());
    }

    #[test]
    fn perturb_is_deterministic_and_bounded() {
        let (_, truth) = default_truth();
        let first = perturb(&truth, 0.2, 99).unwrap();
        for _ in 0..100 {
            assert_eq!(perturb(&truth, 0.2, 99).unwrap(), first);
        }
        assert!((56.0..=84.0).contains(&first.mass(0)));
        assert!(first.masses().all(|m| m > 0.0));
        assert_ne!(perturb(&truth, 0.2, 100).unwrap(), first);
    }

    #[test]
    fn tiny_noise_leaves_truth_alone() {
        let (_, truth) = default_truth();
        let b = perturb(&truth, 1e-15, 5).unwrap();
        assert!((b.as_vector() - truth.as_vector()).abs().max() < 1e-12);
    }

    #[test]
    fn perturb_rejects_bad_noise() {
        let (_, truth) = default_truth();
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(perturb(&truth, bad, 1).is_err());
        }
    }

    #[test]
    fn projection_closed_form() {
        let beta = BetaVector::from_slice(&[0.1, 0.2, 0.3, 3.0, 0.4, 0.5, 0.6, 5.0]);
        let p = project_mass_sum(&beta, 10.0).unwrap();
        assert_eq!(p.beta.masses().collect::<Vec<_>>(), vec![4.0, 6.0]);
        assert!(!p.clamped);
        for k in [0, 1, 2, 4, 5, 6] {
            assert_eq!(p.beta.as_vector()[k], beta.as_vector()[k]);
        }
    }

    #[test]
    fn projection_fixed_point_and_idempotence() {
        let (geom, truth) = default_truth();
        assert_eq!(project_mass_sum(&truth, geom.total_mass()).unwrap().beta, truth);
        let off = perturb(&truth, 0.3, 4).unwrap();
        let once = project_mass_sum(&off, geom.total_mass()).unwrap().beta;
        let twice = project_mass_sum(&once, geom.total_mass()).unwrap().beta;
        assert_eq!(once, twice);
        assert!((once.mass_sum() - geom.total_mass()).abs() <= 1e-9 * geom.total_mass());
    }

    #[test]
    fn projection_clamps_and_redistributes() {
        let beta = BetaVector::from_slice(&[0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 9.0]);
        let p = project_mass_sum(&beta, 12.0).unwrap();
        assert!(p.clamped);
        let m: Vec<f64> = p.beta.masses().collect();
        assert_eq!(m[0], MASS_FLOOR);
        assert!((m.iter().sum::<f64>() - 12.0).abs() < 1e-12);
        assert!((m[1] - m[2]).abs() < 1e-12);
    }

    #[test]
    fn ensemble_meets_target_and_excludes_truth() {
        let (geom, truth) = default_truth();
        let ens = generate_ensemble(&truth, 8, 0.02, &geom, 17).unwrap();
        assert_eq!(ens.len(), 8);
        for (k, err) in ens.probe_errors.iter().enumerate() {
            assert!(*err >= 0.02 && *err <= 0.04);
            let m = ens.member(k);
            assert_ne!(m, truth);
            assert!((m.mass_sum() - geom.total_mass()).abs() < 1e-9 * geom.total_mass());
        }
        assert_eq!(generate_ensemble(&truth, 8, 0.02, &geom, 17).unwrap(), ens);
    }

    #[test]
    fn unreachable_target_is_infeasible() {
        let (geom, truth) = default_truth();
        let opts = EnsembleOptions {
            noise_fraction: 0.01,
            max_consecutive_rejections: 200,
            ..Default::default()
        };
        assert!(matches!(
            generate_ensemble_with(&truth, 1, 0.5, &geom, 1, &opts),
            Err(Error::InfeasibleTarget(200))
        ));
    }
}

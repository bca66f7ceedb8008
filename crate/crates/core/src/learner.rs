//! Gradient descent on β from balanced-pose observations.
//!
//! At a balanced pose the true x-CoM is zero, so the model's prediction
//! `φᵀβ` is itself the error. Each observation takes one step on
//! `J = ½ (φᵀβ)²`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{feature_vector, ChainGeometry, FeatureVector, Pose};
use crate::mass::{project_mass_sum, BetaVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningConfig {
    /// Step size η.
    pub eta: f64,
    /// Error threshold, m.
    pub x_tol: f64,
    /// Consecutive below-threshold observations needed to stop.
    pub consecutive: usize,
    /// Project onto the known total mass after every step.
    pub project_mass_sum: bool,
    pub max_iterations: usize,
    /// Std of Gaussian noise on the observed base pitch, rad. Zero disables.
    pub q1_noise: f64,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            eta: 1300.0,
            x_tol: 2e-3,
            consecutive: 10,
            project_mass_sum: true,
            max_iterations: 100_000,
            q1_noise: 0.0,
        }
    }
}

impl LearningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParameter(format!("η must be positive, got {}", self.eta)));
        }
        if !(self.x_tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "x_tol must be positive, got {}",
                self.x_tol
            )));
        }
        if self.consecutive == 0 {
            return Err(Error::InvalidParameter("consecutive count must be at least 1".into()));
        }
        if !(self.q1_noise >= 0.0 && self.q1_noise.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "q1 noise must be non-negative, got {}",
                self.q1_noise
            )));
        }
        Ok(())
    }
}

fn check_dims(phi: &FeatureVector, beta: &BetaVector) -> Result<()> {
    if phi.len() != beta.len() {
        return Err(Error::dims("feature vs beta length", beta.len(), phi.len()));
    }
    Ok(())
}

/// `½ (φᵀβ)²`
pub fn cost(phi: &FeatureVector, beta: &BetaVector) -> Result<f64> {
    check_dims(phi, beta)?;
    let e = phi.predict(beta);
    Ok(0.5 * e * e)
}

/// `φ (φᵀβ)`
pub fn gradient(phi: &FeatureVector, beta: &BetaVector) -> Result<DVector<f64>> {
    check_dims(phi, beta)?;
    Ok(phi.as_vector() * phi.predict(beta))
}

/// `β − η φ (φᵀβ)`, then the mass-sum projection if enabled.
pub fn update(beta: &BetaVector, phi: &FeatureVector, config: &LearningConfig, total_mass: f64) -> Result<BetaVector> {
    let gain = config.eta * phi.norm_squared();
    if gain >= 2.0 {
        log::warn!("η‖φ‖² = {gain:.3} ≥ 2: this step amplifies the error");
    }
    let stepped = BetaVector::from_vector(beta.as_vector() - gradient(phi, beta)? * config.eta);
    if config.project_mass_sum {
        Ok(project_mass_sum(&stepped, total_mass)?.beta)
    } else {
        Ok(stepped)
    }
}

/// One balanced pose as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub pose_id: usize,
    pub phi: FeatureVector,
}

/// Features of a balanced pose whose base pitch is read with Gaussian noise.
pub fn observe<R: Rng + ?Sized>(
    geom: &ChainGeometry,
    pose: &Pose,
    q1_noise: f64,
    rng: &mut R,
) -> Result<FeatureVector> {
    if q1_noise > 0.0 {
        let normal = Normal::new(0.0, q1_noise).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let noisy = pose.with_base_pitch(pose.base_pitch() + normal.sample(rng));
        feature_vector(geom, &noisy)
    } else {
        feature_vector(geom, pose)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearningRecord {
    pub iteration: usize,
    pub pose_id: usize,
    /// `φᵀβ` before the step, m.
    pub pre_error: f64,
    /// `φᵀβ` after the step (and projection), m.
    pub post_error: f64,
    pub mass_sum: f64,
    pub beta_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    StreamExhausted,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta: BetaVector,
    pub trace: Vec<LearningRecord>,
    pub stop: StopReason,
}

/// Applies [`update`] per observation in order. Stops once the pre-update
/// |error| has been below `x_tol` for `consecutive` observations in a row.
///
/// Aborts if the running mean |error| over the last `consecutive`
/// observations exceeds both twice its smallest value and `x_tol`.
pub fn fit<I>(beta0: &BetaVector, stream: I, config: &LearningConfig, total_mass: f64) -> Result<FitResult>
where
    I: IntoIterator<Item = Observation>,
{
    let mut stream = stream.into_iter().peekable();
    if stream.peek().is_none() {
        return Err(Error::EmptyPool);
    }
    fit_from(beta0, |_| Ok(stream.next()), config, total_mass)
}

/// [`fit`] over observations produced on demand from the current
/// estimate; `None` ends the stream.
pub fn fit_from<F>(beta0: &BetaVector, mut next: F, config: &LearningConfig, total_mass: f64) -> Result<FitResult>
where
    F: FnMut(&BetaVector) -> Result<Option<Observation>>,
{
    config.validate()?;
    let mut beta = if config.project_mass_sum {
        project_mass_sum(beta0, total_mass)?.beta
    } else {
        beta0.clone()
    };
    let mut trace = Vec::new();
    let mut window = std::collections::VecDeque::with_capacity(config.consecutive);
    let mut min_mean = f64::INFINITY;
    let mut quiet = 0;

    for iteration in 0.. {
        if iteration >= config.max_iterations {
            return Ok(FitResult {
                beta,
                trace,
                stop: StopReason::MaxIterations,
            });
        }
        let Some(obs) = next(&beta)? else {
            break;
        };
        let pre = obs.phi.predict(&beta);
        beta = update(&beta, &obs.phi, config, total_mass)?;
        let post = obs.phi.predict(&beta);
        trace.push(LearningRecord {
            iteration,
            pose_id: obs.pose_id,
            pre_error: pre,
            post_error: post,
            mass_sum: beta.mass_sum(),
            beta_hash: beta.content_hash(),
        });

        if window.len() == config.consecutive {
            window.pop_front();
        }
        window.push_back(pre.abs());
        if window.len() == config.consecutive {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            min_mean = min_mean.min(mean);
            if !mean.is_finite() || mean > (2.0 * min_mean).max(config.x_tol) {
                return Err(Error::LearningDiverged {
                    iteration,
                    mean,
                    min: min_mean,
                });
            }
        }

        quiet = if pre.abs() < config.x_tol { quiet + 1 } else { 0 };
        if quiet >= config.consecutive {
            return Ok(FitResult {
                beta,
                trace,
                stop: StopReason::Converged,
            });
        }
    }
    Ok(FitResult {
        beta,
        trace,
        stop: StopReason::StreamExhausted,
    })
}

//! Balanced pose pools and greedy pose filtering.
//!
//! Pose filtering walks a pool of balanced poses and, at every step, picks
//! the pose on which an ensemble of wrong β vectors disagrees most with
//! the truth (summed |φᵀβ_k|). Each member then takes one plain gradient
//! step on that pose and the pose is removed.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{feature_vector, solve_balance_angle, ChainGeometry, FeatureVector, Pose};
use crate::mass::{BetaEnsemble, BetaVector};
use crate::seed;

const INFEASIBLE_AFTER: usize = 10_000;
const MIN_ACCEPTANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct PosePool {
    /// One balanced pose per column, `L × n`.
    pub poses: DMatrix<f64>,
    /// `φ` of each pose, `4L × n`.
    pub features: DMatrix<f64>,
    pub seed: u64,
    /// Accepted / drawn during generation.
    pub acceptance_rate: f64,
}

impl PosePool {
    /// Builds a pool from given poses, computing features.
    pub fn from_poses(geom: &ChainGeometry, poses: &[Pose], seed: u64) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mut q = DMatrix::zeros(geom.link_count(), poses.len());
        let mut phi = DMatrix::zeros(geom.param_dim(), poses.len());
        for (i, pose) in poses.iter().enumerate() {
            phi.set_column(i, feature_vector(geom, pose)?.as_vector());
            q.set_column(i, &DVector::from_column_slice(pose.angles()));
        }
        Ok(Self {
            poses: q,
            features: phi,
            seed,
            acceptance_rate: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.ncols() == 0
    }

    pub fn pose(&self, i: usize) -> Pose {
        Pose::new(self.poses.column(i).iter().copied().collect())
    }

    pub fn feature(&self, i: usize) -> FeatureVector {
        FeatureVector::from_vector(self.features.column(i).into_owned())
    }

    /// `φ_iᵀβ` for every pose.
    pub fn errors(&self, beta: &BetaVector) -> DVector<f64> {
        self.features.tr_mul(beta.as_vector())
    }

    pub fn mean_abs_error(&self, beta: &BetaVector) -> f64 {
        let e = self.errors(beta);
        e.iter().map(|v| v.abs()).sum::<f64>() / e.len() as f64
    }

    pub fn max_abs_error(&self, beta: &BetaVector) -> f64 {
        self.errors(beta).iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Draws body joints uniformly within limits, solves the base pitch that
/// balances the chain under `truth` and keeps poses whose base pitch is
/// within its limits.
pub fn generate_pool(geom: &ChainGeometry, truth: &BetaVector, n_poses: usize, rng_seed: u64) -> Result<PosePool> {
    if n_poses == 0 {
        return Err(Error::InvalidParameter("pool needs at least one pose".into()));
    }
    truth.check_links(geom.link_count())?;
    let mut rng = seed::stream(rng_seed, "pool");
    let links = geom.links();
    let mut accepted = Vec::with_capacity(n_poses);
    let mut draws = 0usize;
    while accepted.len() < n_poses {
        draws += 1;
        let mut q: Vec<f64> = vec![0.0];
        q.extend(links[1..].iter().map(|l| rng.random_range(l.lower..=l.upper)));
        let locked = Pose::new(q);
        match solve_balance_angle(geom, &locked, truth) {
            Ok(q1) if q1 >= links[0].lower && q1 <= links[0].upper => {
                accepted.push(locked.with_base_pitch(q1));
            }
            Ok(_) | Err(Error::DegenerateConfiguration(_)) => {}
            Err(e) => return Err(e),
        }
        if draws >= INFEASIBLE_AFTER && (accepted.len() as f64) < MIN_ACCEPTANCE * draws as f64 {
            return Err(Error::PoolGenerationInfeasible {
                accepted: accepted.len(),
                draws,
            });
        }
    }
    let mut pool = PosePool::from_poses(geom, &accepted, rng_seed)?;
    pool.acceptance_rate = n_poses as f64 / draws as f64;
    Ok(pool)
}

fn aggregate_error(features: &DMatrix<f64>, col: usize, betas: &DMatrix<f64>) -> f64 {
    let phi = features.column(col);
    betas.column_iter().map(|b| phi.dot(&b).abs()).sum()
}

/// Among `candidates` (pool column indices), the one maximizing
/// `Σ_k |Φ_iᵀβ_k|`; ties go to the earliest candidate. Returns the
/// position within `candidates` and the aggregate error.
pub fn select_among(features: &DMatrix<f64>, candidates: &[usize], betas: &DMatrix<f64>) -> Result<(usize, f64)> {
    if candidates.is_empty() || betas.ncols() == 0 {
        return Err(Error::EmptyPool);
    }
    if features.nrows() != betas.nrows() {
        return Err(Error::dims(
            "feature rows vs beta length",
            betas.nrows(),
            features.nrows(),
        ));
    }
    let best = candidates
        .par_iter()
        .enumerate()
        .map(|(pos, &col)| (pos, aggregate_error(features, col, betas)))
        .reduce(
            || (usize::MAX, f64::NEG_INFINITY),
            |a, b| {
                if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                    b
                } else {
                    a
                }
            },
        );
    Ok(best)
}

/// `argmax_i Σ_k |Φ_iᵀβ_k|` over every column of `features`.
pub fn select_next(features: &DMatrix<f64>, betas: &DMatrix<f64>) -> Result<(usize, f64)> {
    let all: Vec<usize> = (0..features.ncols()).collect();
    select_among(features, &all, betas)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// `max_k |φ*ᵀβ_k|` at selection time, before the update.
    SelectionTime,
    /// Max over the remaining pool and all members, after the update.
    PoolMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterOptions {
    pub eta: f64,
    pub x_tol: f64,
    pub consecutive: usize,
    pub max_iterations: usize,
    pub termination: Termination,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            eta: 1300.0,
            x_tol: 2e-3,
            consecutive: 10,
            max_iterations: usize::MAX,
            termination: Termination::SelectionTime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    Converged,
    PoolExhausted,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Pool column.
    pub index: usize,
    pub pose: Pose,
    /// `Σ_k |φ*ᵀβ_k|` at selection.
    pub aggregate_error: f64,
    /// `max_k |φ*ᵀβ_k|` at selection.
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredPoses {
    /// In selection order.
    pub selections: Vec<Selection>,
    pub status: FilterStatus,
    pub termination: Termination,
    /// The ensemble after all updates.
    pub betas: DMatrix<f64>,
}

impl FilteredPoses {
    pub fn len(&self) -> usize {
        self.selections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selections.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.selections.iter().map(|s| s.index).collect()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.selections.iter().map(|s| s.pose.clone()).collect()
    }
}

fn check_inputs(pool: &PosePool, ensemble: &BetaEnsemble, opts: &FilterOptions) -> Result<()> {
    if pool.is_empty() || ensemble.is_empty() {
        return Err(Error::EmptyPool);
    }
    if pool.features.nrows() != ensemble.betas.nrows() {
        return Err(Error::dims(
            "ensemble rows",
            pool.features.nrows(),
            ensemble.betas.nrows(),
        ));
    }
    if !(opts.eta > 0.0) || opts.x_tol.is_nan() || !(opts.x_tol > 0.0) || opts.consecutive == 0 {
        return Err(Error::InvalidParameter(format!("bad filter options {opts:?}")));
    }
    let max_gain = pool
        .features
        .column_iter()
        .map(|c| opts.eta * c.norm_squared())
        .fold(0.0, f64::max);
    if max_gain >= 2.0 {
        return Err(Error::InvalidParameter(format!(
            "η‖φ‖² reaches {max_gain:.3} on this pool; plain gradient steps would not contract"
        )));
    }
    Ok(())
}

fn run_filter<F>(pool: &PosePool, ensemble: &BetaEnsemble, opts: &FilterOptions, mut pick: F) -> Result<FilteredPoses>
where
    F: FnMut(&[usize], &DMatrix<f64>) -> Result<usize>,
{
    check_inputs(pool, ensemble, opts)?;
    let mut betas = ensemble.betas.clone();
    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    let mut selections = Vec::new();
    let mut quiet = 0;

    let status = loop {
        if selections.len() >= opts.max_iterations {
            break FilterStatus::MaxIterations;
        }
        let pos = pick(&remaining, &betas)?;
        let index = remaining.remove(pos);
        let phi = pool.features.column(index);
        let errors: DVector<f64> = betas.tr_mul(&phi);
        let max_error = errors.amax();
        selections.push(Selection {
            index,
            pose: pool.pose(index),
            aggregate_error: errors.iter().map(|e| e.abs()).sum(),
            max_error,
        });

        // β_k ← β_k − η φ (φᵀβ_k) for every member at once
        betas.ger(-opts.eta, &phi, &errors, 1.0);

        let check = match opts.termination {
            Termination::SelectionTime => max_error,
            Termination::PoolMax => pool_max_error(&pool.features, &remaining, &betas),
        };
        quiet = if check < opts.x_tol { quiet + 1 } else { 0 };
        if quiet >= opts.consecutive {
            break FilterStatus::Converged;
        }
        if remaining.is_empty() {
            break FilterStatus::PoolExhausted;
        }
    };
    Ok(FilteredPoses {
        selections,
        status,
        termination: opts.termination,
        betas,
    })
}

fn pool_max_error(features: &DMatrix<f64>, cols: &[usize], betas: &DMatrix<f64>) -> f64 {
    cols.par_iter()
        .map(|&c| {
            let phi = features.column(c);
            betas.column_iter().map(|b| phi.dot(&b).abs()).fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

/// Greedy pose filtering over `pool` for `ensemble`.
pub fn filter_poses(pool: &PosePool, ensemble: &BetaEnsemble, opts: &FilterOptions) -> Result<FilteredPoses> {
    run_filter(pool, ensemble, opts, |remaining, betas| {
        Ok(select_among(&pool.features, remaining, betas)?.0)
    })
}

/// Same loop with poses taken in a seeded uniformly random order.
pub fn random_baseline(
    pool: &PosePool,
    ensemble: &BetaEnsemble,
    opts: &FilterOptions,
    rng_seed: u64,
) -> Result<FilteredPoses> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut seed::stream(rng_seed, "baseline"));
    let mut next = order.into_iter();
    run_filter(pool, ensemble, opts, |remaining, _| {
        let index = next.next().ok_or(Error::EmptyPool)?;
        remaining.iter().position(|&c| c == index).ok_or(Error::EmptyPool)
    })
}

//! Center-of-mass identification for a wheeled inverted pendulum humanoid.
//!
//! A planar chain of links sits on a wheel pair. Its mass model β is
//! unknown; the only data are poses at which an ADRC balance controller
//! brought the robot to rest. Each such pose says "the true x-CoM is zero
//! here", which gives one linear equation `φ(q)ᵀβ = 0`. This crate
//! simulates that loop end to end:
//!
//! - [`kinematics`]: forward kinematics, features `φ(q)`, balance angles
//! - [`mass`]: β vectors, perturbation, ensembles, mass-sum projection
//! - [`plant`]: the locked chain as a wheeled inverted pendulum
//! - [`adrc`]: LQR synthesis, extended state observers, balance runs
//! - [`learner`]: gradient descent on β
//! - [`metalearn`]: pose pools and greedy pose filtering
//! - [`harness`]: configuration, CSV output and the experiment commands

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adrc;
pub mod config;
pub mod error;
pub mod harness;
pub mod io;
pub mod kinematics;
pub mod learner;
pub mod mass;
pub mod metalearn;
pub mod plant;
pub mod seed;

pub use error::{Error, Result};

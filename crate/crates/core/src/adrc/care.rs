//! Continuous algebraic Riccati equation and LQR gains.

use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{Error, Result};
use crate::plant::Linearization;

const MAX_NEWTON_ITERATIONS: usize = 200;
const RESIDUAL_TARGET: f64 = 1e-10;

/// Solves `A X + X B = C` through the Kronecker form.
pub fn solve_sylvester(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = (a.nrows(), b.nrows());
    if a.ncols() != n || b.ncols() != m || c.shape() != (n, m) {
        return Err(Error::dims("sylvester operands", n * m, c.len()));
    }
    let eye_n = DMatrix::<f64>::identity(n, n);
    let eye_m = DMatrix::<f64>::identity(m, m);
    let op = eye_m.kronecker(a) + b.transpose().kronecker(&eye_n);
    let rhs = DVector::from_column_slice(c.as_slice());
    let x = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SynthesisFailure("singular Sylvester operator".into()))?;
    Ok(DMatrix::from_column_slice(n, m, x.as_slice()))
}

pub fn max_real_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    max_real_eigenvalue(a) < 0.0
}

/// `‖AᵀP + PA − P B R⁻¹ Bᵀ P + Q‖_F`
pub fn riccati_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let r_inv = r
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(r.nrows(), r.ncols(), f64::NAN));
    (a.transpose() * p + p * a - p * b * r_inv * b.transpose() * p + q).norm()
}

fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

fn check_inputs(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::dims("A columns", n, a.ncols()));
    }
    if b.nrows() != n {
        return Err(Error::dims("B rows", n, b.nrows()));
    }
    if q.shape() != (n, n) {
        return Err(Error::dims("Q size", n * n, q.len()));
    }
    if r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::dims("R size", b.ncols() * b.ncols(), r.len()));
    }
    let scale = 1.0 + q.norm();
    if (q - q.transpose()).norm() > 1e-12 * scale {
        return Err(Error::InvalidParameter("Q is not symmetric".into()));
    }
    if q.clone().symmetric_eigenvalues().min() < -1e-12 * scale {
        return Err(Error::InvalidParameter("Q is not positive semidefinite".into()));
    }
    if (r - r.transpose()).norm() > 1e-12 * (1.0 + r.norm()) || r.clone().cholesky().is_none() {
        return Err(Error::InvalidParameter("R is not symmetric positive definite".into()));
    }
    Ok(())
}

/// A gain making `A − B K` Hurwitz.
///
/// Zero when `A` is already stable, otherwise the pole-shift construction:
/// with `α` above every eigenvalue real part, `(A+αI)W + W(A+αI)ᵀ = 2BBᵀ`
/// and `K = BᵀW⁻¹` moves all closed-loop poles left of `−α`.
fn stabilizing_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if is_hurwitz(a) {
        return Ok(DMatrix::zeros(b.ncols(), n));
    }
    let alpha = a.norm() + 1.0;
    let shifted = a + DMatrix::identity(n, n) * alpha;
    let w = solve_sylvester(&shifted, &shifted.transpose(), &(b * b.transpose() * 2.0))?;
    let w_inv = symmetrize(&w)
        .cholesky()
        .ok_or_else(|| Error::SynthesisFailure("pair (A, B) is not controllable".into()))?
        .inverse();
    let k = b.transpose() * w_inv;
    if !is_hurwitz(&(a - b * &k)) {
        return Err(Error::SynthesisFailure("no stabilizing initial gain".into()));
    }
    Ok(k)
}

/// Stabilizing solution `P` of `AᵀP + PA − P B R⁻¹ Bᵀ P + Q = 0` by
/// Kleinman–Newton iteration.
pub fn solve_care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_inputs(a, b, q, r)?;
    let r_inv = r.clone().cholesky().expect("checked above").inverse();
    let s = b * &r_inv * b.transpose();
    let residual_of = |p: &DMatrix<f64>| a.transpose() * p + p * a - p * &s * p + q;
    let mut k = stabilizing_gain(a, b)?;
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    let keep_best = |best: &mut Option<(f64, DMatrix<f64>)>, p: DMatrix<f64>| -> Result<f64> {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::SynthesisFailure("Newton iteration diverged".into()));
        }
        let residual = residual_of(&p).norm();
        if best.as_ref().is_none_or(|(res, _)| residual < *res) {
            *best = Some((residual, p));
        }
        Ok(residual)
    };

    let mut prev: Option<DMatrix<f64>> = None;
    for _ in 0..MAX_NEWTON_ITERATIONS {
        let closed = a - b * &k;
        let p = symmetrize(&solve_sylvester(
            &closed.transpose(),
            &closed,
            &-(q + k.transpose() * r * &k),
        )?);
        let residual = keep_best(&mut best, p.clone())?;
        let stalled = prev
            .as_ref()
            .is_some_and(|old| (&p - old).norm() <= 4.0 * f64::EPSILON * p.norm());
        if residual < RESIDUAL_TARGET || stalled {
            break;
        }
        k = &r_inv * b.transpose() * &p;
        prev = Some(p);
    }

    // polish: Newton steps on the defect, (A − SP)ᵀΔ + Δ(A − SP) = −Res(P)
    for _ in 0..3 {
        let (residual, p) = best.clone().expect("at least one iteration ran");
        if residual < RESIDUAL_TARGET {
            break;
        }
        let closed = a - &s * &p;
        let delta = solve_sylvester(&closed.transpose(), &closed, &-residual_of(&p))?;
        keep_best(&mut best, symmetrize(&(p + delta)))?;
    }

    let (_, p) = best.expect("at least one iteration ran");
    let gain = &r_inv * b.transpose() * &p;
    if !is_hurwitz(&(a - b * gain)) {
        return Err(Error::SynthesisFailure("Riccati solution is not stabilizing".into()));
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqrWeights {
    /// Diagonal of Q over `[x, ẋ, θ, θ̇]`.
    pub q: [f64; 4],
    pub r: f64,
}

impl Default for LqrWeights {
    fn default() -> Self {
        Self {
            q: [300.0, 100.0, 500.0, 200.0],
            r: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrGains {
    /// Gains on `[x, ẋ]`.
    pub f_x: Vector2<f64>,
    /// Gains on `[θ, θ̇]`.
    pub f_theta: Vector2<f64>,
    pub p: DMatrix<f64>,
}

impl LqrGains {
    pub fn full(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.f_x[0], self.f_x[1], self.f_theta[0], self.f_theta[1]])
    }
}

pub fn lqr_gains(lin: &Linearization, weights: &LqrWeights) -> Result<LqrGains> {
    if !weights.q.iter().all(|v| *v >= 0.0) || !(weights.r > 0.0) {
        return Err(Error::InvalidParameter(format!("bad LQR weights {weights:?}")));
    }
    let a = DMatrix::from_iterator(4, 4, lin.a.iter().copied());
    let b = DMatrix::from_column_slice(4, 1, lin.b.as_slice());
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(&weights.q));
    let r = DMatrix::from_element(1, 1, weights.r);
    let p = solve_care(&a, &b, &q, &r)?;
    let f = b.transpose() * &p / weights.r;
    Ok(LqrGains {
        f_x: Vector2::new(f[0], f[1]),
        f_theta: Vector2::new(f[2], f[3]),
        p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dm(n: usize, m: usize, rows: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(n, m, rows)
    }

    #[test]
    fn double_integrator_textbook_gain() {
        let a = dm(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = dm(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let p = solve_care(&a, &b, &q, &r).unwrap();
        let k = b.transpose() * &p;
        assert!((k[0] - 1.0).abs() < 1e-10);
        assert!((k[1] - 3f64.sqrt()).abs() < 1e-10);
        assert!(riccati_residual(&a, &b, &q, &r, &p) < 1e-10);
        assert!(is_hurwitz(&(&a - &b * &k)));
    }

    #[test]
    fn stable_system_with_zero_weight() {
        let a = dm(2, 2, &[-1.0, 0.5, 0.0, -2.0]);
        let b = dm(2, 1, &[0.0, 1.0]);
        let p = solve_care(&a, &b, &DMatrix::zeros(2, 2), &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(p, DMatrix::zeros(2, 2));
    }

    #[test]
    fn random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-2.0..2.0));
            let b = DMatrix::from_fn(4, 1, |_, _| rng.random_range(-1.0..1.0));
            let q = DMatrix::from_diagonal(&DVector::from_fn(4, |_, _| rng.random_range(0.1..10.0)));
            let r = DMatrix::from_element(1, 1, rng.random_range(0.1..5.0));
            let p = solve_care(&a, &b, &q, &r).unwrap();
            let res = riccati_residual(&a, &b, &q, &r, &p);
            // the quadratic term alone rounds at about ε‖P‖²‖BR⁻¹Bᵀ‖
            let scale = q.norm() + p.norm().powi(2) * (&b * b.transpose()).norm() / r[0];
            assert!(res <= 1e-12 * scale, "residual {res:e}, scale {scale:e}");
            if p.norm() < 1e4 {
                assert!(res < 1e-8);
            }
            assert!(p.clone().symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn uncontrollable_unstable_mode_fails() {
        let a = dm(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = dm(2, 1, &[0.0, 1.0]);
        let r = solve_care(&a, &b, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1));
        assert!(matches!(r, Err(Error::SynthesisFailure(_))));
    }

    #[test]
    fn rejects_bad_weights() {
        let a = dm(1, 1, &[1.0]);
        let b = dm(1, 1, &[1.0]);
        assert!(solve_care(&a, &b, &dm(1, 1, &[-1.0]), &dm(1, 1, &[1.0])).is_err());
        assert!(solve_care(&a, &b, &dm(1, 1, &[1.0]), &dm(1, 1, &[0.0])).is_err());
    }

    #[test]
    fn sylvester_roundtrip() {
        let a = dm(2, 2, &[1.0, 2.0, 0.0, 3.0]);
        let b = dm(3, 3, &[4.0, 0.0, 1.0, 0.0, 5.0, 0.0, 1.0, 0.0, 6.0]);
        let x = dm(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, -1.0]);
        let c = &a * &x + &x * &b;
        assert!((solve_sylvester(&a, &b, &c).unwrap() - x).norm() < 1e-12);
    }
}

//! Third-order extended state observers, one per subsystem.
//!
//! Each channel models its output as a double integrator driven by the
//! control input and a lumped disturbance `f`:
//!
//! ```text
//! d/dt [ŷ, ẏ̂, f̂] = [ẏ̂ + l1 (y − ŷ),  f̂ + l2 (y − ŷ) + b u,  l3 (y − ŷ)]
//! ```

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsoGains {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

/// All three observer poles at `−ω_o`.
pub fn eso_gains(bandwidth: f64) -> Result<EsoGains> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "observer bandwidth must be positive, got {bandwidth}"
        )));
    }
    Ok(EsoGains {
        l1: 3.0 * bandwidth,
        l2: 3.0 * bandwidth * bandwidth,
        l3: bandwidth.powi(3),
    })
}

impl EsoGains {
    /// Estimation-error dynamics `ė = E e` for a constant disturbance.
    pub fn error_dynamics(&self) -> Matrix3<f64> {
        Matrix3::new(-self.l1, 1.0, 0.0, -self.l2, 0.0, 1.0, -self.l3, 0.0, 0.0)
    }

    /// Monic characteristic polynomial `[c2, c1, c0]` of [`Self::error_dynamics`],
    /// built from trace, principal minors and determinant.
    pub fn characteristic_polynomial(&self) -> [f64; 3] {
        let e = self.error_dynamics();
        let minors = (0..3)
            .map(|k| {
                let (i, j) = ((k + 1) % 3, (k + 2) % 3);
                e[(i, i)] * e[(j, j)] - e[(i, j)] * e[(j, i)]
            })
            .sum::<f64>();
        [-e.trace(), minors, -e.determinant()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChannelEstimate {
    pub position: f64,
    pub velocity: f64,
    pub disturbance: f64,
}

impl ChannelEstimate {
    fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.position, self.velocity, self.disturbance)
    }

    fn from_vector(v: Vector3<f64>) -> Self {
        Self {
            position: v[0],
            velocity: v[1],
            disturbance: v[2],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.velocity.is_finite() && self.disturbance.is_finite()
    }
}

/// One channel advanced by a single RK4 step with `y` and `u` held.
pub fn channel_step(est: &ChannelEstimate, gains: &EsoGains, measured: f64, b_u: f64, dt: f64) -> ChannelEstimate {
    let f = |e: Vector3<f64>| {
        let innovation = measured - e[0];
        Vector3::new(
            e[1] + gains.l1 * innovation,
            e[2] + gains.l2 * innovation + b_u,
            gains.l3 * innovation,
        )
    };
    let y = est.to_vector();
    let k1 = f(y);
    let k2 = f(y + k1 * (dt / 2.0));
    let k3 = f(y + k2 * (dt / 2.0));
    let k4 = f(y + k3 * dt);
    ChannelEstimate::from_vector(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsoState {
    pub x: ChannelEstimate,
    pub theta: ChannelEstimate,
    pub gains_x: EsoGains,
    pub gains_theta: EsoGains,
    /// Feed `b·u` into the velocity channel. Off reproduces the
    /// observer equations without input injection.
    pub input_injection: bool,
}

impl EsoState {
    /// Both channels start at the measured positions, at rest, with no
    /// disturbance estimate.
    pub fn new(bandwidth: f64, x: f64, theta: f64, input_injection: bool) -> Result<Self> {
        let gains = eso_gains(bandwidth)?;
        Ok(Self {
            x: ChannelEstimate {
                position: x,
                ..Default::default()
            },
            theta: ChannelEstimate {
                position: theta,
                ..Default::default()
            },
            gains_x: gains,
            gains_theta: gains,
            input_injection,
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn eso_step(
    eso: &EsoState,
    measured_x: f64,
    measured_theta: f64,
    u_x: f64,
    u_theta: f64,
    b_x: f64,
    b_theta: f64,
    dt: f64,
) -> Result<EsoState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "observer step must be positive, got {dt}"
        )));
    }
    let inject = if eso.input_injection { 1.0 } else { 0.0 };
    let x = channel_step(&eso.x, &eso.gains_x, measured_x, inject * b_x * u_x, dt);
    let theta = channel_step(
        &eso.theta,
        &eso.gains_theta,
        measured_theta,
        inject * b_theta * u_theta,
        dt,
    );
    if !x.is_finite() || !theta.is_finite() {
        return Err(Error::ObserverDiverged(format!("x {x:?}, θ {theta:?}")));
    }
    Ok(EsoState { x, theta, ..*eso })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_gains() {
        let g = eso_gains(1.0).unwrap();
        assert_eq!((g.l1, g.l2, g.l3), (3.0, 3.0, 1.0));
        let g = eso_gains(10.0).unwrap();
        assert_eq!((g.l1, g.l2, g.l3), (30.0, 300.0, 1000.0));
        assert!(eso_gains(0.0).is_err());
        assert!(eso_gains(-5.0).is_err());
    }

    #[test]
    fn polynomial_is_triple_pole() {
        for w in [1.0, 10.0, 50.0, 100.0] {
            let c = eso_gains(w).unwrap().characteristic_polynomial();
            let expected = [3.0 * w, 3.0 * w * w, w * w * w];
            for (got, want) in c.iter().zip(expected) {
                assert!((got - want).abs() <= 1e-12 * want);
            }
        }
    }

    #[test]
    fn quiet_observer_stays_put() {
        let mut eso = EsoState::new(50.0, 0.3, -0.1, true).unwrap();
        eso.theta.disturbance = 2.5;
        eso.theta.velocity = 0.0;
        // consistent state: no innovation, and f̂ exactly balanced by −b·u
        let b = 0.5;
        let next = eso_step(&eso, 0.3, -0.1, 0.0, -2.5 / b, 1.0, b, 1e-3).unwrap();
        assert_eq!(next.theta.disturbance, 2.5);
        assert_eq!(next.x, eso.x);
    }

    #[test]
    fn injection_flag_drops_input() {
        let eso = EsoState::new(50.0, 0.0, 0.0, false).unwrap();
        let next = eso_step(&eso, 0.0, 0.0, 10.0, 10.0, 1.0, 1.0, 1e-3).unwrap();
        assert_eq!(next, eso);
    }
}

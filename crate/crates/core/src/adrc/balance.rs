//! Feedback-linearizing torque law and the closed-loop balance experiment.

use serde::{Deserialize, Serialize};

use super::care::{lqr_gains, LqrGains, LqrWeights};
use super::observer::{eso_step, EsoState};
use crate::error::{Error, Result};
use crate::kinematics::{feature_vector, solve_balance_angle, ChainGeometry, Pose, WheelParams};
use crate::mass::BetaVector;
use crate::plant::{aggregate, AggregateBody, WipPlant, WipState, MAX_STEP};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub q: [f64; 4],
    pub r: f64,
    /// Observer bandwidth ω_o, rad/s.
    pub observer_bandwidth: f64,
    /// N·m
    pub torque_limit: f64,
    /// Hz
    pub control_rate: f64,
    /// Subtract `f̂/b` in the torque law.
    pub compensation: bool,
    pub input_injection: bool,
    /// Feed the true plant rates to the gains instead of the observer's.
    pub true_rates: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let w = LqrWeights::default();
        Self {
            q: w.q,
            r: w.r,
            observer_bandwidth: 50.0,
            torque_limit: 60.0,
            control_rate: 1000.0,
            compensation: true,
            input_injection: true,
            true_rates: false,
        }
    }
}

impl ControllerConfig {
    pub fn weights(&self) -> LqrWeights {
        LqrWeights { q: self.q, r: self.r }
    }

    pub fn period(&self) -> f64 {
        1.0 / self.control_rate
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.control_rate > 0.0) || self.period() > MAX_STEP {
            return Err(Error::InvalidParameter(format!(
                "control rate must be at least {} Hz, got {}",
                1.0 / MAX_STEP,
                self.control_rate
            )));
        }
        if !(self.torque_limit > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "torque limit must be positive, got {}",
                self.torque_limit
            )));
        }
        if !(self.observer_bandwidth > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "observer bandwidth must be positive, got {}",
                self.observer_bandwidth
            )));
        }
        Ok(())
    }
}

/// State fed to the gains: measured positions with estimated (or true) rates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Feedback {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct References {
    pub x: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorqueCommand {
    pub tau: f64,
    pub u_x: f64,
    pub u_theta: f64,
    pub saturated: bool,
}

/// `τ_w = (u_x − f̂_x/b_x) + (u_θ − f̂_θ/b_θ)`, clipped to `±torque_limit`.
#[allow(clippy::too_many_arguments)]
pub fn adrc_torque(
    gains: &LqrGains,
    eso: &EsoState,
    feedback: &Feedback,
    refs: &References,
    b_x: f64,
    b_theta: f64,
    compensation: bool,
    torque_limit: f64,
) -> Result<TorqueCommand> {
    if !(b_x.abs() > 1e-9 && b_theta.abs() > 1e-9) {
        return Err(Error::InvalidParameter(format!(
            "input gains too small: b_x = {b_x:e}, b_θ = {b_theta:e}"
        )));
    }
    let u_x = -(gains.f_x[0] * (feedback.x - refs.x) + gains.f_x[1] * feedback.x_dot);
    let u_theta = -(gains.f_theta[0] * (feedback.theta - refs.theta) + gains.f_theta[1] * feedback.theta_dot);
    let mut tau = u_x + u_theta;
    if compensation {
        tau -= eso.x.disturbance / b_x + eso.theta.disturbance / b_theta;
    }
    let saturated = tau.abs() > torque_limit;
    Ok(TorqueCommand {
        tau: tau.clamp(-torque_limit, torque_limit),
        u_x,
        u_theta,
        saturated,
    })
}

/// LQR gains plus observers, built from a (possibly wrong) body model.
#[derive(Debug, Clone)]
pub struct AdrcController {
    config: ControllerConfig,
    gains: LqrGains,
    b_x: f64,
    b_theta: f64,
    eso: EsoState,
}

impl AdrcController {
    pub fn new(
        model: &AggregateBody,
        wheel: &WheelParams,
        config: &ControllerConfig,
        x0: f64,
        theta0: f64,
    ) -> Result<Self> {
        config.validate()?;
        let lin = WipPlant::new(*model, *wheel)?.linearize();
        let gains = lqr_gains(&lin, &config.weights())?;
        Ok(Self {
            config: *config,
            gains,
            b_x: lin.b_x,
            b_theta: lin.b_theta,
            eso: EsoState::new(config.observer_bandwidth, x0, theta0, config.input_injection)?,
        })
    }

    pub fn gains(&self) -> &LqrGains {
        &self.gains
    }

    pub fn observer(&self) -> &EsoState {
        &self.eso
    }

    /// `true_rates` is used only when the config asks for it.
    pub fn command(&self, x: f64, theta: f64, true_rates: (f64, f64)) -> Result<TorqueCommand> {
        let (x_dot, theta_dot) = if self.config.true_rates {
            true_rates
        } else {
            (self.eso.x.velocity, self.eso.theta.velocity)
        };
        let feedback = Feedback {
            x,
            x_dot,
            theta,
            theta_dot,
        };
        adrc_torque(
            &self.gains,
            &self.eso,
            &feedback,
            &References::default(),
            self.b_x,
            self.b_theta,
            self.config.compensation,
            self.config.torque_limit,
        )
    }

    pub fn observe(&mut self, x: f64, theta: f64, cmd: &TorqueCommand) -> Result<()> {
        self.eso = eso_step(
            &self.eso,
            x,
            theta,
            cmd.u_x,
            cmd.u_theta,
            self.b_x,
            self.b_theta,
            self.config.period(),
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceOptions {
    /// s
    pub duration: f64,
    /// Rate threshold on both |θ̇| and |ẋ| for "settled".
    pub settle_rate: f64,
    /// How long the rates must stay below threshold, s.
    pub settle_hold: f64,
    /// Allowed true |x_com| at the settled pose, m.
    pub balance_tolerance: f64,
    /// Keep every n-th sample in the trace; 0 keeps none.
    pub trace_stride: usize,
}

impl Default for BalanceOptions {
    fn default() -> Self {
        Self {
            duration: 60.0,
            settle_rate: 1e-4,
            settle_hold: 1.0,
            balance_tolerance: 1e-3,
            trace_stride: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub state: WipState,
    pub tau: f64,
    pub f_x_hat: f64,
    pub f_theta_hat: f64,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceOutcome {
    pub trace: Vec<TraceRow>,
    /// Locked pose with the base pitch the closed loop came to rest at.
    pub settled_pose: Pose,
    pub settle_time: f64,
    pub peak_torque: f64,
    pub saturated_steps: usize,
    pub final_state: WipState,
    /// Balance angle under the truth, for reference.
    pub true_balance_angle: f64,
    /// Balance angle the controller started from.
    pub estimated_balance_angle: f64,
    /// True x_com at the settled pose, m.
    pub true_x_com: f64,
}

/// Puts the robot at the balance angle predicted by `estimate` and lets
/// the ADRC loop (designed from `estimate`) bring the true plant to rest.
pub fn balance_run(
    geom: &ChainGeometry,
    truth: &BetaVector,
    estimate: &BetaVector,
    locked: &Pose,
    controller: &ControllerConfig,
    opts: &BalanceOptions,
) -> Result<BalanceOutcome> {
    controller.validate()?;
    if !(opts.duration > opts.settle_hold && opts.settle_hold > 0.0 && opts.settle_rate > 0.0) {
        return Err(Error::InvalidParameter(format!("bad balance options {opts:?}")));
    }
    let q1_true = solve_balance_angle(geom, locked, truth)?;
    let q1_est = solve_balance_angle(geom, locked, estimate)?;
    let start = locked.with_base_pitch(q1_est);

    let plant = WipPlant::new(aggregate(geom, &start, truth)?, *geom.wheel())?;
    let model = aggregate(geom, &start, estimate)?;
    // pitch error between what the controller believes and the real CoM line
    let theta_real0 = plant.body.balance_offset;
    let belief_shift = theta_real0 - model.balance_offset;

    let mut state = WipState::new(0.0, 0.0, theta_real0, 0.0);
    let mut ctrl = AdrcController::new(&model, geom.wheel(), controller, 0.0, theta_real0 - belief_shift)?;

    let dt = controller.period();
    let steps = (opts.duration / dt).round() as usize;
    let hold_steps = (opts.settle_hold / dt).round() as usize;
    let mut trace = Vec::new();
    let (mut peak, mut saturated_steps, mut quiet) = (0.0f64, 0usize, 0usize);

    for k in 0..steps {
        let t = k as f64 * dt;
        let measured_theta = state.theta - belief_shift;
        let cmd = ctrl.command(state.x, measured_theta, (state.x_dot, state.theta_dot))?;
        peak = peak.max(cmd.tau.abs());
        saturated_steps += cmd.saturated as usize;
        if opts.trace_stride > 0 && k % opts.trace_stride == 0 {
            trace.push(TraceRow {
                t,
                state,
                tau: cmd.tau,
                f_x_hat: ctrl.observer().x.disturbance,
                f_theta_hat: ctrl.observer().theta.disturbance,
                saturated: cmd.saturated,
            });
        }
        ctrl.observe(state.x, measured_theta, &cmd)?;
        state = plant.step(&state, cmd.tau, 0.0, dt).map_err(|e| match e {
            Error::SimulationDiverged(msg) => Error::SimulationDiverged(format!("t = {t:.3} s: {msg}")),
            other => other,
        })?;
        if state.theta.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::SimulationDiverged(format!(
                "robot fell at t = {:.3} s (θ = {:.3} rad)",
                t + dt,
                state.theta
            )));
        }
        if state.theta_dot.abs() < opts.settle_rate && state.x_dot.abs() < opts.settle_rate {
            quiet += 1;
        } else {
            quiet = 0;
        }
        if quiet >= hold_steps {
            let settled_pose = locked.with_base_pitch(q1_true + state.theta);
            let true_x_com = feature_vector(geom, &settled_pose)?.predict(truth);
            if true_x_com.abs() >= opts.balance_tolerance {
                return Err(Error::Unbalanced(true_x_com));
            }
            return Ok(BalanceOutcome {
                trace,
                settled_pose,
                settle_time: (k + 1) as f64 * dt - opts.settle_hold,
                peak_torque: peak,
                saturated_steps,
                final_state: state,
                true_balance_angle: q1_true,
                estimated_balance_angle: q1_est,
                true_x_com,
            });
        }
    }
    Err(Error::BalanceTimeout(opts.duration))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adrc::observer::ChannelEstimate;
    use nalgebra::Vector2;

    fn unit_gains() -> LqrGains {
        LqrGains {
            f_x: Vector2::new(1.0, 2.0),
            f_theta: Vector2::new(3.0, 4.0),
            p: nalgebra::DMatrix::zeros(4, 4),
        }
    }

    #[test]
    fn zero_error_zero_torque() {
        let eso = EsoState::new(50.0, 0.0, 0.0, true).unwrap();
        let cmd = adrc_torque(
            &unit_gains(),
            &eso,
            &Feedback::default(),
            &References::default(),
            0.5,
            -0.2,
            true,
            60.0,
        )
        .unwrap();
        assert_eq!(cmd.tau, 0.0);
        assert!(!cmd.saturated);
    }

    #[test]
    fn compensation_cancels_disturbance_estimate() {
        let (b_x, b_theta, c) = (0.5, -0.2, 1.7);
        let mut eso = EsoState::new(50.0, 0.0, 0.0, true).unwrap();
        eso.theta = ChannelEstimate {
            disturbance: b_theta * c,
            ..Default::default()
        };
        let cmd = adrc_torque(
            &unit_gains(),
            &eso,
            &Feedback::default(),
            &References::default(),
            b_x,
            b_theta,
            true,
            60.0,
        )
        .unwrap();
        assert!((cmd.tau + c).abs() < 1e-15);
    }

    #[test]
    fn saturation_is_flagged() {
        let eso = EsoState::new(50.0, 0.0, 0.0, true).unwrap();
        let fb = Feedback {
            theta: 100.0,
            ..Default::default()
        };
        let cmd = adrc_torque(&unit_gains(), &eso, &fb, &References::default(), 0.5, -0.2, true, 60.0).unwrap();
        assert_eq!(cmd.tau, -60.0);
        assert!(cmd.saturated);
    }

    #[test]
    fn tiny_input_gain_rejected() {
        let eso = EsoState::new(50.0, 0.0, 0.0, true).unwrap();
        let r = adrc_torque(
            &unit_gains(),
            &eso,
            &Feedback::default(),
            &References::default(),
            1e-12,
            1.0,
            true,
            60.0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn slow_control_rate_rejected() {
        let cfg = ControllerConfig {
            control_rate: 50.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}

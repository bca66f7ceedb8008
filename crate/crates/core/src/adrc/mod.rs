//! Pose-dependent LQR, extended state observers and the ADRC torque law.

mod balance;
mod care;
mod observer;

pub use balance::{
    adrc_torque, balance_run, AdrcController, BalanceOptions, BalanceOutcome, ControllerConfig, Feedback, References,
    TorqueCommand, TraceRow,
};
pub use care::{
    is_hurwitz, lqr_gains, max_real_eigenvalue, riccati_residual, solve_care, solve_sylvester, LqrGains, LqrWeights,
};
pub use observer::{channel_step, eso_gains, eso_step, ChannelEstimate, EsoGains, EsoState};

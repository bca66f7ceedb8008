use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("degenerate body: axle-to-CoM distance {0:e} m")]
    DegenerateBody(f64),

    #[error("numeric degeneracy: {0}")]
    NumericDegeneracy(String),

    #[error("simulation diverged: {0}")]
    SimulationDiverged(String),

    #[error("observer diverged: {0}")]
    ObserverDiverged(String),

    #[error("LQR synthesis failed: {0}")]
    SynthesisFailure(String),

    #[error("closed loop did not settle within {0} s")]
    BalanceTimeout(f64),

    #[error("settled pose is not balanced: true x_com = {0:e} m")]
    Unbalanced(f64),

    #[error("no β within the target error window after {0} consecutive rejections")]
    InfeasibleTarget(usize),

    #[error("pose pool generation infeasible: {accepted} accepted out of {draws} draws")]
    PoolGenerationInfeasible { accepted: usize, draws: usize },

    #[error("empty pose pool")]
    EmptyPool,

    #[error("learning diverged at iteration {iteration}: running mean error {mean:e} m (minimum {min:e} m)")]
    LearningDiverged { iteration: usize, mean: f64, min: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(what: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch { what, expected, got }
    }
}

use thiserror::Error;

/// Errors raised by the coagulation engine.
#[derive(Debug, Error)]
pub enum CoagError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("compaction error: particle {index} at |x| = {norm} lies outside the grid coverage [{lo}, {hi}]")]
    Compaction {
        index: usize,
        norm: f64,
        lo: f64,
        hi: f64,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("degenerate kernel: sup of K over the band is zero")]
    DegenerateKernel,

    #[error("non-uniform time grid: {0}")]
    NonUniformGrid(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("Picard iteration did not contract within {iterations} iterations (distances {distances:?})")]
    NonContraction {
        iterations: usize,
        distances: Vec<f64>,
    },

    #[error("step size underflow at t = {t}: h = {h}")]
    Stiffness { t: f64, h: f64 },

    #[error("majorant violation: K/(2 c2 w(x) w(y)) = {ratio} > 1 at |x| = {x}, |y| = {y}")]
    Majorant { ratio: f64, x: f64, y: f64 },

    #[error("no shared record times between trajectories")]
    NoSharedTimes,

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoagError>;

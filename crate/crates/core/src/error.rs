use thiserror::Error;

/// Errors produced by the reachability toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid activation schedule {spec:?} at position {position}: {reason}")]
    Schedule {
        spec: String,
        position: usize,
        reason: String,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input {index} = {value} outside bound [-{bound}, {bound}]")]
    InputOutOfBounds { index: usize, value: f64, bound: f64 },

    #[error("coordinate {dim} = {value} outside box [{lo}, {hi}]")]
    OutOfBox {
        dim: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("unknown system {0:?} (expected air3d, vehicles6d or vehicles9d)")]
    UnknownSystem(String),

    #[error("config: {0}")]
    Config(String),

    #[error("CFL condition violated: dt * sum(alpha_i / dx_i) = {0:.4} > 0.8")]
    Cfl(f64),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("training diverged at iteration {iteration}: non-finite loss")]
    Diverged { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

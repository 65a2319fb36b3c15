use thiserror::Error;

/// Errors produced by the mesh, spectral and time-stepping layers.
#[derive(Debug, Error)]
pub enum AlpError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("mesh parse error at line {line}: {msg}")]
    MeshParse { line: usize, msg: String },

    #[error("field/mesh mismatch: field has {field_len} values, mesh has {mesh_len} nodes")]
    MeshMismatch { field_len: usize, mesh_len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("eigensolver failure: {0}")]
    EigenFailure(String),

    #[error("linear solve failure: {0}")]
    SolveFailure(String),

    #[error("ill-conditioned system: condition estimate {cond:.3e} exceeds {limit:.1e}")]
    IllConditioned { cond: f64, limit: f64 },

    #[error("chi calibration failed: best chi {chi:.6e} gives error {error:.6e} > tolerance {tol:.6e}")]
    CalibrationFailure { chi: f64, error: f64, tol: f64 },

    #[error("rank deficiency during reorthonormalization at mode {mode}")]
    RankDeficient { mode: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AlpError>;

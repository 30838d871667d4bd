//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// File content does not follow the expected encoding (bad magic, bad header).
    #[error("format error: {0}")]
    Format(String),

    /// Two inputs that must agree do not (e.g. image/label counts).
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The composed affine matrix is numerically singular.
    #[error("degenerate transform: |det| = {det:e} below threshold")]
    DegenerateTransform { det: f64 },

    /// A sampler exceeded the resample cap without producing a feasible point.
    #[error("infeasible sampling: {attempts} consecutive draws left the constraint set")]
    InfeasibleSampling { attempts: u32 },

    /// Training produced a non-finite loss.
    #[error("divergence: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Process exit code category: 1 usage/config, 2 data/io, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io(_)
            | Error::Format(_)
            | Error::Consistency(_)
            | Error::Bounds(_)
            | Error::Shape(_)
            | Error::Checkpoint(_) => 2,
            Error::DegenerateTransform { .. }
            | Error::InfeasibleSampling { .. }
            | Error::Divergence(_) => 3,
        }
    }
}

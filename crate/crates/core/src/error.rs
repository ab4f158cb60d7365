use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sample set")]
    EmptySamples,

    #[error("dimension {dim} is degenerate: fewer than two distinct values")]
    DegenerateDimension { dim: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite action value at timestep {step}, dimension {dim}")]
    NonFinite { step: usize, dim: usize },

    #[error("gripper value {value} at timestep {step} is not exactly 0 or 1")]
    InvalidGripper { step: usize, value: f64 },

    #[error("token {token} at position {position} cannot be decoded")]
    UndecodableToken { position: usize, token: u32 },

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("timestep {0} outside (0, 1]")]
    InvalidTimestep(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (t = {timesteps:?}, mask fraction {mask_fraction:.4})")]
    NonFiniteLoss {
        step: u64,
        timesteps: Vec<f64>,
        mask_fraction: f64,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("expert failed to reach the goal in episode {episode}")]
    ExpertFailed { episode: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

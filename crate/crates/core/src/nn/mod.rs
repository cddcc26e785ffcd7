//! Multilayer perceptrons, Adam, plateau LR decay, and parameter files.

mod adam;
mod mlp;
mod params;
mod schedule;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mlp::{Activation, BoundMlp, Mlp, MlpForward, MlpSpec, OutputActivation};
pub use params::{ParamSet, ParamTensor, PARAM_FORMAT_VERSION};
pub use schedule::{PlateauConfig, PlateauSchedule};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AdError),
    #[error("invalid mlp spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite gradient for parameter `{0}`; step aborted")]
    NonFiniteGradient(String),
    #[error("parameter file version {got}, expected {expected}")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShapeMismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("failed to parse parameter file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

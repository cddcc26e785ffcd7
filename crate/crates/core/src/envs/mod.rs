//! Two synthetic partially observed control environments with scripted
//! experts.
//!
//! Both withhold the agent's velocity from the observation, so a single frame
//! is non-Markov while two consecutive frames determine the velocity exactly.
//! Expert actions are rate-limited and therefore smooth. Those two properties
//! together are what make history-conditioned cloning prone to the copycat
//! shortcut.

pub mod braketown;
pub mod hidden_velocity;

pub use braketown::{BrakeTownConfig, BrakeTownEnv, BrakeTownExpert, ObsMode, TrafficLevel};
pub use hidden_velocity::{HiddenVelocityConfig, HiddenVelocityEnv, HiddenVelocityExpert};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("step called after the episode terminated (status {0:?})")]
    StepAfterTerminal(Status),
    #[error("action has {got} dims, environment expects {expected}")]
    ActionDims { got: usize, expected: usize },
    #[error("expert/environment kind mismatch")]
    KindMismatch,
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Success,
    Collision,
    Timeout,
}

/// Terminal record of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub status: Status,
    pub steps: usize,
    pub ret: f64,
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Environment selection plus all parameters, as stored in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "snake_case")]
pub enum EnvConfig {
    Braketown(BrakeTownConfig),
    HiddenVelocity(HiddenVelocityConfig),
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            EnvConfig::Braketown(c) => c.validate(),
            EnvConfig::HiddenVelocity(c) => c.validate(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            EnvConfig::Braketown(c) => c.obs_dim(),
            EnvConfig::HiddenVelocity(c) => c.obs_dim(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            EnvConfig::Braketown(_) => 1,
            EnvConfig::HiddenVelocity(c) => c.dims,
        }
    }

    pub fn make(&self) -> EnvInstance {
        match self {
            EnvConfig::Braketown(c) => EnvInstance::Braketown(BrakeTownEnv::new(c.clone())),
            EnvConfig::HiddenVelocity(c) => {
                EnvInstance::HiddenVelocity(HiddenVelocityEnv::new(c.clone()))
            }
        }
    }

    pub fn make_expert(&self) -> ExpertInstance {
        match self {
            EnvConfig::Braketown(c) => ExpertInstance::Braketown(BrakeTownExpert::new(c.clone())),
            EnvConfig::HiddenVelocity(c) => {
                ExpertInstance::HiddenVelocity(HiddenVelocityExpert::new(c.clone()))
            }
        }
    }

    /// Stable hash of the resolved config, embedded in dataset headers.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A live environment of either kind.
pub enum EnvInstance {
    Braketown(BrakeTownEnv),
    HiddenVelocity(HiddenVelocityEnv),
}

impl EnvInstance {
    pub fn reset(&mut self, episode_seed: u64) -> Vec<f64> {
        match self {
            EnvInstance::Braketown(e) => e.reset(episode_seed),
            EnvInstance::HiddenVelocity(e) => e.reset(episode_seed),
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Step> {
        match self {
            EnvInstance::Braketown(e) => e.step(action),
            EnvInstance::HiddenVelocity(e) => e.step(action),
        }
    }

    pub fn outcome(&self) -> Option<EpisodeOutcome> {
        match self {
            EnvInstance::Braketown(e) => e.outcome(),
            EnvInstance::HiddenVelocity(e) => e.outcome(),
        }
    }

    /// Privileged velocity readout, for analysis and auxiliary labels only.
    /// Never part of any observation.
    pub fn hidden_velocity(&self) -> Vec<f64> {
        match self {
            EnvInstance::Braketown(e) => vec![e.velocity()],
            EnvInstance::HiddenVelocity(e) => e.velocity().to_vec(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            EnvInstance::Braketown(_) => 1,
            EnvInstance::HiddenVelocity(e) => e.cfg().dims,
        }
    }
}

/// A scripted expert of either kind. Experts are privileged: they read the
/// full environment state, not the observation.
pub enum ExpertInstance {
    Braketown(BrakeTownExpert),
    HiddenVelocity(HiddenVelocityExpert),
}

impl ExpertInstance {
    pub fn reset(&mut self) {
        match self {
            ExpertInstance::Braketown(e) => e.reset(),
            ExpertInstance::HiddenVelocity(e) => e.reset(),
        }
    }

    pub fn act(&mut self, env: &EnvInstance) -> Result<Vec<f64>> {
        match (self, env) {
            (ExpertInstance::Braketown(x), EnvInstance::Braketown(e)) => Ok(vec![x.act(e)]),
            (ExpertInstance::HiddenVelocity(x), EnvInstance::HiddenVelocity(e)) => Ok(x.act(e)),
            _ => Err(EnvError::KindMismatch),
        }
    }
}

pub(crate) fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

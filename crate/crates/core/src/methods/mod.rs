//! Training methods and ablations.
//!
//! Single-stream cloning (`bcso`, `bcoh`) and its patched variants (`hd`
//! history dropout, `fca` adversarial previous-action removal, `keyframe`
//! sample reweighting, `dagger` expert relabeling) share one trainer and one
//! loss path, so that disabling each patch (p=0, lambda=0, kappa=0) collapses
//! to `bcoh` bit-exactly under a shared seed. The two-stream family (`ours`
//! and its ablations) trains a memory extraction stream on action residuals
//! and fuses its feature into the policy stream through a stop-gradient.
//!
//! Randomness is drawn from name-keyed streams (`init/<net>`, `batches`,
//! `dropout`), so adding a network or a mask never perturbs the shared ones.

mod data;
mod dagger;
mod single;
#[cfg(test)]
mod tests;
mod two_stream;

pub use dagger::{train_dagger, DaggerStats, WindowBuffer};
pub use data::keyframe_weights;
pub use single::SingleStreamNet;
pub use two_stream::{MemoryNet, PolicyStreamNet, TwoStreamHandles};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demos::{DemoDataset, DemoError};
use crate::envs::EnvConfig;
use crate::nn::{AdamConfig, Mlp, NnError, PlateauConfig};

pub const POLICY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MethodError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AdError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    #[error("method {kind:?} requires H >= 1, got {h}")]
    NeedsHistory { kind: MethodKind, h: usize },
    #[error("bcso requires H = 0, got {0}")]
    BcsoNeedsSingleObs(usize),
    #[error("config H = {config}, dataset stacked with H = {dataset}")]
    HistoryMismatch { config: usize, dataset: usize },
    #[error("invalid method config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iter}: loss {loss}")]
    Diverged { iter: u64, loss: f64 },
    #[error("{kind:?} does not use a previous executed action")]
    UnexpectedPrevAction { kind: MethodKind },
    #[error("memory-only residual controller needs the previous executed action")]
    MissingPrevAction,
    #[error("input has {got} values, policy expects {expected}")]
    InputDims { got: usize, expected: usize },
    #[error("policy file version {got}, expected {expected}")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("failed to parse policy file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MethodError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Bcso,
    Bcoh,
    Ours,
    Hd,
    Fca,
    Keyframe,
    Dagger,
    MemoryOnlyResidual,
    MemoryOnlyLearned,
    MemoryObjAt,
    MemoryObjAprev,
    OursNoStopgrad,
    OursMultibranch,
    TwoStreamBcoh,
    TwoStreamKeyframe,
}

impl MethodKind {
    pub fn is_two_stream(self) -> bool {
        matches!(
            self,
            MethodKind::Ours
                | MethodKind::MemoryObjAt
                | MethodKind::MemoryObjAprev
                | MethodKind::OursNoStopgrad
                | MethodKind::OursMultibranch
                | MethodKind::TwoStreamBcoh
                | MethodKind::TwoStreamKeyframe
        )
    }

    pub fn is_memory_only(self) -> bool {
        matches!(
            self,
            MethodKind::MemoryOnlyResidual | MethodKind::MemoryOnlyLearned
        )
    }

    pub fn needs_history(self) -> bool {
        !matches!(self, MethodKind::Bcso)
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Bcso => "bcso",
            MethodKind::Bcoh => "bcoh",
            MethodKind::Ours => "ours",
            MethodKind::Hd => "hd",
            MethodKind::Fca => "fca",
            MethodKind::Keyframe => "keyframe",
            MethodKind::Dagger => "dagger",
            MethodKind::MemoryOnlyResidual => "memory_only_residual",
            MethodKind::MemoryOnlyLearned => "memory_only_learned",
            MethodKind::MemoryObjAt => "memory_obj_at",
            MethodKind::MemoryObjAprev => "memory_obj_aprev",
            MethodKind::OursNoStopgrad => "ours_no_stopgrad",
            MethodKind::OursMultibranch => "ours_multibranch",
            MethodKind::TwoStreamBcoh => "two_stream_bcoh",
            MethodKind::TwoStreamKeyframe => "two_stream_keyframe",
        }
    }
}

impl std::str::FromStr for MethodKind {
    type Err = MethodError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "bcso" => MethodKind::Bcso,
            "bcoh" => MethodKind::Bcoh,
            "ours" => MethodKind::Ours,
            "hd" => MethodKind::Hd,
            "fca" => MethodKind::Fca,
            "keyframe" => MethodKind::Keyframe,
            "dagger" => MethodKind::Dagger,
            "memory_only_residual" => MethodKind::MemoryOnlyResidual,
            "memory_only_learned" => MethodKind::MemoryOnlyLearned,
            "memory_obj_at" => MethodKind::MemoryObjAt,
            "memory_obj_aprev" => MethodKind::MemoryObjAprev,
            "ours_no_stopgrad" => MethodKind::OursNoStopgrad,
            "ours_multibranch" => MethodKind::OursMultibranch,
            "two_stream_bcoh" => MethodKind::TwoStreamBcoh,
            "two_stream_keyframe" => MethodKind::TwoStreamKeyframe,
            other => return Err(MethodError::InvalidConfig(format!("unknown method `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub kind: MethodKind,
    pub h: usize,
    /// Hidden width of every stream.
    pub hidden: usize,
    /// Memory feature width m_t.
    pub m_dim: usize,
    pub loss: LossKind,
    /// Weight of the action loss; 1 - alpha goes to the velocity head.
    pub alpha: f64,
    pub aux_velocity_head: bool,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: PlateauConfig,
    pub adam: AdamConfig,
    /// Validation cadence in iterations.
    pub val_every: u64,
    /// hd: probability of zeroing each past frame.
    pub dropout_p: f64,
    /// fca: gradient reversal strength.
    pub fca_lambda: f64,
    /// fca: adversary updates per encoder update.
    pub fca_adv_steps: u32,
    /// keyframe: weight slope on ||a_t - a_{t-1}||_1.
    pub keyframe_kappa: f64,
    pub dagger_rounds: u32,
    pub dagger_episodes_per_round: u32,
    pub dagger_query_budget: u64,
    /// ours_multibranch: branch i of 1..=branches targets a_t - a_{t-i}.
    pub branches: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            kind: MethodKind::Bcoh,
            h: 6,
            hidden: 64,
            m_dim: 32,
            loss: LossKind::L1,
            alpha: 0.95,
            aux_velocity_head: true,
            iterations: 4000,
            batch_size: 64,
            seed: 0,
            lr: PlateauConfig {
                initial_lr: 1e-3,
                decay_threshold: 1200,
                decay_rate: 0.1,
                lower_bound: 1e-7,
            },
            adam: AdamConfig::default(),
            val_every: 50,
            dropout_p: 0.5,
            fca_lambda: 0.5,
            fca_adv_steps: 1,
            keyframe_kappa: 10.0,
            dagger_rounds: 5,
            dagger_episodes_per_round: 20,
            dagger_query_budget: 20_000,
            branches: 1,
        }
    }
}

impl MethodConfig {
    /// Defaults for the driving-style environment: L1 loss, speed
    /// regularization on, H = 6.
    pub fn braketown(kind: MethodKind, seed: u64) -> Self {
        let mut cfg = MethodConfig {
            kind,
            seed,
            ..MethodConfig::default()
        };
        if kind == MethodKind::Bcso {
            cfg.h = 0;
        }
        cfg
    }

    /// Defaults for the tracking environment: L2 loss, no velocity head,
    /// weight decay 0.03, H = 1.
    pub fn hidden_velocity(kind: MethodKind, seed: u64) -> Self {
        let mut cfg = MethodConfig {
            kind,
            seed,
            h: 1,
            loss: LossKind::L2,
            alpha: 1.0,
            aux_velocity_head: false,
            iterations: 3000,
            adam: AdamConfig {
                weight_decay: 0.03,
                ..AdamConfig::default()
            },
            ..MethodConfig::default()
        };
        if kind == MethodKind::Bcso {
            cfg.h = 0;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == MethodKind::Bcso && self.h != 0 {
            return Err(MethodError::BcsoNeedsSingleObs(self.h));
        }
        if self.kind.needs_history() && self.h == 0 {
            return Err(MethodError::NeedsHistory {
                kind: self.kind,
                h: self.h,
            });
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(MethodError::InvalidConfig(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.branches == 0 {
            return Err(MethodError::InvalidConfig("branches must be >= 1".into()));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(MethodError::InvalidConfig(
                "batch_size and iterations must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(MethodError::InvalidConfig(format!(
                "dropout_p must be in [0, 1], got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Residual branch count: 1 for everything except `ours_multibranch`.
    pub fn effective_branches(&self) -> usize {
        if self.kind == MethodKind::OursMultibranch {
            self.branches
        } else {
            1
        }
    }
}

/// Per-iteration training trace. Wall time is reported in the run manifest
/// rather than here, so CSV outputs stay bit-identical across reruns.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
    pub val_rows: Vec<ValRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub iter: u64,
    pub lr: f64,
    pub total: f64,
    pub action: f64,
    pub aux: f64,
    pub memory: f64,
    pub adversary: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValRow {
    pub iter: u64,
    pub action: f64,
    pub adversary: f64,
}

impl TrainReport {
    pub fn final_val_action(&self) -> Option<f64> {
        self.val_rows.last().map(|r| r.action)
    }

    /// Best (lowest) validation action loss over training.
    pub fn best_val_action(&self) -> Option<f64> {
        self.val_rows
            .iter()
            .map(|r| r.action)
            .min_by(|a, b| a.partial_cmp(b).expect("losses are finite"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record([
            "kind", "iter", "lr", "total", "action", "aux", "memory", "adversary",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                "train".to_string(),
                r.iter.to_string(),
                format_f64(r.lr),
                format_f64(r.total),
                format_f64(r.action),
                format_f64(r.aux),
                format_f64(r.memory),
                format_f64(r.adversary),
            ])
            .map_err(csv_err)?;
        }
        for r in &self.val_rows {
            w.write_record([
                "val".to_string(),
                r.iter.to_string(),
                String::new(),
                String::new(),
                format_f64(r.action),
                String::new(),
                String::new(),
                format_f64(r.adversary),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> MethodError {
    MethodError::Parse(e.to_string())
}

/// Canonical float formatting for CSV outputs: std's shortest round-trip
/// representation.
pub fn format_f64(v: f64) -> String {
    format!("{v}")
}

/// The trained networks of a policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PolicyNets {
    Single(SingleStreamNet),
    TwoStream {
        memory: MemoryNet,
        policy: PolicyStreamNet,
    },
    MemoryResidual(MemoryNet),
    MemoryLearned {
        memory: MemoryNet,
        controller: Mlp,
    },
}

/// A trained policy: method config, environment contract, and networks.
/// `act` is a pure function of the stored parameters and its inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedPolicy {
    pub config: MethodConfig,
    pub env: EnvConfig,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub nets: PolicyNets,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    format_version: u32,
    policy: TrainedPolicy,
}

impl TrainedPolicy {
    pub fn kind(&self) -> MethodKind {
        self.config.kind
    }

    /// Width of the flattened history window this policy consumes.
    pub fn window_dim(&self) -> usize {
        (self.config.h + 1) * self.env.obs_dim()
    }

    /// Compute the action for the current observation and history window.
    /// `prev_executed` is only accepted (and required) by the memory-only
    /// residual controller; it is the one method allowed to read its own
    /// previous action at test time.
    pub fn act(
        &self,
        obs: &[f64],
        window: &[f64],
        prev_executed: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        if prev_executed.is_some() && self.config.kind != MethodKind::MemoryOnlyResidual {
            return Err(MethodError::UnexpectedPrevAction {
                kind: self.config.kind,
            });
        }
        let expect = self.window_dim();
        if window.len() != expect {
            return Err(MethodError::InputDims {
                got: window.len(),
                expected: expect,
            });
        }
        let clamp_all = |v: Vec<f64>| -> Vec<f64> { v.iter().map(|a| a.clamp(-1.0, 1.0)).collect() };
        match &self.nets {
            PolicyNets::Single(net) => {
                let input = if self.config.kind == MethodKind::Bcso {
                    obs
                } else {
                    window
                };
                Ok(clamp_all(net.action_nograd(input)))
            }
            PolicyNets::TwoStream { memory, policy } => {
                let m = memory.feature_nograd(window);
                let policy_input = if matches!(
                    self.config.kind,
                    MethodKind::TwoStreamBcoh | MethodKind::TwoStreamKeyframe
                ) {
                    window
                } else {
                    obs
                };
                Ok(clamp_all(policy.action_nograd(policy_input, &m)))
            }
            PolicyNets::MemoryResidual(memory) => {
                let prev = prev_executed.ok_or(MethodError::MissingPrevAction)?;
                let m = memory.feature_nograd(window);
                let residual = memory.branch_nograd(&m, 0);
                Ok(clamp_all(
                    prev.iter().zip(&residual).map(|(p, r)| p + r).collect(),
                ))
            }
            PolicyNets::MemoryLearned { memory, controller } => {
                let m = memory.feature_nograd(window);
                Ok(clamp_all(controller.forward_nograd(&m, 1)))
            }
        }
    }

    /// Two-stream action with the memory feature overridden (analysis hook;
    /// zeroing it shows whether the fusion is degenerate).
    pub fn act_with_memory_override(&self, obs: &[f64], m_override: &[f64]) -> Result<Vec<f64>> {
        match &self.nets {
            PolicyNets::TwoStream { policy, .. } => Ok(policy
                .action_nograd(obs, m_override)
                .iter()
                .map(|a| a.clamp(-1.0, 1.0))
                .collect()),
            _ => Err(MethodError::InvalidConfig(
                "memory override only applies to two-stream policies".into(),
            )),
        }
    }

    /// Representation probed for previous-action information: m_t for the
    /// two-stream family, the penultimate feature for single-stream nets.
    pub fn representation(&self, obs: &[f64], window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != self.window_dim() {
            return Err(MethodError::InputDims {
                got: window.len(),
                expected: self.window_dim(),
            });
        }
        Ok(match &self.nets {
            PolicyNets::Single(net) => {
                let input = if self.config.kind == MethodKind::Bcso {
                    obs
                } else {
                    window
                };
                net.feature_nograd(input)
            }
            PolicyNets::TwoStream { memory, .. }
            | PolicyNets::MemoryResidual(memory)
            | PolicyNets::MemoryLearned { memory, .. } => memory.feature_nograd(window),
        })
    }

    /// The memory feature m_t, when this policy has a memory stream.
    pub fn memory_feature(&self, window: &[f64]) -> Option<Vec<f64>> {
        match &self.nets {
            PolicyNets::TwoStream { memory, .. }
            | PolicyNets::MemoryResidual(memory)
            | PolicyNets::MemoryLearned { memory, .. } => Some(memory.feature_nograd(window)),
            PolicyNets::Single(_) => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = PolicyFile {
            format_version: POLICY_FORMAT_VERSION,
            policy: self.clone(),
        };
        let json = serde_json::to_string(&file).map_err(|e| MethodError::Parse(e.to_string()))?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(json.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let file: PolicyFile =
            serde_json::from_slice(&bytes).map_err(|e| MethodError::Parse(e.to_string()))?;
        if file.format_version != POLICY_FORMAT_VERSION {
            return Err(MethodError::VersionMismatch {
                got: file.format_version,
                expected: POLICY_FORMAT_VERSION,
            });
        }
        Ok(file.policy)
    }
}

/// Train a policy of any offline method on a dataset. DAGGER needs an
/// environment and goes through [`train_dagger`].
pub fn train(dataset: &DemoDataset, cfg: &MethodConfig) -> Result<(TrainedPolicy, TrainReport)> {
    cfg.validate()?;
    if cfg.kind.needs_history() && cfg.h != dataset.h {
        return Err(MethodError::HistoryMismatch {
            config: cfg.h,
            dataset: dataset.h,
        });
    }
    match cfg.kind {
        MethodKind::Bcso
        | MethodKind::Bcoh
        | MethodKind::Hd
        | MethodKind::Fca
        | MethodKind::Keyframe
        | MethodKind::Dagger => single::train_single_stream(dataset, cfg),
        _ => two_stream::train_two_stream_family(dataset, cfg),
    }
}

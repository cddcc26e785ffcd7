//! Expert relabeling rounds: roll out the current policy, label every
//! visited observation with the privileged expert, aggregate, retrain.
//!
//! This is the oracle baseline: it needs a live environment and a queryable
//! expert. Round 0 is a plain history clone on the initial dataset, so zero
//! rounds reproduce bcoh exactly. The query budget caps the total number of
//! expert labels across all rounds.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::demos::{BoundaryPolicy, DemoDataset, DemoStep, Trajectory};
use crate::envs::{EnvConfig, EpisodeOutcome, Status};
use crate::rng;

use super::single::train_single_stream;
use super::{MethodConfig, MethodKind, Result, TrainReport, TrainedPolicy};

/// Per-round bookkeeping of the aggregation loop.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DaggerStats {
    /// Total expert labels spent on new trajectories.
    pub queries: u64,
    /// Aggregated trajectory count after each round (round 0 first).
    pub trajectories_per_round: Vec<usize>,
    /// Aggregated sample count after each round.
    pub samples_per_round: Vec<usize>,
}

/// Maintains the rolling observation window during a rollout, mirroring the
/// dataset's stacking semantics.
pub struct WindowBuffer {
    h: usize,
    boundary: BoundaryPolicy,
    frames: VecDeque<Vec<f64>>, // newest first
}

impl WindowBuffer {
    pub fn new(h: usize, boundary: BoundaryPolicy) -> Self {
        WindowBuffer {
            h,
            boundary,
            frames: VecDeque::new(),
        }
    }

    pub fn reset(&mut self) {
        self.frames.clear();
    }

    pub fn push(&mut self, obs: Vec<f64>) {
        self.frames.push_front(obs);
        while self.frames.len() > self.h + 1 {
            self.frames.pop_back();
        }
    }

    /// Flattened `[o_t, ..., o_{t-H}]`, boundary-filled before t = 0.
    pub fn window(&self) -> Vec<f64> {
        let newest = self.frames.front().expect("push before window");
        let obs_dim = newest.len();
        let mut out = Vec::with_capacity((self.h + 1) * obs_dim);
        for i in 0..=self.h {
            match self.frames.get(i) {
                Some(f) => out.extend_from_slice(f),
                None => match self.boundary {
                    BoundaryPolicy::RepeatFirst => {
                        out.extend_from_slice(self.frames.back().expect("non-empty"))
                    }
                    BoundaryPolicy::ZeroPad => out.extend(std::iter::repeat_n(0.0, obs_dim)),
                },
            }
        }
        out
    }
}

/// Roll out `policy` once, labeling every visited observation with the
/// expert. Returns the labeled trajectory and the number of expert queries
/// spent (capped by `budget_left`; the episode is truncated at the cap).
fn rollout_labeled(
    env_cfg: &EnvConfig,
    policy: &TrainedPolicy,
    h: usize,
    boundary: BoundaryPolicy,
    episode_seed: u64,
    budget_left: u64,
) -> Result<(Trajectory, u64)> {
    let mut env = env_cfg.make();
    let mut expert = env_cfg.make_expert();
    let mut buffer = WindowBuffer::new(h, boundary);

    let mut obs = env.reset(episode_seed);
    expert.reset();
    let mut hidden = env.hidden_velocity();
    buffer.reset();
    buffer.push(obs.clone());

    let mut steps = Vec::new();
    let mut queries = 0u64;
    let mut ret = 0.0;
    let outcome;
    loop {
        if queries >= budget_left {
            outcome = EpisodeOutcome {
                status: Status::Timeout,
                steps: steps.len(),
                ret,
            };
            break;
        }
        let label = expert.act(&env)?;
        queries += 1;
        let window = buffer.window();
        let executed = policy.act(&obs, &window, None)?;
        steps.push(DemoStep {
            t: steps.len(),
            obs: obs.clone(),
            action: label,
            executed: executed.clone(),
            hidden_velocity: hidden,
        });
        let step = env.step(&executed)?;
        obs = step.obs;
        hidden = env.hidden_velocity();
        ret += step.reward;
        buffer.push(obs.clone());
        if step.done {
            outcome = env.outcome().expect("episode terminated");
            break;
        }
    }

    Ok((
        Trajectory {
            episode_seed,
            steps,
            outcome,
        },
        queries,
    ))
}

/// The aggregation loop. `initial` provides round 0's training data and the
/// environment contract.
pub fn train_dagger(
    initial: &DemoDataset,
    cfg: &MethodConfig,
) -> Result<(TrainedPolicy, TrainReport, DaggerStats)> {
    assert_eq!(cfg.kind, MethodKind::Dagger);
    cfg.validate()?;
    if cfg.h != initial.h {
        return Err(super::MethodError::HistoryMismatch {
            config: cfg.h,
            dataset: initial.h,
        });
    }

    let mut stats = DaggerStats::default();
    let (mut policy, mut report) = train_single_stream(initial, cfg)?;
    stats.trajectories_per_round.push(initial.trajectories.len());
    stats.samples_per_round.push(initial.samples.len());

    let mut all_trajectories = initial.trajectories.clone();
    for round in 1..=cfg.dagger_rounds {
        if stats.queries >= cfg.dagger_query_budget {
            break;
        }
        for ep in 0..cfg.dagger_episodes_per_round {
            let budget_left = cfg.dagger_query_budget - stats.queries;
            if budget_left == 0 {
                break;
            }
            let episode_seed = rng::child_seed(
                cfg.seed,
                "dagger/rollout",
                (round as u64) << 32 | ep as u64,
            );
            let (traj, queries) = rollout_labeled(
                &initial.env,
                &policy,
                cfg.h,
                initial.boundary,
                episode_seed,
                budget_left,
            )?;
            stats.queries += queries;
            if traj.steps.len() >= 2 {
                all_trajectories.push(traj);
            }
        }

        let aggregated = DemoDataset::build(
            initial.env.clone(),
            all_trajectories.clone(),
            cfg.h,
            initial.boundary,
            initial.seed,
            0.0,
            0.1,
        )?;
        stats.trajectories_per_round.push(aggregated.trajectories.len());
        stats.samples_per_round.push(aggregated.samples.len());

        let round_cfg = MethodConfig {
            seed: rng::child_seed(cfg.seed, "dagger/round", round as u64),
            ..cfg.clone()
        };
        let (p, r) = train_single_stream(&aggregated, &round_cfg)?;
        policy = p;
        report = r;
    }

    // the returned policy carries the caller's config (incl. the master seed)
    policy.config = cfg.clone();
    Ok((policy, report, stats))
}

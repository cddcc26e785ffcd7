//! HiddenVelocity: reference tracking with a damped spring plant whose
//! velocities are withheld from the observation.
//!
//! The agent applies a bounded force per dimension; the plant is a stable
//! damped spring integrated with the symplectic Euler rule, so consecutive
//! position observations determine the velocity exactly. The reference is a
//! seeded sum of slow sinusoids. Reward is the negative squared tracking
//! error per step; episodes always run to the horizon.
//!
//! The expert is a PD tracker with feedforward on the reference velocity,
//! low-pass filtered and slew-limited. The filter state is hidden from every
//! observation, which concentrates predictive information in the expert's
//! previous action — smooth labels, partially predictable only through
//! history.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

use super::{clamp, EnvError, EpisodeOutcome, Result, Status, Step};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HiddenVelocityConfig {
    pub dims: usize,
    pub dt: f64,
    pub horizon: usize,
    /// Spring constant toward the origin.
    pub spring_k: f64,
    /// Viscous damping coefficient.
    pub damping: f64,
    /// Force scale: dv = (-k p - c v + a_scale * a) dt.
    pub a_scale: f64,
    /// Sinusoid count per dimension of the reference trajectory.
    pub ref_terms: usize,
    /// Total reference amplitude per dimension.
    pub ref_amplitude: f64,
    /// Angular frequency range of the reference, rad/s.
    pub ref_freq: (f64, f64),
    pub seed: u64,
    /// Expert PD gains.
    pub kp: f64,
    pub kd: f64,
    /// Expert low-pass coefficient on its own previous action (0 disables).
    pub action_ema: f64,
    /// Expert max action change per step and dimension.
    pub slew_limit: f64,
}

impl Default for HiddenVelocityConfig {
    fn default() -> Self {
        HiddenVelocityConfig {
            dims: 2,
            dt: 0.05,
            horizon: 400,
            spring_k: 2.0,
            damping: 0.4,
            a_scale: 4.0,
            ref_terms: 3,
            ref_amplitude: 1.2,
            ref_freq: (0.2, 0.9),
            seed: 0,
            kp: 6.0,
            kd: 2.5,
            action_ema: 0.75,
            slew_limit: 0.12,
        }
    }
}

impl HiddenVelocityConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(EnvError::InvalidConfig(msg));
        if self.dims == 0 {
            return fail("dims must be positive".into());
        }
        if self.dt <= 0.0 || self.horizon == 0 {
            return fail(format!("bad dt {} or horizon {}", self.dt, self.horizon));
        }
        if self.ref_freq.0 > self.ref_freq.1 || self.ref_freq.0 <= 0.0 {
            return fail(format!("bad reference frequency range {:?}", self.ref_freq));
        }
        if !(0.0..1.0).contains(&self.action_ema) {
            return fail(format!("action_ema must be in [0,1), got {}", self.action_ema));
        }
        let rho = self.spectral_radius();
        if rho >= 1.0 {
            return fail(format!("unstable zero-action dynamics, spectral radius {rho}"));
        }
        Ok(())
    }

    /// Spectral radius of the per-dimension zero-action update matrix.
    pub fn spectral_radius(&self) -> f64 {
        // (v, p) updates: v' = (1 - dt c) v - dt k p; p' = p + dt v'
        let (dt, k, c) = (self.dt, self.spring_k, self.damping);
        let m = [1.0 - dt * c, -dt * k, dt * (1.0 - dt * c), 1.0 - dt * dt * k];
        let tr = m[0] + m[3];
        let det = m[0] * m[3] - m[1] * m[2];
        let disc = tr * tr - 4.0 * det;
        if disc >= 0.0 {
            let r = disc.sqrt();
            ((tr + r) / 2.0).abs().max(((tr - r) / 2.0).abs())
        } else {
            det.sqrt()
        }
    }

    /// Observation: own positions followed by the current reference target.
    /// Velocities are never included.
    pub fn obs_dim(&self) -> usize {
        2 * self.dims
    }
}

/// One sinusoid of the reference trajectory.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RefTerm {
    amplitude: f64,
    omega: f64,
    phase: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    terms: Vec<Vec<RefTerm>>, // per dimension
}

impl ReferenceTrajectory {
    fn sample(cfg: &HiddenVelocityConfig, episode_seed: u64) -> Self {
        let mut r = rng::stream(
            rng::child_seed(cfg.seed, "hiddenvel/episode", episode_seed),
            "reference",
            0,
        );
        let terms = (0..cfg.dims)
            .map(|_| {
                let weights: Vec<f64> = (0..cfg.ref_terms).map(|_| r.random_range(0.3..1.0)).collect();
                let total: f64 = weights.iter().sum();
                weights
                    .into_iter()
                    .map(|w| RefTerm {
                        amplitude: cfg.ref_amplitude * w / total,
                        omega: r.random_range(cfg.ref_freq.0..cfg.ref_freq.1),
                        phase: r.random_range(0.0..std::f64::consts::TAU),
                    })
                    .collect()
            })
            .collect();
        ReferenceTrajectory { terms }
    }

    pub fn position(&self, dim: usize, time: f64) -> f64 {
        self.terms[dim]
            .iter()
            .map(|t| t.amplitude * (t.omega * time + t.phase).sin())
            .sum()
    }

    pub fn velocity(&self, dim: usize, time: f64) -> f64 {
        self.terms[dim]
            .iter()
            .map(|t| t.amplitude * t.omega * (t.omega * time + t.phase).cos())
            .sum()
    }
}

pub struct HiddenVelocityEnv {
    cfg: HiddenVelocityConfig,
    p: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    reference: ReferenceTrajectory,
    outcome: Option<EpisodeOutcome>,
    ret: f64,
}

impl HiddenVelocityEnv {
    pub fn new(cfg: HiddenVelocityConfig) -> Self {
        let reference = ReferenceTrajectory { terms: vec![Vec::new(); cfg.dims] };
        HiddenVelocityEnv {
            p: vec![0.0; cfg.dims],
            v: vec![0.0; cfg.dims],
            t: 0,
            reference,
            outcome: None,
            ret: 0.0,
            cfg,
        }
    }

    pub fn cfg(&self) -> &HiddenVelocityConfig {
        &self.cfg
    }

    pub fn velocity(&self) -> &[f64] {
        &self.v
    }

    pub fn position(&self) -> &[f64] {
        &self.p
    }

    pub fn time(&self) -> f64 {
        self.t as f64 * self.cfg.dt
    }

    pub fn reference(&self) -> &ReferenceTrajectory {
        &self.reference
    }

    pub fn outcome(&self) -> Option<EpisodeOutcome> {
        self.outcome
    }

    pub fn reset(&mut self, episode_seed: u64) -> Vec<f64> {
        self.reference = ReferenceTrajectory::sample(&self.cfg, episode_seed);
        // start on the reference with matching velocity
        self.p = (0..self.cfg.dims).map(|d| self.reference.position(d, 0.0)).collect();
        self.v = (0..self.cfg.dims).map(|d| self.reference.velocity(d, 0.0)).collect();
        self.t = 0;
        self.outcome = None;
        self.ret = 0.0;
        self.observe()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Step> {
        if let Some(outcome) = self.outcome {
            return Err(EnvError::StepAfterTerminal(outcome.status));
        }
        if action.len() != self.cfg.dims {
            return Err(EnvError::ActionDims {
                got: action.len(),
                expected: self.cfg.dims,
            });
        }
        let cfg = &self.cfg;
        for d in 0..cfg.dims {
            let a = clamp(action[d], -1.0, 1.0);
            self.v[d] += cfg.dt * (-cfg.spring_k * self.p[d] - cfg.damping * self.v[d] + cfg.a_scale * a);
            self.p[d] += cfg.dt * self.v[d];
        }
        self.t += 1;
        let time = self.time();
        let err: f64 = (0..cfg.dims)
            .map(|d| {
                let e = self.p[d] - self.reference.position(d, time);
                e * e
            })
            .sum();
        let reward = -err;
        self.ret += reward;
        if self.t >= cfg.horizon {
            self.outcome = Some(EpisodeOutcome {
                status: Status::Success,
                steps: self.t,
                ret: self.ret,
            });
        }
        Ok(Step {
            obs: self.observe(),
            reward,
            done: self.outcome.is_some(),
        })
    }

    pub fn observe(&self) -> Vec<f64> {
        let time = self.time();
        let mut obs = Vec::with_capacity(2 * self.cfg.dims);
        obs.extend_from_slice(&self.p);
        for d in 0..self.cfg.dims {
            obs.push(self.reference.position(d, time));
        }
        obs
    }
}

/// PD tracker with reference feedforward, low-pass filtered and slew-limited.
pub struct HiddenVelocityExpert {
    cfg: HiddenVelocityConfig,
    prev_a: Vec<f64>,
}

impl HiddenVelocityExpert {
    pub fn new(cfg: HiddenVelocityConfig) -> Self {
        let dims = cfg.dims;
        HiddenVelocityExpert {
            cfg,
            prev_a: vec![0.0; dims],
        }
    }

    pub fn reset(&mut self) {
        self.prev_a = vec![0.0; self.cfg.dims];
    }

    pub fn act(&mut self, env: &HiddenVelocityEnv) -> Vec<f64> {
        let cfg = &self.cfg;
        let time = env.time();
        let mut out = Vec::with_capacity(cfg.dims);
        for d in 0..cfg.dims {
            let p_err = env.reference().position(d, time) - env.position()[d];
            let v_err = env.reference().velocity(d, time) - env.velocity()[d];
            let pd = clamp(cfg.kp * p_err + cfg.kd * v_err, -1.0, 1.0);
            let filtered = cfg.action_ema * self.prev_a[d] + (1.0 - cfg.action_ema) * pd;
            let a = clamp(
                filtered,
                self.prev_a[d] - cfg.slew_limit,
                self.prev_a[d] + cfg.slew_limit,
            );
            out.push(a);
            self.prev_a[d] = a;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> HiddenVelocityConfig {
        HiddenVelocityConfig::default()
    }

    #[test]
    fn default_config_is_valid_and_stable() {
        cfg().validate().unwrap();
        assert!(cfg().spectral_radius() < 1.0);
    }

    #[test]
    fn perfect_tracking_scores_zero() {
        // an env pinned to its reference gets reward ~0 per step
        let mut env = HiddenVelocityEnv::new(cfg());
        env.reset(0);
        // overwrite the plant so the next position lands on the reference
        let time = (env.t + 1) as f64 * env.cfg.dt;
        for d in 0..env.cfg.dims {
            let target = env.reference.position(d, time);
            env.p[d] = target;
            env.v[d] = 0.0;
        }
        // freeze the plant: cancel spring force exactly for one step
        let action: Vec<f64> = (0..env.cfg.dims)
            .map(|d| env.cfg.spring_k * env.p[d] / env.cfg.a_scale)
            .collect();
        let step = env.step(&action).unwrap();
        assert!(step.reward.abs() < 1e-2, "reward {}", step.reward);
    }

    #[test]
    fn expert_tracks_reference_closely() {
        let mut env = HiddenVelocityEnv::new(cfg());
        let mut expert = HiddenVelocityExpert::new(cfg());
        for seed in 0..5 {
            env.reset(seed);
            expert.reset();
            loop {
                let a = expert.act(&env);
                if env.step(&a).unwrap().done {
                    break;
                }
            }
            let per_step = env.outcome().unwrap().ret / cfg().horizon as f64;
            assert!(per_step > -0.05, "seed {seed} tracking error {per_step}");
        }
    }

    #[test]
    fn expert_beats_random_policy() {
        let mut expert_total = 0.0;
        let mut random_total = 0.0;
        for seed in 0..20 {
            let mut env = HiddenVelocityEnv::new(cfg());
            let mut expert = HiddenVelocityExpert::new(cfg());
            env.reset(seed);
            expert.reset();
            loop {
                let a = expert.act(&env);
                if env.step(&a).unwrap().done {
                    break;
                }
            }
            expert_total += env.outcome().unwrap().ret;

            let mut env = HiddenVelocityEnv::new(cfg());
            env.reset(seed);
            let mut r = crate::rng::stream(seed, "test/random-policy", 0);
            loop {
                let a: Vec<f64> = (0..cfg().dims).map(|_| r.random_range(-1.0..1.0)).collect();
                if env.step(&a).unwrap().done {
                    break;
                }
            }
            random_total += env.outcome().unwrap().ret;
        }
        assert!(
            expert_total > random_total,
            "expert {expert_total} vs random {random_total}"
        );
    }

    #[test]
    fn observation_hides_velocity_but_two_frames_recover_it() {
        let config = cfg();
        let mut env = HiddenVelocityEnv::new(config.clone());
        let o0 = env.reset(3);
        assert_eq!(o0.len(), config.obs_dim());
        let step = env.step(&[0.3, -0.2]).unwrap();
        for d in 0..config.dims {
            let recovered = (step.obs[d] - o0[d]) / config.dt;
            assert!(
                (recovered - env.velocity()[d]).abs() < 1e-9,
                "dim {d}: {recovered} vs {}",
                env.velocity()[d]
            );
        }
    }

    #[test]
    fn episodes_always_reach_horizon_with_success_status() {
        let mut env = HiddenVelocityEnv::new(cfg());
        env.reset(4);
        for _ in 0..cfg().horizon {
            env.step(&[0.0, 0.0]).unwrap();
        }
        let outcome = env.outcome().unwrap();
        assert_eq!(outcome.status, Status::Success);
        assert_eq!(outcome.steps, cfg().horizon);
        assert!(matches!(
            env.step(&[0.0, 0.0]),
            Err(EnvError::StepAfterTerminal(_))
        ));
    }

    #[test]
    fn expert_respects_slew_limit() {
        let config = cfg();
        let mut env = HiddenVelocityEnv::new(config.clone());
        let mut expert = HiddenVelocityExpert::new(config.clone());
        env.reset(5);
        expert.reset();
        let mut prev = vec![0.0; config.dims];
        let mut first = true;
        loop {
            let a = expert.act(&env);
            if !first {
                for d in 0..config.dims {
                    assert!((a[d] - prev[d]).abs() <= config.slew_limit + 1e-12);
                }
            }
            first = false;
            prev = a.clone();
            if env.step(&a).unwrap().done {
                break;
            }
        }
    }
}

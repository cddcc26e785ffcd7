//! Batch assembly and the shared weighted-loss graph.
//!
//! Per-sample weights enter the loss by scaling both prediction and target
//! rows before the reduction (plain weights under L1, square roots under L2),
//! which keeps one code path for every single-stream method: all-ones weights
//! multiply by exactly 1.0 and reproduce the unweighted loss bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::demos::DemoDataset;

use super::{LossKind, MethodError, Result};

/// Epoch-permutation batch iterator. Same stream, same batches, regardless of
/// which method consumes them.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(train_idx: &[usize], batch_size: usize, rng: ChaCha8Rng) -> Self {
        assert!(!train_idx.is_empty(), "empty train split");
        BatchSampler {
            order: train_idx.to_vec(),
            cursor: usize::MAX, // force an initial shuffle
            batch_size: batch_size.min(train_idx.len()),
            rng,
        }
    }

    fn reshuffle(&mut self) {
        for i in (1..self.order.len()).rev() {
            let j = self.rng.random_range(0..=i);
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }

    /// Next batch of sample indices (into `dataset.samples`).
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor == usize::MAX || self.cursor + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        out
    }
}

/// Dense batch views of the dataset fields used by the trainers.
pub struct Batch {
    pub n: usize,
    /// `[n, window_dim]` flattened history windows, newest frame first.
    pub windows: Vec<f64>,
    /// `[n, obs_dim]` current observations.
    pub obs: Vec<f64>,
    /// `[n, action_dim]` labels a_t.
    pub actions: Vec<f64>,
    /// `[n, action_dim]` labels a_{t-1}.
    pub prev_actions: Vec<f64>,
}

impl Batch {
    pub fn gather(ds: &DemoDataset, idx: &[usize]) -> Self {
        let mut windows = Vec::with_capacity(idx.len() * ds.window_dim());
        let mut obs = Vec::with_capacity(idx.len() * ds.obs_dim());
        let mut actions = Vec::with_capacity(idx.len() * ds.action_dim());
        let mut prev_actions = Vec::with_capacity(idx.len() * ds.action_dim());
        for &i in idx {
            let s = ds.samples[i];
            windows.extend(ds.window(s));
            obs.extend_from_slice(ds.obs(s));
            actions.extend_from_slice(ds.action(s));
            prev_actions.extend_from_slice(ds.prev_action(s));
        }
        Batch {
            n: idx.len(),
            windows,
            obs,
            actions,
            prev_actions,
        }
    }

    /// Residual targets a_t - a_{t-back}, `[n, action_dim]`.
    pub fn residual_targets(ds: &DemoDataset, idx: &[usize], back: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * ds.action_dim());
        for &i in idx {
            let s = ds.samples[i];
            let a = ds.action(s);
            let p = ds.action_back(s, back);
            out.extend(a.iter().zip(p).map(|(x, y)| x - y));
        }
        out
    }

    /// Velocity targets from the privileged field, normalized by `scale`.
    /// This is the auxiliary-label path; it legitimately reads the hidden
    /// velocity.
    pub fn velocity_targets(ds: &DemoDataset, idx: &[usize], scale: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for &i in idx {
            let s = ds.samples[i];
            out.extend(ds.hidden_velocity(s).iter().map(|v| v / scale));
        }
        out
    }
}

/// Keyframe weights over the train split: w_i = 1 + kappa * ||a_t - a_{t-1}||_1,
/// normalized to mean exactly 1. Indexed like `dataset.samples`.
pub fn keyframe_weights(ds: &DemoDataset, kappa: f64) -> Vec<f64> {
    let mut w = vec![1.0; ds.samples.len()];
    for &i in &ds.train_idx {
        let s = ds.samples[i];
        let l1: f64 = ds.residual(s).iter().map(|r| r.abs()).sum();
        w[i] = 1.0 + kappa * l1;
    }
    let mean: f64 = ds.train_idx.iter().map(|&i| w[i]).sum::<f64>() / ds.train_idx.len() as f64;
    for &i in &ds.train_idx {
        w[i] /= mean;
    }
    // validation samples keep weight 1; they never enter the weighted loss
    w
}

/// Weighted regression loss on the tape.
///
/// L1: mean |w (pred - target)|; L2: mean (sqrt(w) (pred - target))^2 — in
/// both cases the effective per-sample weight is w. `weights`, when given,
/// holds one weight per batch row, expanded across action dims.
pub fn weighted_loss(
    tape: &mut Tape,
    loss: LossKind,
    pred: &Tensor,
    target: &Tensor,
    weights: Option<&[f64]>,
) -> Result<Tensor> {
    let out = match weights {
        None => match loss {
            LossKind::L1 => tape.l1_loss(pred, target)?,
            LossKind::L2 => tape.l2_loss(pred, target)?,
        },
        Some(w) => {
            let shape = pred.shape().to_vec();
            let (rows, cols) = (shape[0], shape[1]);
            assert_eq!(w.len(), rows, "one weight per batch row");
            let mut expanded = Vec::with_capacity(rows * cols);
            for wi in w {
                let v = match loss {
                    LossKind::L1 => *wi,
                    LossKind::L2 => wi.sqrt(),
                };
                expanded.extend(std::iter::repeat_n(v, cols));
            }
            let w_t = tape.leaf(&Tensor::new(shape, expanded).map_err(MethodError::Autodiff)?);
            let wp = tape.mul_elementwise(pred, &w_t)?;
            let wt = tape.mul_elementwise(target, &w_t)?;
            match loss {
                LossKind::L1 => tape.l1_loss(&wp, &wt)?,
                LossKind::L2 => tape.l2_loss(&wp, &wt)?,
            }
        }
    };
    Ok(out)
}

/// Plain (unweighted) loss value without a tape, for validation traces.
pub fn plain_loss_nograd(loss: LossKind, pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    let n = pred.len() as f64;
    match loss {
        LossKind::L1 => pred
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / n,
        LossKind::L2 => pred
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n,
    }
}

/// Dropout masks for the hd baseline: one gate per (row, past frame), never
/// gating the current frame. Returns a `[n, window_dim]` mask of 0/1.
pub fn history_dropout_mask(
    rng: &mut ChaCha8Rng,
    n: usize,
    frames: usize,
    obs_dim: usize,
    p: f64,
) -> Vec<f64> {
    let mut mask = vec![1.0; n * frames * obs_dim];
    for row in 0..n {
        for frame in 1..frames {
            let keep = rng.random::<f64>() >= p;
            if !keep {
                let start = (row * frames + frame) * obs_dim;
                for v in &mut mask[start..start + obs_dim] {
                    *v = 0.0;
                }
            }
        }
    }
    mask
}

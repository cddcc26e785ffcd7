//! One trainer for the whole single-stream family.
//!
//! bcso and bcoh are the plain clones (current observation vs history
//! window); hd gates past frames with caller-drawn masks; fca bolts a
//! previous-action adversary onto the penultimate feature through a gradient
//! reversal; keyframe reweights samples by action change. Every variant runs
//! the same graph shape and the same loss path, so the p=0 / lambda=0 /
//! kappa=0 settings collapse to bcoh bit-exactly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::demos::DemoDataset;
use crate::nn::{adam_step, AdamState, Mlp, MlpSpec, Activation, ParamTensor, PlateauSchedule};
use crate::rng;

use super::data::{
    history_dropout_mask, keyframe_weights, plain_loss_nograd, weighted_loss, Batch, BatchSampler,
};
use super::{
    MethodConfig, MethodError, MethodKind, PolicyNets, Result, TrainReport, TrainRow,
    TrainedPolicy, ValRow,
};

/// Trunk MLP plus optional velocity head and optional adversary head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingleStreamNet {
    pub mlp: Mlp,
    /// Velocity head on the penultimate feature.
    pub aux: Option<(ParamTensor, ParamTensor)>,
    /// fca: previous-action head behind a gradient reversal.
    pub adversary: Option<Mlp>,
}

impl SingleStreamNet {
    pub fn init(
        cfg: &MethodConfig,
        input_dim: usize,
        action_dim: usize,
        vel_dim: usize,
    ) -> Result<Self> {
        let spec = MlpSpec::new(
            vec![input_dim, cfg.hidden, cfg.hidden, action_dim],
            Activation::Relu,
        );
        let mlp = Mlp::init(spec, cfg.seed, "policy")?;
        let aux = if cfg.aux_velocity_head {
            Some(init_linear(cfg.seed, "aux", cfg.hidden, vel_dim))
        } else {
            None
        };
        let adversary = if cfg.kind == MethodKind::Fca {
            let spec = MlpSpec::new(vec![cfg.hidden, 32, action_dim], Activation::Relu);
            Some(Mlp::init(spec, cfg.seed, "adversary")?)
        } else {
            None
        };
        Ok(SingleStreamNet { mlp, aux, adversary })
    }

    pub fn action_nograd(&self, input: &[f64]) -> Vec<f64> {
        self.mlp.forward_nograd(input, 1)
    }

    pub fn feature_nograd(&self, input: &[f64]) -> Vec<f64> {
        self.mlp.forward_nograd_with_feature(input, 1).1
    }

    /// Trunk and velocity-head parameters, in binding order.
    fn policy_params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = self.mlp.params.tensors.iter_mut().collect();
        if let Some((w, b)) = self.aux.as_mut() {
            out.push(w);
            out.push(b);
        }
        out
    }

    fn adversary_params_mut(&mut self) -> Vec<&mut ParamTensor> {
        match self.adversary.as_mut() {
            Some(adv) => adv.params.tensors.iter_mut().collect(),
            None => Vec::new(),
        }
    }
}

/// Uniform fan-in initialized linear layer, seeded by name.
pub(crate) fn init_linear(
    seed: u64,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> (ParamTensor, ParamTensor) {
    use rand::Rng;
    let mut r = rng::stream(seed, &format!("init/{name}"), 0);
    let bound = (1.0 / fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| r.random_range(-bound..bound))
        .collect();
    (
        ParamTensor::new(format!("{name}/w"), vec![fan_in, fan_out], w),
        ParamTensor::new(format!("{name}/b"), vec![fan_out], vec![0.0; fan_out]),
    )
}

pub(crate) fn linear(
    tape: &mut Tape,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
) -> crate::autodiff::Result<Tensor> {
    let wx = tape.matmul(x, w)?;
    tape.add(&wx, b)
}

pub(crate) fn train_single_stream(
    ds: &DemoDataset,
    cfg: &MethodConfig,
) -> Result<(TrainedPolicy, TrainReport)> {
    let action_dim = ds.action_dim();
    let vel_dim = velocity_dim(ds);
    let uses_window = cfg.kind != MethodKind::Bcso;
    let input_dim = if uses_window {
        ds.window_dim()
    } else {
        ds.obs_dim()
    };

    let mut net = SingleStreamNet::init(cfg, input_dim, action_dim, vel_dim)?;
    let mut adam = AdamState::new(cfg.adam, &net.policy_params_mut());
    let mut adv_adam = if net.adversary.is_some() {
        Some(AdamState::new(cfg.adam, &net.adversary_params_mut()))
    } else {
        None
    };
    let mut schedule = PlateauSchedule::new(cfg.lr);
    let mut sampler = BatchSampler::new(
        &ds.train_idx,
        cfg.batch_size,
        rng::stream(cfg.seed, "batches", 0),
    );
    let mut dropout_rng = rng::stream(cfg.seed, "dropout", 0);

    let weights = match cfg.kind {
        MethodKind::Keyframe => Some(keyframe_weights(ds, cfg.keyframe_kappa)),
        _ => None,
    };
    let frames = cfg.h + 1;
    let obs_dim = ds.obs_dim();
    let vel_scale = velocity_scale(ds);

    // validation matrices, assembled once
    let val_inputs = gather_inputs(ds, &ds.val_idx, uses_window);
    let val_actions = gather_actions(ds, &ds.val_idx);
    let val_prev = gather_prev(ds, &ds.val_idx);

    let mut report = TrainReport::default();

    for iter in 0..cfg.iterations {
        let idx = sampler.next_batch();
        let batch = Batch::gather(ds, &idx);
        let batch_weights: Option<Vec<f64>> = weights
            .as_ref()
            .map(|w| idx.iter().map(|&i| w[i]).collect());

        let mut tape = Tape::new();
        let bound = net.mlp.bind(&mut tape);
        let aux_bound = net.aux.as_ref().map(|(w, b)| {
            (
                tape.leaf(&Tensor::new(w.shape.clone(), w.values.clone()).expect("param shape")),
                tape.leaf(&Tensor::new(b.shape.clone(), b.values.clone()).expect("param shape")),
            )
        });
        let adv_bound = net.adversary.as_ref().map(|adv| adv.bind(&mut tape));

        let raw_input = if uses_window {
            Tensor::new(vec![batch.n, input_dim], batch.windows.clone()).expect("batch shape")
        } else {
            Tensor::new(vec![batch.n, input_dim], batch.obs.clone()).expect("batch shape")
        };
        let mut x = tape.leaf(&raw_input);
        if cfg.kind == MethodKind::Hd && cfg.dropout_p > 0.0 {
            let mask_values =
                history_dropout_mask(&mut dropout_rng, batch.n, frames, obs_dim, cfg.dropout_p);
            let mask = tape.leaf(&Tensor::new(vec![batch.n, input_dim], mask_values).expect("mask"));
            x = tape.dropout_apply(&x, &mask)?;
        }

        let fwd = bound.forward(&mut tape, &x)?;
        let targets = tape.leaf(
            &Tensor::new(vec![batch.n, action_dim], batch.actions.clone()).expect("targets"),
        );
        let action_loss = weighted_loss(
            &mut tape,
            cfg.loss,
            &fwd.output,
            &targets,
            batch_weights.as_deref(),
        )?;

        let mut aux_value = 0.0;
        let mut total = action_loss.clone();
        if let Some((aw, ab)) = &aux_bound {
            let vel_pred = linear(&mut tape, &fwd.feature, aw, ab)?;
            let vel_targets = tape.leaf(
                &Tensor::new(
                    vec![batch.n, vel_dim],
                    Batch::velocity_targets(ds, &idx, vel_scale),
                )
                .expect("vel targets"),
            );
            let aux_loss = weighted_loss(
                &mut tape,
                cfg.loss,
                &vel_pred,
                &vel_targets,
                batch_weights.as_deref(),
            )?;
            aux_value = aux_loss.item();
            let scaled_a = tape.scale(&action_loss, cfg.alpha)?;
            let scaled_v = tape.scale(&aux_loss, 1.0 - cfg.alpha)?;
            total = tape.add(&scaled_a, &scaled_v)?;
        }

        let mut adversary_value = 0.0;
        if let Some(adv) = &adv_bound {
            let reversed = tape.grad_reverse(&fwd.feature, cfg.fca_lambda)?;
            let adv_fwd = adv.forward(&mut tape, &reversed)?;
            let prev = tape.leaf(
                &Tensor::new(vec![batch.n, action_dim], batch.prev_actions.clone())
                    .expect("prev targets"),
            );
            let adv_loss = weighted_loss(&mut tape, cfg.loss, &adv_fwd.output, &prev, None)?;
            adversary_value = adv_loss.item();
            total = tape.add(&total, &adv_loss)?;
        }

        let total_value = total.item();
        if !total_value.is_finite() {
            return Err(MethodError::Diverged {
                iter,
                loss: total_value,
            });
        }

        let grads_map = tape.backward(&total)?;
        let mut node_ids = bound.param_nodes();
        if let Some((aw, ab)) = &aux_bound {
            node_ids.push(aw.node().expect("leaf"));
            node_ids.push(ab.node().expect("leaf"));
        }
        let lr = schedule.lr();
        {
            let mut params = net.policy_params_mut();
            let grads: Vec<Vec<f64>> = node_ids
                .iter()
                .zip(&params)
                .map(|(id, p)| grads_map.get_or_zeros(*id, p.len()))
                .collect();
            adam_step(&mut adam, &mut params, &grads, lr)?;
        }
        if let (Some(adv), Some(state)) = (&adv_bound, adv_adam.as_mut()) {
            let adv_ids = adv.param_nodes();
            let mut params = net.adversary_params_mut();
            let grads: Vec<Vec<f64>> = adv_ids
                .iter()
                .zip(&params)
                .map(|(id, p)| grads_map.get_or_zeros(*id, p.len()))
                .collect();
            adam_step(state, &mut params, &grads, lr)?;
        }

        // extra adversary-only refinement steps, if configured
        if cfg.fca_adv_steps > 1 {
            if let Some(state) = adv_adam.as_mut() {
                for _ in 1..cfg.fca_adv_steps {
                    adversary_only_step(&mut net, state, cfg, &batch, lr)?;
                }
            }
        }

        report.rows.push(TrainRow {
            iter,
            lr,
            total: total_value,
            action: action_loss.item(),
            aux: aux_value,
            memory: 0.0,
            adversary: adversary_value,
        });

        if (iter + 1) % cfg.val_every == 0 || iter + 1 == cfg.iterations {
            let (pred, feature) = net
                .mlp
                .forward_nograd_with_feature(&val_inputs, ds.val_idx.len());
            let val_action = plain_loss_nograd(cfg.loss, &pred, &val_actions);
            let val_adv = net
                .adversary
                .as_ref()
                .map(|adv| {
                    let p = adv.forward_nograd(&feature, ds.val_idx.len());
                    plain_loss_nograd(cfg.loss, &p, &val_prev)
                })
                .unwrap_or(0.0);
            report.val_rows.push(ValRow {
                iter,
                action: val_action,
                adversary: val_adv,
            });
            schedule.observe(iter, val_action);
        }
    }

    let final_train_loss = report.rows.last().map(|r| r.total).unwrap_or(f64::NAN);
    let final_val_loss = report.final_val_action().unwrap_or(f64::NAN);
    let policy = TrainedPolicy {
        config: cfg.clone(),
        env: ds.env.clone(),
        final_train_loss,
        final_val_loss,
        nets: PolicyNets::Single(net),
    };
    Ok((policy, report))
}

/// One update of only the adversary parameters on the same batch; the
/// encoder is frozen by construction (features computed without a tape).
fn adversary_only_step(
    net: &mut SingleStreamNet,
    adv_adam: &mut AdamState,
    cfg: &MethodConfig,
    batch: &Batch,
    lr: f64,
) -> Result<()> {
    let n = batch.n;
    let action_dim = batch.actions.len() / n;
    let uses_window = cfg.kind != MethodKind::Bcso;
    let input = if uses_window { &batch.windows } else { &batch.obs };
    let (_, feature) = net.mlp.forward_nograd_with_feature(input, n);

    let mut tape = Tape::new();
    let adv = net.adversary.as_ref().expect("adversary present");
    let bound = adv.bind(&mut tape);
    let z = tape.leaf(&Tensor::new(vec![n, feature.len() / n], feature).expect("feature shape"));
    let fwd = bound.forward(&mut tape, &z)?;
    let prev = tape.leaf(
        &Tensor::new(vec![n, action_dim], batch.prev_actions.clone()).expect("prev targets"),
    );
    let loss = weighted_loss(&mut tape, cfg.loss, &fwd.output, &prev, None)?;
    let grads_map = tape.backward(&loss)?;
    let node_ids = bound.param_nodes();
    let mut params = net.adversary_params_mut();
    let grads: Vec<Vec<f64>> = node_ids
        .iter()
        .zip(&params)
        .map(|(id, p)| grads_map.get_or_zeros(*id, p.len()))
        .collect();
    adam_step(adv_adam, &mut params, &grads, lr)?;
    Ok(())
}

pub(crate) fn velocity_dim(ds: &DemoDataset) -> usize {
    match &ds.env {
        crate::envs::EnvConfig::Braketown(_) => 1,
        crate::envs::EnvConfig::HiddenVelocity(c) => c.dims,
    }
}

/// Normalization for the velocity-head target.
pub(crate) fn velocity_scale(ds: &DemoDataset) -> f64 {
    match &ds.env {
        crate::envs::EnvConfig::Braketown(c) => c.v_max,
        crate::envs::EnvConfig::HiddenVelocity(_) => 1.0,
    }
}

pub(crate) fn gather_inputs(ds: &DemoDataset, idx: &[usize], uses_window: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for &i in idx {
        let s = ds.samples[i];
        if uses_window {
            out.extend(ds.window(s));
        } else {
            out.extend_from_slice(ds.obs(s));
        }
    }
    out
}

pub(crate) fn gather_actions(ds: &DemoDataset, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for &i in idx {
        out.extend_from_slice(ds.action(ds.samples[i]));
    }
    out
}

pub(crate) fn gather_prev(ds: &DemoDataset, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for &i in idx {
        out.extend_from_slice(ds.prev_action(ds.samples[i]));
    }
    out
}

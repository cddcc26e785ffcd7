//! The two-stream residual-action architecture and its ablations.
//!
//! The memory stream consumes the history window and predicts action
//! residuals (branch i targets a_t - a_{t-i}); its intermediate feature m_t
//! is fused into the policy stream by concatenation at the mid layer, behind
//! a stop-gradient, so the policy loss cannot pull previous-action
//! information into the memory stream. Both streams train jointly with one
//! optimizer step: overall loss = memory loss + policy loss.
//!
//! Variants: swap the memory objective (a_t, a_{t-1}), remove the
//! stop-gradient, widen to several residual branches, feed the policy stream
//! the full window (two-stream baselines), or drop the policy stream and act
//! from the memory stream alone (memory-only controllers).

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::demos::DemoDataset;
use crate::nn::{adam_step, Activation, AdamState, Mlp, MlpSpec, OutputActivation, ParamTensor,
    PlateauSchedule};
use crate::rng;

use super::data::{keyframe_weights, plain_loss_nograd, weighted_loss, Batch, BatchSampler};
use super::single::{gather_actions, gather_inputs, init_linear, linear, velocity_dim, velocity_scale};
use super::{
    MethodConfig, MethodError, MethodKind, PolicyNets, Result, TrainReport, TrainRow,
    TrainedPolicy, ValRow,
};

/// Memory extraction stream: trunk to the feature m_t plus residual branch
/// heads and an optional velocity head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryNet {
    pub trunk: Mlp,
    pub branches: Vec<(ParamTensor, ParamTensor)>,
    pub aux: Option<(ParamTensor, ParamTensor)>,
}

impl MemoryNet {
    pub fn init(cfg: &MethodConfig, win_dim: usize, action_dim: usize, vel_dim: usize) -> Result<Self> {
        let mut spec = MlpSpec::new(vec![win_dim, cfg.hidden, cfg.m_dim], Activation::Relu);
        spec.output_activation = OutputActivation::Tanh; // bounded feature
        let trunk = Mlp::init(spec, cfg.seed, "memory")?;
        let branches = (0..cfg.effective_branches())
            .map(|i| init_linear(cfg.seed, &format!("memory_branch{i}"), cfg.m_dim, action_dim))
            .collect();
        let aux = if cfg.aux_velocity_head {
            Some(init_linear(cfg.seed, "memory_aux", cfg.m_dim, vel_dim))
        } else {
            None
        };
        Ok(MemoryNet { trunk, branches, aux })
    }

    /// m_t for a single window.
    pub fn feature_nograd(&self, window: &[f64]) -> Vec<f64> {
        self.trunk.forward_nograd(window, 1)
    }

    pub fn feature_batch_nograd(&self, windows: &[f64], n: usize) -> Vec<f64> {
        self.trunk.forward_nograd(windows, n)
    }

    /// Residual prediction of one branch for a single feature row.
    pub fn branch_nograd(&self, m: &[f64], branch: usize) -> Vec<f64> {
        let (w, b) = &self.branches[branch];
        let out_dim = w.shape[1];
        let mut out = b.values.clone();
        for (p, mv) in m.iter().enumerate() {
            if *mv == 0.0 {
                continue;
            }
            for j in 0..out_dim {
                out[j] += mv * w.values[p * out_dim + j];
            }
        }
        out
    }

    pub fn branch_batch_nograd(&self, m: &[f64], n: usize, branch: usize) -> Vec<f64> {
        let m_dim = m.len() / n;
        let mut out = Vec::with_capacity(n * self.branches[branch].0.shape[1]);
        for row in 0..n {
            out.extend(self.branch_nograd(&m[row * m_dim..(row + 1) * m_dim], branch));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = self.trunk.params.tensors.iter_mut().collect();
        for (w, b) in self.branches.iter_mut() {
            out.push(w);
            out.push(b);
        }
        if let Some((w, b)) = self.aux.as_mut() {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Policy stream: one hidden layer on the current observation, fusion with
/// m_t by concatenation, one hidden layer after the fusion, then the action
/// head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyStreamNet {
    pub input_dim: usize,
    pub m_dim: usize,
    pub hidden: usize,
    pub l1: (ParamTensor, ParamTensor),
    pub l2: (ParamTensor, ParamTensor),
    pub head: (ParamTensor, ParamTensor),
    pub aux: Option<(ParamTensor, ParamTensor)>,
    pub use_stop_gradient: bool,
}

impl PolicyStreamNet {
    pub fn init(cfg: &MethodConfig, input_dim: usize, action_dim: usize, vel_dim: usize) -> Self {
        let l1 = init_linear(cfg.seed, "policy_l1", input_dim, cfg.hidden);
        let l2 = init_linear(cfg.seed, "policy_l2", cfg.hidden + cfg.m_dim, cfg.hidden);
        let head = init_linear(cfg.seed, "policy_head", cfg.hidden, action_dim);
        let aux = if cfg.aux_velocity_head {
            Some(init_linear(cfg.seed, "policy_aux", cfg.hidden, vel_dim))
        } else {
            None
        };
        PolicyStreamNet {
            input_dim,
            m_dim: cfg.m_dim,
            hidden: cfg.hidden,
            l1,
            l2,
            head,
            aux,
            use_stop_gradient: cfg.kind != MethodKind::OursNoStopgrad,
        }
    }

    /// Action for one observation row given the memory feature.
    pub fn action_nograd(&self, input: &[f64], m: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_dim);
        debug_assert_eq!(m.len(), self.m_dim);
        let h1 = dense_relu(input, &self.l1);
        let mut fused = h1;
        fused.extend_from_slice(m);
        let h2 = dense_relu(&fused, &self.l2);
        let (w, b) = &self.head;
        let out_dim = w.shape[1];
        let mut out = b.values.clone();
        for (p, hv) in h2.iter().enumerate() {
            if *hv == 0.0 {
                continue;
            }
            for j in 0..out_dim {
                out[j] += hv * w.values[p * out_dim + j];
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = vec![
            &mut self.l1.0,
            &mut self.l1.1,
            &mut self.l2.0,
            &mut self.l2.1,
            &mut self.head.0,
            &mut self.head.1,
        ];
        if let Some((w, b)) = self.aux.as_mut() {
            out.push(w);
            out.push(b);
        }
        out
    }
}

fn dense_relu(x: &[f64], layer: &(ParamTensor, ParamTensor)) -> Vec<f64> {
    let (w, b) = layer;
    let out_dim = w.shape[1];
    let mut out = b.values.clone();
    for (p, xv) in x.iter().enumerate() {
        if *xv == 0.0 {
            continue;
        }
        for j in 0..out_dim {
            out[j] += xv * w.values[p * out_dim + j];
        }
    }
    for v in out.iter_mut() {
        *v = v.max(0.0);
    }
    out
}

/// Targets of the memory branches for the current method.
fn branch_targets(ds: &DemoDataset, cfg: &MethodConfig, idx: &[usize]) -> Vec<Vec<f64>> {
    match cfg.kind {
        MethodKind::MemoryObjAt => vec![gather_actions_idx(ds, idx)],
        MethodKind::MemoryObjAprev => vec![gather_prev_idx(ds, idx)],
        _ => (1..=cfg.effective_branches())
            .map(|i| Batch::residual_targets(ds, idx, i))
            .collect(),
    }
}

fn gather_actions_idx(ds: &DemoDataset, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for &i in idx {
        out.extend_from_slice(ds.action(ds.samples[i]));
    }
    out
}

fn gather_prev_idx(ds: &DemoDataset, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for &i in idx {
        out.extend_from_slice(ds.prev_action(ds.samples[i]));
    }
    out
}

/// Node handles of one two-stream forward/loss graph, for training and for
/// gradient audits in tests.
pub struct TwoStreamHandles {
    pub overall: Tensor,
    pub memory_total: Tensor,
    pub policy_total: Tensor,
    pub memory_action: f64,
    pub memory_aux: f64,
    pub policy_action: f64,
    pub policy_aux: f64,
    pub memory_nodes: Vec<NodeId>,
    pub policy_nodes: Vec<NodeId>,
}

/// Inputs to one two-stream graph, gathered per batch.
pub struct TwoStreamBatch<'a> {
    pub n: usize,
    pub windows: &'a [f64],
    /// Policy-stream input rows (current obs, or the window for the
    /// two-stream baselines).
    pub policy_input: &'a [f64],
    pub actions: &'a [f64],
    pub branch_targets: &'a [Vec<f64>],
    pub vel_targets: Option<&'a [f64]>,
    pub policy_weights: Option<&'a [f64]>,
}

/// Build the joint graph. The caller owns the tape so it can backward from
/// any of the returned loss nodes.
pub fn build_two_stream_graph(
    tape: &mut Tape,
    memory: &MemoryNet,
    policy: &PolicyStreamNet,
    cfg: &MethodConfig,
    batch: &TwoStreamBatch<'_>,
) -> Result<TwoStreamHandles> {
    let n = batch.n;
    let action_dim = batch.actions.len() / n;
    let leaf = |tape: &mut Tape, p: &ParamTensor| -> Tensor {
        tape.leaf(&Tensor::new(p.shape.clone(), p.values.clone()).expect("param shape"))
    };

    // bind memory stream
    let mem_bound = memory.trunk.bind(tape);
    let mut memory_nodes = mem_bound.param_nodes();
    let mem_branches: Vec<(Tensor, Tensor)> = memory
        .branches
        .iter()
        .map(|(w, b)| (leaf(tape, w), leaf(tape, b)))
        .collect();
    for (w, b) in &mem_branches {
        memory_nodes.push(w.node().expect("leaf"));
        memory_nodes.push(b.node().expect("leaf"));
    }
    let mem_aux = memory.aux.as_ref().map(|(w, b)| (leaf(tape, w), leaf(tape, b)));
    if let Some((w, b)) = &mem_aux {
        memory_nodes.push(w.node().expect("leaf"));
        memory_nodes.push(b.node().expect("leaf"));
    }

    // bind policy stream
    let pol_l1 = (leaf(tape, &policy.l1.0), leaf(tape, &policy.l1.1));
    let pol_l2 = (leaf(tape, &policy.l2.0), leaf(tape, &policy.l2.1));
    let pol_head = (leaf(tape, &policy.head.0), leaf(tape, &policy.head.1));
    let pol_aux = policy.aux.as_ref().map(|(w, b)| (leaf(tape, w), leaf(tape, b)));
    let mut policy_nodes = vec![
        pol_l1.0.node().expect("leaf"),
        pol_l1.1.node().expect("leaf"),
        pol_l2.0.node().expect("leaf"),
        pol_l2.1.node().expect("leaf"),
        pol_head.0.node().expect("leaf"),
        pol_head.1.node().expect("leaf"),
    ];
    if let Some((w, b)) = &pol_aux {
        policy_nodes.push(w.node().expect("leaf"));
        policy_nodes.push(b.node().expect("leaf"));
    }

    // memory stream forward
    let win_dim = batch.windows.len() / n;
    let x_mem = tape.leaf(&Tensor::new(vec![n, win_dim], batch.windows.to_vec()).expect("windows"));
    let m = mem_bound.forward(tape, &x_mem)?.output;

    // residual branches
    let mut mem_action_loss: Option<Tensor> = None;
    let mut first_branch_loss = 0.0;
    for (i, (w, b)) in mem_branches.iter().enumerate() {
        let pred = linear(tape, &m, w, b)?;
        let target = tape.leaf(
            &Tensor::new(vec![n, action_dim], batch.branch_targets[i].clone()).expect("targets"),
        );
        let loss_i = weighted_loss(tape, cfg.loss, &pred, &target, None)?;
        if i == 0 {
            first_branch_loss = loss_i.item();
        }
        mem_action_loss = Some(match mem_action_loss {
            None => loss_i,
            Some(acc) => tape.add(&acc, &loss_i)?,
        });
    }
    let mut mem_action_loss = mem_action_loss.expect("at least one branch");
    if mem_branches.len() > 1 {
        mem_action_loss = tape.scale(&mem_action_loss, 1.0 / mem_branches.len() as f64)?;
    }

    let mut memory_aux_value = 0.0;
    let mut memory_total = mem_action_loss.clone();
    if let (Some((aw, ab)), Some(vel)) = (&mem_aux, batch.vel_targets) {
        let vel_dim = vel.len() / n;
        let pred = linear(tape, &m, aw, ab)?;
        let target = tape.leaf(&Tensor::new(vec![n, vel_dim], vel.to_vec()).expect("vel targets"));
        let aux_loss = weighted_loss(tape, cfg.loss, &pred, &target, None)?;
        memory_aux_value = aux_loss.item();
        let sa = tape.scale(&mem_action_loss, cfg.alpha)?;
        let sv = tape.scale(&aux_loss, 1.0 - cfg.alpha)?;
        memory_total = tape.add(&sa, &sv)?;
    }

    // policy stream forward with fused memory feature
    let x_pol = tape.leaf(
        &Tensor::new(vec![n, policy.input_dim], batch.policy_input.to_vec()).expect("policy input"),
    );
    let h1_lin = linear(tape, &x_pol, &pol_l1.0, &pol_l1.1)?;
    let h1 = tape.relu(&h1_lin)?;
    let m_fused = if policy.use_stop_gradient {
        tape.stop_gradient(&m)?
    } else {
        m.clone()
    };
    let fused = tape.concat_lastdim(&h1, &m_fused)?;
    let h2_lin = linear(tape, &fused, &pol_l2.0, &pol_l2.1)?;
    let h2 = tape.relu(&h2_lin)?;
    let a_pred = linear(tape, &h2, &pol_head.0, &pol_head.1)?;
    let a_target =
        tape.leaf(&Tensor::new(vec![n, action_dim], batch.actions.to_vec()).expect("actions"));
    let policy_action_loss =
        weighted_loss(tape, cfg.loss, &a_pred, &a_target, batch.policy_weights)?;

    let mut policy_aux_value = 0.0;
    let mut policy_total = policy_action_loss.clone();
    if let (Some((aw, ab)), Some(vel)) = (&pol_aux, batch.vel_targets) {
        let vel_dim = vel.len() / n;
        let pred = linear(tape, &h2, aw, ab)?;
        let target = tape.leaf(&Tensor::new(vec![n, vel_dim], vel.to_vec()).expect("vel targets"));
        let aux_loss = weighted_loss(tape, cfg.loss, &pred, &target, batch.policy_weights)?;
        policy_aux_value = aux_loss.item();
        let sa = tape.scale(&policy_action_loss, cfg.alpha)?;
        let sv = tape.scale(&aux_loss, 1.0 - cfg.alpha)?;
        policy_total = tape.add(&sa, &sv)?;
    }

    let overall = tape.add(&memory_total, &policy_total)?;

    Ok(TwoStreamHandles {
        overall,
        memory_total,
        policy_total,
        memory_action: first_branch_loss,
        memory_aux: memory_aux_value,
        policy_action: policy_action_loss.item(),
        policy_aux: policy_aux_value,
        memory_nodes,
        policy_nodes,
    })
}

pub(crate) fn train_two_stream_family(
    ds: &DemoDataset,
    cfg: &MethodConfig,
) -> Result<(TrainedPolicy, TrainReport)> {
    match cfg.kind {
        MethodKind::MemoryOnlyResidual | MethodKind::MemoryOnlyLearned => {
            train_memory_only(ds, cfg)
        }
        _ => train_joint(ds, cfg),
    }
}

fn train_joint(ds: &DemoDataset, cfg: &MethodConfig) -> Result<(TrainedPolicy, TrainReport)> {
    let action_dim = ds.action_dim();
    let vel_dim = velocity_dim(ds);
    let vel_scale = velocity_scale(ds);
    let policy_uses_window = matches!(
        cfg.kind,
        MethodKind::TwoStreamBcoh | MethodKind::TwoStreamKeyframe
    );
    let policy_input_dim = if policy_uses_window {
        ds.window_dim()
    } else {
        ds.obs_dim()
    };

    let mut memory = MemoryNet::init(cfg, ds.window_dim(), action_dim, vel_dim)?;
    let mut policy = PolicyStreamNet::init(cfg, policy_input_dim, action_dim, vel_dim);
    let mut adam = {
        let mut params = memory.params_mut();
        params.extend(policy.params_mut());
        AdamState::new(cfg.adam, &params)
    };
    let mut schedule = PlateauSchedule::new(cfg.lr);
    let mut sampler = BatchSampler::new(
        &ds.train_idx,
        cfg.batch_size,
        rng::stream(cfg.seed, "batches", 0),
    );
    let weights = match cfg.kind {
        MethodKind::TwoStreamKeyframe => Some(keyframe_weights(ds, cfg.keyframe_kappa)),
        _ => None,
    };

    // validation matrices
    let val_windows = gather_inputs(ds, &ds.val_idx, true);
    let val_policy_inputs = gather_inputs(ds, &ds.val_idx, policy_uses_window);
    let val_actions = gather_actions(ds, &ds.val_idx);

    let mut report = TrainReport::default();

    for iter in 0..cfg.iterations {
        let idx = sampler.next_batch();
        let batch = Batch::gather(ds, &idx);
        let branch_tg = branch_targets(ds, cfg, &idx);
        let vel_targets = if cfg.aux_velocity_head {
            Some(Batch::velocity_targets(ds, &idx, vel_scale))
        } else {
            None
        };
        let batch_weights: Option<Vec<f64>> = weights
            .as_ref()
            .map(|w| idx.iter().map(|&i| w[i]).collect());

        let mut tape = Tape::new();
        let policy_input = if policy_uses_window {
            &batch.windows
        } else {
            &batch.obs
        };
        let handles = build_two_stream_graph(
            &mut tape,
            &memory,
            &policy,
            cfg,
            &TwoStreamBatch {
                n: batch.n,
                windows: &batch.windows,
                policy_input,
                actions: &batch.actions,
                branch_targets: &branch_tg,
                vel_targets: vel_targets.as_deref(),
                policy_weights: batch_weights.as_deref(),
            },
        )?;

        let total_value = handles.overall.item();
        if !total_value.is_finite() {
            return Err(MethodError::Diverged {
                iter,
                loss: total_value,
            });
        }

        let grads_map = tape.backward(&handles.overall)?;
        let lr = schedule.lr();
        {
            let mut params = memory.params_mut();
            params.extend(policy.params_mut());
            let node_ids: Vec<NodeId> = handles
                .memory_nodes
                .iter()
                .chain(&handles.policy_nodes)
                .copied()
                .collect();
            let grads: Vec<Vec<f64>> = node_ids
                .iter()
                .zip(&params)
                .map(|(id, p)| grads_map.get_or_zeros(*id, p.len()))
                .collect();
            adam_step(&mut adam, &mut params, &grads, lr)?;
        }

        report.rows.push(TrainRow {
            iter,
            lr,
            total: total_value,
            action: handles.policy_action,
            aux: handles.policy_aux,
            memory: handles.memory_action,
            adversary: 0.0,
        });

        if (iter + 1) % cfg.val_every == 0 || iter + 1 == cfg.iterations {
            let n_val = ds.val_idx.len();
            let m_val = memory.feature_batch_nograd(&val_windows, n_val);
            let mut preds = Vec::with_capacity(n_val * action_dim);
            let m_dim = cfg.m_dim;
            for row in 0..n_val {
                preds.extend(policy.action_nograd(
                    &val_policy_inputs[row * policy_input_dim..(row + 1) * policy_input_dim],
                    &m_val[row * m_dim..(row + 1) * m_dim],
                ));
            }
            let val_action = plain_loss_nograd(cfg.loss, &preds, &val_actions);
            report.val_rows.push(ValRow {
                iter,
                action: val_action,
                adversary: 0.0,
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
        nets: PolicyNets::TwoStream { memory, policy },
    };
    Ok((policy, report))
}

/// Train only the memory stream, then either act through the residual
/// controller or fit a fresh controller head on the frozen feature.
fn train_memory_only(ds: &DemoDataset, cfg: &MethodConfig) -> Result<(TrainedPolicy, TrainReport)> {
    let action_dim = ds.action_dim();
    let vel_dim = velocity_dim(ds);
    let vel_scale = velocity_scale(ds);

    let mut memory = MemoryNet::init(cfg, ds.window_dim(), action_dim, vel_dim)?;
    let mut adam = AdamState::new(cfg.adam, &memory.params_mut());
    let mut schedule = PlateauSchedule::new(cfg.lr);
    let mut sampler = BatchSampler::new(
        &ds.train_idx,
        cfg.batch_size,
        rng::stream(cfg.seed, "batches", 0),
    );

    let val_windows = gather_inputs(ds, &ds.val_idx, true);
    let mut val_residuals = Vec::new();
    for &i in &ds.val_idx {
        val_residuals.extend(ds.residual(ds.samples[i]));
    }

    let mut report = TrainReport::default();

    for iter in 0..cfg.iterations {
        let idx = sampler.next_batch();
        let batch = Batch::gather(ds, &idx);
        let residuals = Batch::residual_targets(ds, &idx, 1);
        let vel_targets = if cfg.aux_velocity_head {
            Some(Batch::velocity_targets(ds, &idx, vel_scale))
        } else {
            None
        };

        let mut tape = Tape::new();
        let bound = memory.trunk.bind(&mut tape);
        let leaf = |tape: &mut Tape, p: &ParamTensor| -> Tensor {
            tape.leaf(&Tensor::new(p.shape.clone(), p.values.clone()).expect("param shape"))
        };
        let (bw, bb) = (&memory.branches[0].0, &memory.branches[0].1);
        let (bw, bb) = (leaf(&mut tape, bw), leaf(&mut tape, bb));
        let aux_bound = memory.aux.as_ref().map(|(w, b)| (leaf(&mut tape, w), leaf(&mut tape, b)));

        let x = tape.leaf(
            &Tensor::new(vec![batch.n, ds.window_dim()], batch.windows.clone()).expect("windows"),
        );
        let m = bound.forward(&mut tape, &x)?.output;
        let pred = linear(&mut tape, &m, &bw, &bb)?;
        let target =
            tape.leaf(&Tensor::new(vec![batch.n, action_dim], residuals).expect("residuals"));
        let res_loss = weighted_loss(&mut tape, cfg.loss, &pred, &target, None)?;

        let mut total = res_loss.clone();
        let mut aux_value = 0.0;
        if let (Some((aw, ab)), Some(vel)) = (&aux_bound, &vel_targets) {
            let vd = vel.len() / batch.n;
            let vp = linear(&mut tape, &m, aw, ab)?;
            let vt = tape.leaf(&Tensor::new(vec![batch.n, vd], vel.clone()).expect("vel"));
            let aux_loss = weighted_loss(&mut tape, cfg.loss, &vp, &vt, None)?;
            aux_value = aux_loss.item();
            let sa = tape.scale(&res_loss, cfg.alpha)?;
            let sv = tape.scale(&aux_loss, 1.0 - cfg.alpha)?;
            total = tape.add(&sa, &sv)?;
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
        node_ids.push(bw.node().expect("leaf"));
        node_ids.push(bb.node().expect("leaf"));
        if let Some((aw, ab)) = &aux_bound {
            node_ids.push(aw.node().expect("leaf"));
            node_ids.push(ab.node().expect("leaf"));
        }
        let lr = schedule.lr();
        let mut params = memory.params_mut();
        let grads: Vec<Vec<f64>> = node_ids
            .iter()
            .zip(&params)
            .map(|(id, p)| grads_map.get_or_zeros(*id, p.len()))
            .collect();
        adam_step(&mut adam, &mut params, &grads, lr)?;
        drop(params);

        report.rows.push(TrainRow {
            iter,
            lr,
            total: total_value,
            action: 0.0,
            aux: aux_value,
            memory: res_loss.item(),
            adversary: 0.0,
        });

        if (iter + 1) % cfg.val_every == 0 || iter + 1 == cfg.iterations {
            let n_val = ds.val_idx.len();
            let m_val = memory.feature_batch_nograd(&val_windows, n_val);
            let preds = memory.branch_batch_nograd(&m_val, n_val, 0);
            let val_loss = plain_loss_nograd(cfg.loss, &preds, &val_residuals);
            report.val_rows.push(ValRow {
                iter,
                action: val_loss,
                adversary: 0.0,
            });
            schedule.observe(iter, val_loss);
        }
    }

    let final_train_loss = report.rows.last().map(|r| r.total).unwrap_or(f64::NAN);
    let final_val_loss = report.final_val_action().unwrap_or(f64::NAN);

    let nets = match cfg.kind {
        MethodKind::MemoryOnlyResidual => PolicyNets::MemoryResidual(memory),
        MethodKind::MemoryOnlyLearned => {
            let controller = fit_controller(ds, cfg, &memory)?;
            PolicyNets::MemoryLearned { memory, controller }
        }
        _ => unreachable!("memory-only trainer"),
    };

    Ok((
        TrainedPolicy {
            config: cfg.clone(),
            env: ds.env.clone(),
            final_train_loss,
            final_val_loss,
            nets,
        },
        report,
    ))
}

/// Fit a fresh action head on the frozen memory feature. The memory
/// parameters are never touched: features are precomputed without a tape.
fn fit_controller(ds: &DemoDataset, cfg: &MethodConfig, memory: &MemoryNet) -> Result<Mlp> {
    let action_dim = ds.action_dim();
    let spec = MlpSpec::new(vec![cfg.m_dim, 32, action_dim], Activation::Relu);
    let mut controller = Mlp::init(spec, cfg.seed, "controller")?;
    let mut adam = AdamState::new(cfg.adam, &controller.params.tensors);
    let mut schedule = PlateauSchedule::new(cfg.lr);
    let mut sampler = BatchSampler::new(
        &ds.train_idx,
        cfg.batch_size,
        rng::stream(cfg.seed, "controller/batches", 0),
    );

    // frozen features for the whole dataset, one pass
    let mut features = vec![0.0; ds.samples.len() * cfg.m_dim];
    for (i, &s) in ds.samples.iter().enumerate() {
        let w = ds.window(s);
        let m = memory.feature_nograd(&w);
        features[i * cfg.m_dim..(i + 1) * cfg.m_dim].copy_from_slice(&m);
    }

    for iter in 0..cfg.iterations {
        let idx = sampler.next_batch();
        let n = idx.len();
        let mut m_batch = Vec::with_capacity(n * cfg.m_dim);
        let mut actions = Vec::with_capacity(n * action_dim);
        for &i in &idx {
            m_batch.extend_from_slice(&features[i * cfg.m_dim..(i + 1) * cfg.m_dim]);
            actions.extend_from_slice(ds.action(ds.samples[i]));
        }
        let mut tape = Tape::new();
        let bound = controller.bind(&mut tape);
        let x = tape.leaf(&Tensor::new(vec![n, cfg.m_dim], m_batch).expect("features"));
        let fwd = bound.forward(&mut tape, &x)?;
        let target = tape.leaf(&Tensor::new(vec![n, action_dim], actions).expect("actions"));
        let loss = weighted_loss(&mut tape, cfg.loss, &fwd.output, &target, None)?;
        if !loss.item().is_finite() {
            return Err(MethodError::Diverged {
                iter,
                loss: loss.item(),
            });
        }
        let grads_map = tape.backward(&loss)?;
        let node_ids = bound.param_nodes();
        let grads: Vec<Vec<f64>> = node_ids
            .iter()
            .zip(&controller.params.tensors)
            .map(|(id, p)| grads_map.get_or_zeros(*id, p.len()))
            .collect();
        let lr = schedule.observe(iter, loss.item());
        adam_step(&mut adam, &mut controller.params.tensors, &grads, lr)?;
    }
    Ok(controller)
}

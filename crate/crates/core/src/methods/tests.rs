use std::sync::LazyLock;

use crate::autodiff::Tape;
use crate::demos::{collect, CollectConfig, DemoDataset};
use crate::envs::{BrakeTownConfig, EnvConfig, TrafficLevel};
use crate::nn::Mlp;

use super::data::{history_dropout_mask, keyframe_weights};
use super::two_stream::{build_two_stream_graph, MemoryNet, PolicyStreamNet, TwoStreamBatch};
use super::*;

/// Small shared dataset so each test does not recollect demonstrations.
static TINY: LazyLock<DemoDataset> = LazyLock::new(|| {
    let env = EnvConfig::Braketown(BrakeTownConfig {
        road_length: 120.0,
        time_limit: 600,
        traffic_level: TrafficLevel::Regular,
        ..BrakeTownConfig::default()
    });
    collect(&CollectConfig::new(env, 5, 7, 6)).unwrap()
});

fn quick(kind: MethodKind, seed: u64) -> MethodConfig {
    let mut cfg = MethodConfig::braketown(kind, seed);
    cfg.iterations = 120;
    cfg.batch_size = 32;
    cfg.val_every = 40;
    cfg
}

fn mlp_bits(mlp: &Mlp) -> Vec<u64> {
    mlp.params
        .tensors
        .iter()
        .flat_map(|t| t.values.iter().map(|v| v.to_bits()))
        .collect()
}

fn single_net(policy: &TrainedPolicy) -> &SingleStreamNet {
    match &policy.nets {
        PolicyNets::Single(net) => net,
        other => panic!("expected single-stream nets, got {other:?}"),
    }
}

fn action_trace(report: &TrainReport) -> Vec<u64> {
    report.rows.iter().map(|r| r.action.to_bits()).collect()
}

#[test]
fn alpha_one_equals_pure_bc() {
    let mut with_aux = quick(MethodKind::Bcoh, 3);
    with_aux.alpha = 1.0;
    with_aux.aux_velocity_head = true;
    let mut without = quick(MethodKind::Bcoh, 3);
    without.aux_velocity_head = false;
    let (p1, r1) = train(&TINY, &with_aux).unwrap();
    let (p2, r2) = train(&TINY, &without).unwrap();
    assert_eq!(action_trace(&r1), action_trace(&r2));
    assert_eq!(mlp_bits(&single_net(&p1).mlp), mlp_bits(&single_net(&p2).mlp));
}

#[test]
fn default_alpha_is_paper_value() {
    assert_eq!(MethodConfig::default().alpha, 0.95);
}

#[test]
fn hd_with_p0_is_bitwise_bcoh() {
    let mut hd = quick(MethodKind::Hd, 4);
    hd.dropout_p = 0.0;
    let bcoh = quick(MethodKind::Bcoh, 4);
    let (p1, r1) = train(&TINY, &hd).unwrap();
    let (p2, r2) = train(&TINY, &bcoh).unwrap();
    assert_eq!(action_trace(&r1), action_trace(&r2));
    assert_eq!(mlp_bits(&single_net(&p1).mlp), mlp_bits(&single_net(&p2).mlp));
}

#[test]
fn hd_with_p1_zeroes_every_past_frame() {
    let mut rng = crate::rng::stream(0, "test/mask", 0);
    let mask = history_dropout_mask(&mut rng, 3, 7, 5, 1.0);
    for row in 0..3 {
        for frame in 0..7 {
            for k in 0..5 {
                let v = mask[(row * 7 + frame) * 5 + k];
                if frame == 0 {
                    assert_eq!(v, 1.0, "current frame must never drop");
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}

#[test]
fn fca_with_lambda0_matches_bcoh_on_the_shared_net() {
    let mut fca = quick(MethodKind::Fca, 5);
    fca.fca_lambda = 0.0;
    let bcoh = quick(MethodKind::Bcoh, 5);
    let (p1, r1) = train(&TINY, &fca).unwrap();
    let (p2, r2) = train(&TINY, &bcoh).unwrap();
    assert_eq!(action_trace(&r1), action_trace(&r2));
    assert_eq!(mlp_bits(&single_net(&p1).mlp), mlp_bits(&single_net(&p2).mlp));
}

#[test]
fn keyframe_with_kappa0_is_bitwise_bcoh() {
    let mut kf = quick(MethodKind::Keyframe, 6);
    kf.keyframe_kappa = 0.0;
    let bcoh = quick(MethodKind::Bcoh, 6);
    let (p1, r1) = train(&TINY, &kf).unwrap();
    let (p2, r2) = train(&TINY, &bcoh).unwrap();
    assert_eq!(action_trace(&r1), action_trace(&r2));
    assert_eq!(mlp_bits(&single_net(&p1).mlp), mlp_bits(&single_net(&p2).mlp));
}

#[test]
fn keyframe_weights_normalize_to_mean_one() {
    let w = keyframe_weights(&TINY, 10.0);
    let mean: f64 =
        TINY.train_idx.iter().map(|&i| w[i]).sum::<f64>() / TINY.train_idx.len() as f64;
    assert!((mean - 1.0).abs() < 1e-12, "mean {mean}");
    assert!(w.iter().all(|v| *v >= 0.0));
}

#[test]
fn keyframe_weights_on_constant_actions_are_all_one() {
    let mut ds = TINY.clone();
    for traj in ds.trajectories.iter_mut() {
        for step in traj.steps.iter_mut() {
            step.action = vec![0.3];
        }
    }
    let w = keyframe_weights(&ds, 25.0);
    for &i in &ds.train_idx {
        assert_eq!(w[i], 1.0);
    }
}

#[test]
fn stop_gradient_isolates_memory_stream_from_policy_loss() {
    let cfg = quick(MethodKind::Ours, 8);
    let idx: Vec<usize> = TINY.train_idx[..16].to_vec();
    let batch = super::data::Batch::gather(&TINY, &idx);
    let branch_tg = vec![super::data::Batch::residual_targets(&TINY, &idx, 1)];
    let vel = super::data::Batch::velocity_targets(&TINY, &idx, 10.0);

    let memory = MemoryNet::init(&cfg, TINY.window_dim(), 1, 1).unwrap();
    let policy = PolicyStreamNet::init(&cfg, TINY.obs_dim(), 1, 1);
    let mut tape = Tape::new();
    let handles = build_two_stream_graph(
        &mut tape,
        &memory,
        &policy,
        &cfg,
        &TwoStreamBatch {
            n: batch.n,
            windows: &batch.windows,
            policy_input: &batch.obs,
            actions: &batch.actions,
            branch_targets: &branch_tg,
            vel_targets: Some(&vel),
            policy_weights: None,
        },
    )
    .unwrap();

    // policy loss reaches no memory parameter
    let grads = tape.backward(&handles.policy_total).unwrap();
    for id in &handles.memory_nodes {
        let g = grads.get(*id);
        assert!(
            g.is_none_or(|g| g.iter().all(|v| *v == 0.0)),
            "policy loss leaked into memory params"
        );
    }
    // the overall loss does reach them (through the memory objective)
    let grads = tape.backward(&handles.overall).unwrap();
    let total: f64 = handles
        .memory_nodes
        .iter()
        .filter_map(|id| grads.get(*id))
        .flat_map(|g| g.iter().map(|v| v.abs()))
        .sum();
    assert!(total > 0.0);
}

#[test]
fn no_stopgrad_variant_leaks_policy_gradient_into_memory() {
    let cfg = quick(MethodKind::OursNoStopgrad, 8);
    let idx: Vec<usize> = TINY.train_idx[..16].to_vec();
    let batch = super::data::Batch::gather(&TINY, &idx);
    let branch_tg = vec![super::data::Batch::residual_targets(&TINY, &idx, 1)];

    let memory = MemoryNet::init(&cfg, TINY.window_dim(), 1, 1).unwrap();
    let policy = PolicyStreamNet::init(&cfg, TINY.obs_dim(), 1, 1);
    let mut tape = Tape::new();
    let handles = build_two_stream_graph(
        &mut tape,
        &memory,
        &policy,
        &cfg,
        &TwoStreamBatch {
            n: batch.n,
            windows: &batch.windows,
            policy_input: &batch.obs,
            actions: &batch.actions,
            branch_targets: &branch_tg,
            vel_targets: None,
            policy_weights: None,
        },
    )
    .unwrap();
    let grads = tape.backward(&handles.policy_total).unwrap();
    let total: f64 = handles
        .memory_nodes
        .iter()
        .filter_map(|id| grads.get(*id))
        .flat_map(|g| g.iter().map(|v| v.abs()))
        .sum();
    assert!(total > 0.0, "gradient should flow without the stop-gradient");
}

#[test]
fn multibranch_one_reproduces_ours_bit_exactly() {
    let ours = quick(MethodKind::Ours, 9);
    let mut mb = quick(MethodKind::OursMultibranch, 9);
    mb.branches = 1;
    let (p1, _) = train(&TINY, &ours).unwrap();
    let (p2, _) = train(&TINY, &mb).unwrap();
    let (m1, pol1) = two_stream_parts(&p1);
    let (m2, pol2) = two_stream_parts(&p2);
    assert_eq!(mlp_bits(&m1.trunk), mlp_bits(&m2.trunk));
    assert_eq!(
        pol1.head.0.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        pol2.head.0.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

fn two_stream_parts(p: &TrainedPolicy) -> (&MemoryNet, &PolicyStreamNet) {
    match &p.nets {
        PolicyNets::TwoStream { memory, policy } => (memory, policy),
        other => panic!("expected two-stream nets, got {other:?}"),
    }
}

#[test]
fn training_is_reproducible_bit_exactly() {
    let cfg = quick(MethodKind::Ours, 10);
    let (p1, r1) = train(&TINY, &cfg).unwrap();
    let (p2, r2) = train(&TINY, &cfg).unwrap();
    let (m1, _) = two_stream_parts(&p1);
    let (m2, _) = two_stream_parts(&p2);
    assert_eq!(mlp_bits(&m1.trunk), mlp_bits(&m2.trunk));
    assert_eq!(
        r1.rows.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>(),
        r2.rows.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn act_is_deterministic_clamped_and_history_blind_for_bcso() {
    let cfg = quick(MethodKind::Bcso, 11);
    let (policy, _) = train(&TINY, &cfg).unwrap();
    let s = TINY.samples[10];
    let obs = TINY.obs(s).to_vec();
    let window = obs.clone(); // H = 0
    let a1 = policy.act(&obs, &window, None).unwrap();
    let a2 = policy.act(&obs, &window, None).unwrap();
    assert_eq!(a1, a2);
    assert!(a1.iter().all(|v| (-1.0..=1.0).contains(v)));

    // bcoh policies consume windows; perturbing past frames changes nothing
    // for bcso because its input is the current observation alone
    let cfg = quick(MethodKind::Bcoh, 11);
    let (bcoh, _) = train(&TINY, &cfg).unwrap();
    let w = TINY.window(s);
    let mut w_perturbed = w.clone();
    for v in w_perturbed.iter_mut().skip(TINY.obs_dim()) {
        *v += 0.25;
    }
    let b1 = bcoh.act(&obs, &w, None).unwrap();
    let b2 = bcoh.act(&obs, &w_perturbed, None).unwrap();
    assert_ne!(b1, b2, "bcoh must read history");
}

#[test]
fn clamping_saturates_large_outputs() {
    let cfg = quick(MethodKind::Bcso, 12);
    let (mut policy, _) = train(&TINY, &cfg).unwrap();
    if let PolicyNets::Single(net) = &mut policy.nets {
        for t in net.mlp.params.tensors.iter_mut() {
            for v in t.values.iter_mut() {
                *v = 5.0;
            }
        }
    }
    let s = TINY.samples[0];
    let a = policy.act(TINY.obs(s), TINY.obs(s), None).unwrap();
    assert_eq!(a, vec![1.0]);
}

#[test]
fn memory_only_learned_freezes_the_memory_stream() {
    let res_cfg = quick(MethodKind::MemoryOnlyResidual, 13);
    let learned_cfg = quick(MethodKind::MemoryOnlyLearned, 13);
    let (p_res, _) = train(&TINY, &res_cfg).unwrap();
    let (p_learned, _) = train(&TINY, &learned_cfg).unwrap();
    let m_res = match &p_res.nets {
        PolicyNets::MemoryResidual(m) => m,
        other => panic!("unexpected nets {other:?}"),
    };
    let m_learned = match &p_learned.nets {
        PolicyNets::MemoryLearned { memory, .. } => memory,
        other => panic!("unexpected nets {other:?}"),
    };
    // same training stream, and controller fitting never touches the memory
    assert_eq!(mlp_bits(&m_res.trunk), mlp_bits(&m_learned.trunk));
}

#[test]
fn memory_residual_controller_requires_prev_action() {
    let cfg = quick(MethodKind::MemoryOnlyResidual, 14);
    let (policy, _) = train(&TINY, &cfg).unwrap();
    let s = TINY.samples[20];
    let w = TINY.window(s);
    assert!(matches!(
        policy.act(TINY.obs(s), &w, None),
        Err(MethodError::MissingPrevAction)
    ));
    let a = policy.act(TINY.obs(s), &w, Some(&[0.2])).unwrap();
    assert!(a[0].abs() <= 1.0);

    // and no other method accepts one
    let cfg = quick(MethodKind::Bcoh, 14);
    let (bcoh, _) = train(&TINY, &cfg).unwrap();
    assert!(matches!(
        bcoh.act(TINY.obs(s), &w, Some(&[0.2])),
        Err(MethodError::UnexpectedPrevAction { .. })
    ));
}

#[test]
fn ours_fusion_reacts_to_the_memory_feature() {
    let cfg = quick(MethodKind::Ours, 15);
    let (policy, _) = train(&TINY, &cfg).unwrap();
    let mut total_change = 0.0;
    for &i in TINY.val_idx.iter().take(50) {
        let s = TINY.samples[i];
        let w = TINY.window(s);
        let a = policy.act(TINY.obs(s), &w, None).unwrap();
        let zeros = vec![0.0; cfg.m_dim];
        let a_zeroed = policy.act_with_memory_override(TINY.obs(s), &zeros).unwrap();
        total_change += (a[0] - a_zeroed[0]).abs();
    }
    assert!(total_change > 0.0, "memory feature is ignored by the policy");
}

#[test]
fn dagger_zero_rounds_is_the_initial_clone() {
    let mut dg = quick(MethodKind::Dagger, 16);
    dg.dagger_rounds = 0;
    let bcoh = quick(MethodKind::Bcoh, 16);
    let (p1, _, stats) = train_dagger(&TINY, &dg).unwrap();
    let (p2, _) = train(&TINY, &bcoh).unwrap();
    assert_eq!(mlp_bits(&single_net(&p1).mlp), mlp_bits(&single_net(&p2).mlp));
    assert_eq!(stats.queries, 0);
}

#[test]
fn dagger_grows_the_dataset_and_respects_the_budget() {
    let mut dg = quick(MethodKind::Dagger, 17);
    dg.iterations = 60;
    dg.dagger_rounds = 2;
    dg.dagger_episodes_per_round = 2;
    dg.dagger_query_budget = 700;
    let (_, _, stats) = train_dagger(&TINY, &dg).unwrap();
    assert!(stats.queries <= 700, "queries {}", stats.queries);
    for w in stats.samples_per_round.windows(2) {
        assert!(w[1] >= w[0], "aggregate shrank: {:?}", stats.samples_per_round);
    }
    assert!(stats.samples_per_round.len() >= 2);
}

#[test]
fn policy_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.json");
    let cfg = quick(MethodKind::Ours, 18);
    let (policy, _) = train(&TINY, &cfg).unwrap();
    policy.save(&path).unwrap();
    let loaded = TrainedPolicy::load(&path).unwrap();
    let s = TINY.samples[5];
    let w = TINY.window(s);
    assert_eq!(
        policy.act(TINY.obs(s), &w, None).unwrap(),
        loaded.act(TINY.obs(s), &w, None).unwrap()
    );
}

#[test]
fn h_mismatch_is_rejected() {
    let mut cfg = quick(MethodKind::Bcoh, 19);
    cfg.h = 3;
    assert!(matches!(
        train(&TINY, &cfg),
        Err(MethodError::HistoryMismatch { config: 3, dataset: 6 })
    ));
    let mut cfg = quick(MethodKind::Ours, 19);
    cfg.h = 0;
    assert!(matches!(
        train(&TINY, &cfg),
        Err(MethodError::NeedsHistory { .. })
    ));
}

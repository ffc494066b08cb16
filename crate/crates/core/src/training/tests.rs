use super::*;
use crate::autodiff::gradcheck::check_param_gradients;
use crate::da_graph::DaConfig;
use crate::evaluation::{predict_scene, scene_metrics};
use crate::network::tests::{toy_config, toy_inputs};
use crate::scenario::samples::simple_scenario_with;
use crate::scenario::{normalize_to_target, Horizon};

fn scalar(t: &Tape, v: Var) -> f64 {
    t.value(v).item()
}

#[test]
fn labels_follow_radius_and_kernel() {
    let s = toy_inputs();
    let cfg = TrainConfig::default();
    let goal = s.da.nodes[0].position;
    let h = goal_labels(&s.da, goal, &cfg);
    for (n, &v) in s.da.nodes.iter().zip(&h) {
        let d = n.position.dist(goal);
        if d < 1.0 {
            assert_eq!(v, 1.0);
        } else {
            assert!((v - (-d * d / 8.0).exp()).abs() < 1e-15);
        }
    }
    assert_eq!(h[0], 1.0);
}

#[test]
fn label_boundary_is_soft() {
    let s = toy_inputs();
    let cfg = TrainConfig::default();
    let p = s.da.nodes[0].position;
    let h = goal_labels(&s.da, Vec2::new(p.x + 1.0, p.y), &cfg);
    assert!((h[0] - (-1.0f64 / 8.0).exp()).abs() < 1e-15);
}

#[test]
fn wta_regression_uses_closest_header() {
    let mut t = Tape::new();
    let g = t.input(Tensor::from_vec(2, 2, vec![0.0, 0.0, 3.0, 4.0])).unwrap();
    let (l, m) = goal_regression_loss(&mut t, g, Vec2::new(3.0, 4.5)).unwrap();
    assert_eq!(m, 1);
    assert_eq!(scalar(&t, l), 0.125);
    let grads = t.backward(l).unwrap();
    assert_eq!(grads.get(g).unwrap().data, vec![0.0, 0.0, 0.0, -0.5]);
}

#[test]
fn wta_ties_pick_lower_header() {
    let goals = Tensor::from_vec(2, 2, vec![1.0, 0.0, -1.0, 0.0]);
    assert_eq!(winner(&goals, Vec2::ZERO), 0);
}

#[test]
fn trajectory_loss_is_mean_smooth_l1() {
    let mut t = Tape::new();
    let p = t.input(Tensor::from_vec(1, 4, vec![0.0, 0.0, 2.0, 0.0])).unwrap();
    let l = trajectory_regression_loss(&mut t, p, &[Vec2::new(0.5, 0.0), Vec2::new(0.0, 0.0)]).unwrap();
    assert_eq!(scalar(&t, l), (0.125 + 1.5) / 4.0);
}

#[test]
fn total_loss_weights() {
    let mut t = Tape::new();
    let c = |t: &mut Tape, v| t.constant(Tensor::scalar(v)).unwrap();
    let (a, b, d) = (c(&mut t, 1.0), c(&mut t, 2.0), c(&mut t, 3.0));
    let l = total_loss(&mut t, a, b, d, &TrainConfig::default()).unwrap();
    assert!((scalar(&t, l) - 1.56).abs() < 1e-12);
}

#[test]
fn lr_schedule() {
    let cfg = TrainConfig::default();
    for e in 0..25 {
        assert_eq!(cfg.lr_at(e), 1e-3);
    }
    assert!((cfg.lr_at(29) - 1e-4).abs() < 1e-18);
    for e in 25..30 {
        assert!(cfg.lr_at(e) < cfg.lr_at(e - 1));
    }
}

#[test]
fn missing_future_is_rejected() {
    let mut s = toy_inputs();
    let tgt = s.target;
    s.scenario.tracks[tgt].gt_future = None;
    let model = Model::new(toy_config(), 1).unwrap();
    let mut t = Tape::new();
    assert!(matches!(
        scene_loss(&model, &mut t, &s, &TrainConfig::default()),
        Err(DspError::MissingGtFuture)
    ));
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let s = toy_inputs();
    let model = Model::new(toy_config(), 5).unwrap();
    let cfg = TrainConfig::default();
    let rep = check_param_gradients(&model.params, |t, p| {
        let m = Model {
            cfg: model.cfg,
            params: p.clone(),
        };
        Ok(scene_loss(&m, t, &s, &cfg)?.total)
    })
    .unwrap();
    let mut worst = rep.per_param.clone();
    worst.sort_by(|a, b| b.1.total_cmp(&a.1));
    worst.truncate(4);
    assert!(rep.rel_err < 1e-4, "relative error {}, worst {worst:?}", rep.rel_err);
}

fn small_config() -> NetConfig {
    NetConfig {
        d_da: 8,
        d_ls: 16,
        d_agt: 16,
        d_dec: 16,
        k_da: 3,
        l_ls: 2,
        num_da_blocks: 1,
        num_laneconv_layers: 1,
        m_headers: 6,
        k_sel: 16,
        t_obs: 8,
        h_pred: 10,
    }
}

fn small_scene() -> (Scenario, GraphConfig) {
    let hz = Horizon { t: 8, h: 10, dt: 0.1 };
    let s = normalize_to_target(&simple_scenario_with(hz)).unwrap();
    let g = GraphConfig {
        da: DaConfig {
            pitch: 2.0,
            extent: 16.0,
            ..Default::default()
        },
        ..Default::default()
    };
    (s, g)
}

#[test]
fn single_scene_overfits() {
    let (s, g) = small_scene();
    let set = TrainSet::new(vec![s], g, false).unwrap();
    let cfg = TrainConfig {
        epochs: 500,
        decay_start: 500,
        augment: false,
        ..Default::default()
    };
    let mut model = Model::new(small_config(), 3).unwrap();
    train(&mut model, &set, &[], &cfg, 0, None, &TrainOutputs::default()).unwrap();
    let inputs = &set.cached.as_ref().unwrap()[0];
    let p = predict_scene(&model, inputs, &crate::evaluation::DecoderSettings::new(DecoderKind::Nn, 6)).unwrap();
    let gt = inputs.scenario.tracks[inputs.target].gt_future.clone().unwrap();
    let m = scene_metrics(&p.trajectories, &p.probabilities, &gt, 6).unwrap();
    assert!(m.min_fde < 0.3, "minFDE {}", m.min_fde);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (s, g) = small_scene();
    let scenes: Vec<Scenario> = (0..3)
        .map(|i| {
            let mut c = s.clone();
            for p in c.tracks[0].gt_future.as_mut().unwrap() {
                p.y += 0.3 * i as f64;
            }
            c
        })
        .collect();
    let set = TrainSet::new(scenes, g, true).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 11,
        ..Default::default()
    };
    let mut straight = Model::new(small_config(), 4).unwrap();
    train(&mut straight, &set, &[], &cfg, 0, None, &TrainOutputs::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let last = dir.path().join("last.json");
    let log = dir.path().join("log.jsonl");
    let out = TrainOutputs {
        log: Some(log.clone()),
        best: None,
        last: Some(last.clone()),
    };
    let mut first = Model::new(small_config(), 4).unwrap();
    let one = TrainConfig { epochs: 1, ..cfg };
    train(&mut first, &set, &[], &one, 0, None, &out).unwrap();
    let (mut resumed, done, best) = load_model(&last).unwrap();
    assert_eq!(done, 1);
    train(&mut resumed, &set, &[], &cfg, done, best, &out).unwrap();
    assert!(resumed.params.bitwise_eq(&straight.params));
    let lines = std::fs::read_to_string(&log).unwrap();
    let recs: Vec<EpochRecord> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(recs[1].steps, 4);
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let model = Model::new(toy_config(), 2).unwrap();
    model.params.to_checkpoint(checkpoint_meta(&model, 0, None)).save(&path).unwrap();
    let mut ck = Checkpoint::load(&path).unwrap();
    ck.params[0].data[0] += 1.0;
    ck.save(&path).unwrap();
    assert!(matches!(load_model(&path), Err(DspError::ChecksumMismatch { .. })));
}

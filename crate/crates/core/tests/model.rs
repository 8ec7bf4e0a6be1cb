//! Model behaviour, training steps, checkpoints and the JSONL formats.

use hattflow::checkpoint;
use hattflow::experiment::{train, RunConfig};
use hattflow::metrics::{read_triplets_jsonl, write_triplets_jsonl};
use hattflow::model::{rank_desc, FlowDirection, HattFlowModel, ModelConfig};
use hattflow::optim::{train_step, Adam, AdamConfig};
use hattflow::params::{normal, Rng};
use hattflow::synth::{SynthSpec, SynthWorld};
use hattflow::{Error, GraphBatch};
use rand::SeedableRng;

fn small_config(direction: FlowDirection, seed: u64) -> ModelConfig {
    ModelConfig {
        width: 8,
        heads: 2,
        ffn_hidden: 8,
        encoder_layers: 2,
        flow_direction: direction,
        seed,
        ..ModelConfig::default()
    }
}

fn world() -> SynthWorld {
    SynthWorld::new(SynthSpec::default()).unwrap()
}

fn batch(world: &SynthWorld, scenes: std::ops::Range<usize>) -> Vec<(GraphBatch, GraphBatch)> {
    scenes
        .map(|i| {
            let s = world.scene(i);
            (s.texts[0].clone(), s.views[0].clone())
        })
        .collect()
}

/// Adds N(0, std) to every parameter, so zero-initialized projections stop
/// hiding the cross-branch path.
fn perturb(model: &mut HattFlowModel, std: f64, seed: u64) {
    let mut rng = Rng::seed_from_u64(seed);
    for id in model.store.ids().collect::<Vec<_>>() {
        let t = model.store.get(id).clone();
        let noisy = t.add(&normal(&mut rng, t.shape(), std)).unwrap();
        model.store.set(id, noisy).unwrap();
    }
}

#[test]
fn repeated_steps_reduce_the_loss() {
    let w = world();
    let b = batch(&w, 0..4);
    let mut model = HattFlowModel::new(small_config(FlowDirection::TextToVision, 1)).unwrap();
    let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, &model.store).unwrap();
    let first = model.loss(&b).unwrap();
    for _ in 0..30 {
        train_step(&mut model, &b, &mut opt).unwrap();
    }
    let last = model.loss(&b).unwrap();
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let w = world();
    let b = batch(&w, 0..3);
    let mut model = HattFlowModel::new(small_config(FlowDirection::VisionToText, 2)).unwrap();
    let before = model.store.clone();
    let mut opt = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &model.store).unwrap();
    for _ in 0..3 {
        train_step(&mut model, &b, &mut opt).unwrap();
    }
    assert_eq!(model.store, before);
}

#[test]
fn training_is_bitwise_deterministic() {
    let w = world();
    let b = batch(&w, 5..9);
    let run = || {
        let mut model = HattFlowModel::new(small_config(FlowDirection::TextToVision, 3)).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() }, &model.store).unwrap();
        let losses: Vec<u64> = (0..10)
            .map(|_| train_step(&mut model, &b, &mut opt).unwrap().to_bits())
            .collect();
        (model.store, losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn flow_direction_controls_which_embedding_sees_the_other_branch() {
    let w = world();
    let s = w.scene(0);
    let (t1, t2) = (&s.texts[0], &s.texts[1]);
    let (v1, v2) = (&s.views[0], &s.views[1]);
    for dir in FlowDirection::ALL {
        let mut model = HattFlowModel::new(small_config(dir, 4)).unwrap();
        perturb(&mut model, 0.3, 5);
        let base = model.forward(t1, v1).unwrap();
        let other_vision = model.forward(t1, v2).unwrap();
        let other_text = model.forward(t2, v1).unwrap();
        let u_moves = base.u.max_abs_diff(&other_vision.u) > 1e-9;
        let v_moves = base.v.max_abs_diff(&other_text.v) > 1e-9;
        match dir {
            FlowDirection::TextToVision => assert!(!u_moves && v_moves, "{dir:?}"),
            FlowDirection::VisionToText => assert!(u_moves && !v_moves, "{dir:?}"),
            FlowDirection::None => assert!(!u_moves && !v_moves, "{dir:?}"),
        }
        for out in [&base.u, &base.v] {
            let norm: f64 = out.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn predictions_rank_candidates_by_score() {
    let w = world();
    let s = w.scene(1);
    let gt = &s.gt.triplets[0];
    let candidates = w.candidate_texts(gt.s_cat, gt.o_cat).unwrap();
    let model = HattFlowModel::new(small_config(FlowDirection::TextToVision, 6)).unwrap();
    let scores = model.score_texts(&s.views[0], &candidates).unwrap();
    let ranked = model.predict_predicates(&s.views[0], &candidates).unwrap();
    assert_eq!(ranked.len(), candidates.len());
    assert!(ranked.windows(2).all(|p| p[0].1 >= p[1].1));
    for (i, score) in &ranked {
        assert_eq!(scores[*i], *score);
    }
    assert!(matches!(model.score_texts(&s.views[0], &[]), Err(Error::Contract(_))));
}

#[test]
fn ties_keep_the_lower_index_first() {
    assert_eq!(
        rank_desc(&[0.2, 0.5, 0.2, 0.5]),
        vec![(1, 0.5), (3, 0.5), (0, 0.2), (2, 0.2)]
    );
}

#[test]
fn checkpoint_file_round_trip() {
    let mut model = HattFlowModel::new(small_config(FlowDirection::VisionToText, 7)).unwrap();
    perturb(&mut model, 0.1, 8);
    let dir = std::env::temp_dir().join(format!("hattflow-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();

    assert_eq!(back.config, model.config);
    assert_eq!(back.store, model.store);
    let w = world();
    let s = w.scene(2);
    assert_eq!(
        back.forward(&s.texts[0], &s.views[0]).unwrap(),
        model.forward(&s.texts[0], &s.views[0]).unwrap()
    );
}

#[test]
fn triplet_jsonl_round_trip() {
    let w = world();
    let sets: Vec<_> = (0..3).map(|i| w.scene(i).gt).collect();
    let text = write_triplets_jsonl(&sets).unwrap();
    assert_eq!(text.lines().count(), sets.iter().map(|s| s.len()).sum::<usize>());
    let back = read_triplets_jsonl(&text).unwrap();
    assert_eq!(back.len(), sets.len());
    for (a, b) in back.iter().zip(&sets) {
        assert_eq!(a.video, b.video);
        assert_eq!(a.triplets, b.triplets);
    }
}

#[test]
fn malformed_jsonl_reports_the_line() {
    let w = world();
    let mut text = write_triplets_jsonl(&[w.scene(0).gt]).unwrap();
    text.push_str("{\"video\": 3}\n");
    let lines = text.lines().count();
    match read_triplets_jsonl(&text) {
        Err(Error::Format(msg)) => assert!(msg.starts_with(&format!("line {lines}")), "{msg}"),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn graph_json_round_trip() {
    let w = world();
    let s = w.scene(3);
    for g in [&s.texts[0], &s.vision] {
        assert_eq!(&GraphBatch::from_json_line(&g.to_json_line().unwrap()).unwrap(), g);
    }
}

#[test]
fn short_training_run_logs_every_epoch() {
    let mut cfg = RunConfig::synthetic_task();
    cfg.model = small_config(FlowDirection::TextToVision, 0);
    cfg.data.train_scenes = 16;
    cfg.data.val_scenes = 4;
    cfg.train.epochs = 3;
    cfg.train.eval_every = 1;
    let world = SynthWorld::new(cfg.data.clone()).unwrap();
    let mut seen = 0;
    let (_, logs) = train(&cfg, &world, |_| seen += 1).unwrap();
    assert_eq!(seen, 3);
    assert_eq!(logs.iter().map(|l| l.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(logs.iter().all(|l| l.loss.is_finite() && l.val_r_at_1.is_some()));
    let (_, again) = train(&cfg, &world, |_| {}).unwrap();
    assert_eq!(logs, again);
}

#[test]
fn config_toml_round_trip() {
    let cfg = RunConfig::synthetic_task();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    assert!(matches!(RunConfig::from_toml("[train]\nlearning_rate = 1.0\n"), Err(Error::Format(_))));
}

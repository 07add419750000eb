mod common;

use common::{rng, unit_rows};
use msd_core::data::{generate_dataset, GenConfig, Generator};
use msd_core::eval::{embed_split, evaluate, linear_probe, zero_shot_classify, EvalConfig, ProbeConfig};
use msd_core::trainer::{TrainConfig, TrainState};

#[test]
fn zero_shot_on_random_embeddings_is_at_chance() {
    let (n, c) = (1000, 5);
    let mut r = rng(12);
    let emb = unit_rows(&mut r, n, 8);
    let anchors = unit_rows(&mut r, c, 8);
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let res = zero_shot_classify(&emb, &anchors, &labels).unwrap();
    let p = 1.0 / c as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((res.accuracy - p).abs() <= 3.0 * sigma, "{}", res.accuracy);
}

#[test]
fn more_probe_data_is_no_worse() {
    // noisy features keep the small-fraction probe away from saturation
    let mut small = 0.0;
    let mut full = 0.0;
    for seed in 0..3 {
        let gen = GenConfig { seed, n: 1000, noise_sigma: 2.0, ..Default::default() };
        let data = generate_dataset(&gen).unwrap();
        let (train_ids, test_ids) = data.split(0.2).unwrap();
        let rows = |ids: &[u64]| ids.iter().map(|&i| i as usize).collect::<Vec<_>>();
        let labels = |ids: &[u64]| ids.iter().map(|&i| data.labels[i as usize] as usize).collect::<Vec<_>>();
        let xt = data.features_a.select_rows(&rows(&train_ids)).unwrap();
        let xe = data.features_a.select_rows(&rows(&test_ids)).unwrap();
        for (fraction, acc) in [(0.1, &mut small), (1.0, &mut full)] {
            let cfg = ProbeConfig { fraction, lr: 0.05, ..Default::default() };
            let r = linear_probe(&xt, &labels(&train_ids), &xe, &labels(&test_ids), gen.classes, &cfg, seed).unwrap();
            *acc += r.macro_auc / 3.0;
        }
    }
    assert!(full >= small, "fraction 1.0: {full}, fraction 0.1: {small}");
}

#[test]
fn evaluation_leaves_the_encoder_untouched_and_is_repeatable() {
    let gen = GenConfig { seed: 2, n: 300, ..Default::default() };
    let data = generate_dataset(&gen).unwrap();
    let cfg = TrainConfig { seed: 2, hidden: 16, embed: 8, ..Default::default() };
    let model = TrainState::init(&cfg, cfg.tower_dims(&data)).unwrap().model;
    let bits = |m: &msd_core::model::DualEncoder| -> Vec<u64> {
        m.named_tensors().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
    };
    let before = bits(&model);
    let (train_ids, test_ids) = data.split(0.2).unwrap();
    let protos = Generator::new(&gen).unwrap().class_prototypes().unwrap().1;
    let run = || evaluate(&model, &data, &train_ids, &test_ids, &protos, &EvalConfig::default(), 2, serde_json::json!({"seed": 2})).unwrap();
    let first = run();
    assert_eq!(bits(&model), before);
    assert_eq!(run(), first);
    assert_eq!(first.config["seed"], 2);
}

#[test]
fn untrained_model_retrieves_at_chance() {
    let mut hits = 0.0;
    let mut tests = 0.0;
    for seed in 0..5 {
        let gen = GenConfig { seed, n: 1000, ..Default::default() };
        let data = generate_dataset(&gen).unwrap();
        let cfg = TrainConfig { seed: 100 + seed, ..Default::default() };
        let model = TrainState::init(&cfg, cfg.tower_dims(&data)).unwrap().model;
        let (_, test_ids) = data.split(0.2).unwrap();
        let (img, txt) = embed_split(&model, &data, &test_ids).unwrap();
        hits += msd_core::eval::recall_at_k(&img, &txt, 1).unwrap() * test_ids.len() as f64;
        tests += test_ids.len() as f64;
    }
    // about one chance hit per seed; Poisson(5) exceeds 15 with probability < 1e-3
    assert!(hits <= 15.0, "{hits} hits over {tests} queries");
}

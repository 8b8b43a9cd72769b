use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skeleton_ood::checkpoint::write_checkpoint;
use skeleton_ood::data::{generate_synthetic, split, Dataset, SplitSpec, SyntheticConfig};
use skeleton_ood::energy::EnergyConfig;
use skeleton_ood::fusion::{self, AshConfig, FusionHead, HeadConfig};
use skeleton_ood::graph::JointHierarchy;
use skeleton_ood::model::Model;
use skeleton_ood::numerics::{DenseArray, Tape};
use skeleton_ood::params::ParamSet;
use skeleton_ood::training::{evaluate, train, EvalMode, EvalOptions, LossKind, TrainConfig};
use skeleton_ood::Error;

fn small_splits(seed: u64, per_class: usize, frames: usize) -> skeleton_ood::data::Splits {
    let cfg = SyntheticConfig { classes: 4, per_class, frames, seed, ..Default::default() };
    let ds = generate_synthetic(&cfg, &JointHierarchy::toy11()).unwrap();
    split(&ds, &SplitSpec::random(4, 1, seed).unwrap()).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, warmup_epochs: 0, ..Default::default() }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let s = small_splits(1, 12, 8);
    let config = TrainConfig { learning_rate: 0.0, loss: LossKind::Ce, ..quick(1) };
    let out = train(&s.train, None, &config, |_| {}).unwrap();
    let fresh = Model::new(out.model.config().clone(), config.seed).unwrap();
    assert_eq!(out.model.params, fresh.params);
    // With alpha = 0 and unchanged weights, the logged loss is the initial CE.
    let rec = &out.log[0];
    assert_eq!(rec.energy_term, 0.0);
    assert!((rec.loss - rec.cross_entropy).abs() <= 1e-12);
}

#[test]
fn training_is_bitwise_reproducible() {
    let s = small_splits(2, 12, 8);
    let a = train(&s.train, Some(&s.val), &quick(2), |_| {}).unwrap();
    let b = train(&s.train, Some(&s.val), &quick(2), |_| {}).unwrap();
    assert_eq!(write_checkpoint(&a.model).unwrap(), write_checkpoint(&b.model).unwrap());
    assert_eq!(a.log, b.log);
    let opts = EvalOptions::default();
    let r1 = evaluate(&a.model, &s.test_mix, EvalMode::Mix, &opts).unwrap();
    let r2 = evaluate(&a.model, &s.test_mix, EvalMode::Mix, &opts).unwrap();
    assert_eq!(r1, r2);
    let masked = EvalOptions { mask_pct: Some(0.0), ..opts };
    assert_eq!(evaluate(&a.model, &s.test_mix, EvalMode::Mix, &masked).unwrap().report, r1.report);
}

#[test]
fn energy_term_is_nonnegative_and_vanishes_below_margin() {
    let s = small_splits(3, 12, 8);
    let out = train(&s.train, None, &quick(2), |_| {}).unwrap();
    assert!(out.log.iter().all(|r| r.energy_term >= 0.0));
    // A margin above every reachable energy switches the term off.
    let off = TrainConfig { energy: EnergyConfig { margin: 1e6, ..Default::default() }, ..quick(2) };
    let out = train(&s.train, None, &off, |_| {}).unwrap();
    assert!(out.log.iter().all(|r| r.energy_term == 0.0));
}

#[test]
fn unseen_labels_in_training_are_rejected() {
    let s = small_splits(4, 12, 8);
    let mut bad: Dataset = s.train.clone();
    let unseen = s.test_mix.meta.unseen_classes.clone().unwrap()[0];
    bad.sequences[0].label = unseen;
    assert!(matches!(train(&bad, None, &quick(1), |_| {}), Err(Error::Protocol(_))));
}

#[test]
fn uncalibrated_model_cannot_be_evaluated() {
    let s = small_splits(5, 12, 8);
    let out = train(&s.train, None, &quick(1), |_| {}).unwrap();
    let mut model = out.model;
    model.detector.tau = None;
    let err = evaluate(&model, &s.test_mix, EvalMode::Mix, &EvalOptions::default()).unwrap_err();
    assert!(matches!(err, Error::State(_)));
}

#[test]
fn memorized_training_data_is_fully_recognized() {
    let cfg = SyntheticConfig { classes: 3, per_class: 12, frames: 12, sigma: 0.0, seed: 9, ..Default::default() };
    let ds = generate_synthetic(&cfg, &JointHierarchy::toy11()).unwrap();
    // Plain CE keeps this about fitting, not about the energy margin.
    let config = TrainConfig { learning_rate: 0.01, epochs: 30, warmup_epochs: 2, batch_size: 4, loss: LossKind::Ce, ..Default::default() };
    let out = train(&ds, None, &config, |_| {}).unwrap();
    let r = evaluate(&out.model, &ds, EvalMode::IdOnly, &EvalOptions::default()).unwrap();
    assert_eq!(r.report.top1, Some(100.0));
    assert!(r.report.auroc.is_none());
}

#[test]
fn untrained_model_does_not_separate() {
    let mut total = 0.0;
    for seed in 0..10 {
        let cfg = SyntheticConfig { classes: 8, per_class: 20, frames: 12, seed, ..Default::default() };
        let ds = generate_synthetic(&cfg, &JointHierarchy::toy11()).unwrap();
        let s = split(&ds, &SplitSpec::random(8, 2, seed).unwrap()).unwrap();
        let config = TrainConfig { learning_rate: 0.0, seed, ..quick(1) };
        let out = train(&s.train, None, &config, |_| {}).unwrap();
        let r = evaluate(&out.model, &s.test_mix, EvalMode::Mix, &EvalOptions::default()).unwrap();
        total += r.report.auroc.unwrap();
    }
    let mean = total / 10.0;
    assert!((0.4..=0.6).contains(&mean), "mean untrained AUROC {mean}");
}

fn head_with_params(seed: u64) -> (FusionHead, ParamSet) {
    let cfg = HeadConfig {
        feature_dim: 8,
        ash: Some(AshConfig::default()),
        fusion: true,
        mlp_hidden: 6,
        seen_classes: 3,
        extra_dims: 1,
        dropout: 0.5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    fusion::init_params(&cfg, &mut params, &mut rng);
    (FusionHead::new(cfg).unwrap(), params)
}

fn classify(head: &FusionHead, params: &ParamSet, x: &[f64], rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let fused = tape.leaf(DenseArray::new(vec![1, x.len()], x.to_vec()).unwrap());
    head.classify(&tape, &bound, fused, rng).unwrap().value().data().to_vec()
}

#[test]
fn dropout_averages_to_eval_output() {
    let (head, params) = head_with_params(4);
    let x: Vec<f64> = (0..6).map(|i| 0.5 + 0.25 * i as f64).collect();
    let eval = classify(&head, &params, &x, None);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let reps = 10_000;
    let mut mean = vec![0.0; eval.len()];
    for _ in 0..reps {
        for (m, v) in mean.iter_mut().zip(classify(&head, &params, &x, Some(&mut rng))) {
            *m += v / reps as f64;
        }
    }
    for (m, e) in mean.iter().zip(&eval) {
        assert!((m - e).abs() <= 0.02 * e.abs().max(1.0), "mean {m} vs eval {e}");
    }
}

#[test]
fn eval_classifier_is_affine() {
    let (head, params) = head_with_params(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let zero = classify(&head, &params, &[0.0; 6], None);
    let fx = classify(&head, &params, &x, None);
    for a in [-2.0, 0.5, 3.0] {
        let ax: Vec<f64> = x.iter().map(|v| a * v).collect();
        let fax = classify(&head, &params, &ax, None);
        for i in 0..fx.len() {
            assert!(((fax[i] - zero[i]) - a * (fx[i] - zero[i])).abs() <= 1e-9);
        }
    }
}

#[test]
fn fused_output_regression() {
    let (head, params) = head_with_params(42);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let f: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let fv = tape.leaf(DenseArray::new(vec![1, 8], f).unwrap());
    let shaped = head.shape_features(&tape, fv).unwrap().map(|(s, _)| s);
    let fused = head.fuse(&tape, &bound, fv, shaped).unwrap().value().data().to_vec();
    let golden: [f64; 6] = GOLDEN;
    for (a, b) in fused.iter().zip(golden) {
        assert!((a - b).abs() <= 1e-12, "{fused:?}");
    }
}

const GOLDEN: [f64; 6] = [
    -0.04185347394018702,
    -0.09483179187175457,
    0.18601018843101946,
    0.10746337832483414,
    -0.08248948181761187,
    -0.028384936236704118,
];

/// Nearest-centroid accuracy on held-out samples of a generated dataset.
fn centroid_accuracy(seed: u64) -> f64 {
    let cfg = SyntheticConfig { classes: 6, per_class: 40, seed, ..Default::default() };
    let ds = generate_synthetic(&cfg, &JointHierarchy::toy11()).unwrap();
    let dim = ds.sequences[0].data.len();
    let mut centroids = vec![vec![0.0; dim]; 6];
    let mut counts = [0usize; 6];
    let (fit, test): (Vec<_>, Vec<_>) = ds.sequences.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    for (_, s) in &fit {
        counts[s.label] += 1;
        for (c, v) in centroids[s.label].iter_mut().zip(s.data.data()) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let hits = test
        .iter()
        .filter(|(_, s)| {
            let dist = |c: &Vec<f64>| c.iter().zip(s.data.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..6).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == s.label
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn generated_classes_are_separable() {
    for seed in 0..10 {
        let acc = centroid_accuracy(seed);
        assert!(acc >= 0.95, "seed {seed}: centroid accuracy {acc}");
    }
}

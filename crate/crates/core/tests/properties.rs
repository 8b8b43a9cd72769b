mod common;

use proptest::prelude::*;
use proptest::sample::Index;

use skeleton_ood::data::{mask_joints, read_dataset, split, write_dataset, Dataset, DatasetMeta, SkeletonSequence, SplitSpec};
use skeleton_ood::energy::{calibrate_threshold, energy_score, DetectorState, EnergyConfig, Verdict};
use skeleton_ood::fusion::ash::{ash_b, ash_p, ash_s};
use skeleton_ood::graph::{build_hierarchical_fc, build_physical, build_self_loop, normalize, JointHierarchy};
use skeleton_ood::metrics::{auroc, detection_error, fpr_at_tpr, overlap, ScoredSample, DEFAULT_TPR};
use skeleton_ood::numerics::{logsumexp, softmax, DenseArray};
use skeleton_ood::training::{sgd_step, warmup_lr, SgdState};

use common::*;

fn hierarchy() -> impl Strategy<Value = JointHierarchy> {
    (2usize..14)
        .prop_flat_map(|v| proptest::collection::vec(any::<Index>(), v - 1))
        .prop_map(|picks| {
            let mut parents = vec![None];
            for (i, p) in picks.iter().enumerate() {
                parents.push(Some(p.index(i + 1)));
            }
            JointHierarchy::from_parents(parents).unwrap()
        })
}

fn spectral_radius(a: &DenseArray) -> f64 {
    let v = a.shape()[0];
    let mut x: Vec<f64> = (0..v).map(|i| 1.0 + 0.37 * i as f64).collect();
    let mut norm = 0.0;
    for _ in 0..400 {
        let y: Vec<f64> = (0..v)
            .map(|i| (0..v).map(|j| a.at2(i, j) * x[j]).sum())
            .collect();
        // Two steps of A x cover eigenvalues of either sign.
        let z: Vec<f64> = (0..v)
            .map(|i| (0..v).map(|j| a.at2(i, j) * y[j]).sum())
            .collect();
        let nx = x.iter().map(|t| t * t).sum::<f64>().sqrt();
        let nz = z.iter().map(|t| t * t).sum::<f64>().sqrt();
        if nz == 0.0 {
            return 0.0;
        }
        norm = (nz / nx).sqrt();
        x = z.iter().map(|t| t / nz).collect();
    }
    norm
}

fn nonneg_features() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..10.0, 4..64)
}

fn percentile() -> impl Strategy<Value = f64> {
    (1u32..10).prop_map(|k| 10.0 * k as f64)
}

fn distinct(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).all(|w| w[0] != w[1])
}

/// Scores quantized to a coarse grid so ties occur often.
fn score_sets() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        proptest::collection::vec((0i32..40).prop_map(|k| k as f64 * 0.25), 1..60),
        proptest::collection::vec((0i32..40).prop_map(|k| k as f64 * 0.25 - 1.0), 1..60),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn logsumexp_shift_and_bounds(v in proptest::collection::vec(-50.0f64..50.0, 1..20), c in -50.0f64..50.0, eps in 0.1f64..3.0) {
        let base = logsumexp(&v, 1.0).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((logsumexp(&shifted, 1.0).unwrap() - (base + c)).abs() <= 1e-12 * (1.0 + base.abs() + c.abs()));
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l = logsumexp(&v, eps).unwrap();
        prop_assert!(l >= max);
        prop_assert!(l <= max + eps * (v.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(v in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn graph_builders(h in hierarchy()) {
        let v = h.joint_count();
        let phys = build_physical(&h);
        let edges = (0..v).flat_map(|i| (i + 1..v).map(move |j| (i, j))).filter(|&(i, j)| phys.at2(i, j) != 0.0).count();
        prop_assert_eq!(edges, v - 1);
        prop_assert_eq!(build_physical(&h), phys.clone());
        prop_assert_eq!(build_hierarchical_fc(&h), build_hierarchical_fc(&h));
        for a in [phys, build_self_loop(v), build_hierarchical_fc(&h)] {
            let n = normalize(&a).unwrap();
            prop_assert!(spectral_radius(&n) <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn ash_invariants(f in nonneg_features(), p in percentile()) {
        let out_p = ash_p(&f, p).unwrap().values;
        let survivors: Vec<usize> = (0..f.len()).filter(|&i| out_p[i] != 0.0).collect();
        for &i in &survivors {
            prop_assert_eq!(out_p[i], f[i]);
        }
        if distinct(&f) {
            let cap = ((1.0 - p / 100.0) * f.len() as f64).ceil() as usize;
            prop_assert!(survivors.len() <= cap, "{} survivors over cap {}", survivors.len(), cap);
        }
        let out_b = ash_b(&f, p).unwrap();
        if !out_b.degenerate {
            let total: f64 = f.iter().sum();
            prop_assert!((out_b.values.iter().sum::<f64>() - total).abs() <= 1e-12 * total.max(1.0));
        }
        let out_s = ash_s(&f, p).unwrap().values;
        let support = |v: &[f64]| v.iter().map(|&x| x != 0.0).collect::<Vec<_>>();
        prop_assert_eq!(support(&out_s), support(&out_p));
        prop_assert_eq!(out_p, literal_p(&f, p));
        prop_assert_eq!(out_b.values, literal_b(&f, p));
    }

    #[test]
    fn energy_identities(v in proptest::collection::vec(-30.0f64..30.0, 1..12), c in -20.0f64..20.0) {
        let e = energy_score(&v, 1.0).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((energy_score(&shifted, 1.0).unwrap() - (e - c)).abs() <= 1e-9);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(e <= -max + 1e-9);
        prop_assert!(e >= -max - (v.len() as f64).ln() - 1e-9);
    }

    #[test]
    fn calibration_coverage(scores in proptest::collection::vec(-100.0f64..100.0, 10..300), q in 0.01f64..0.5) {
        prop_assume!(distinct(&scores));
        let tau = calibrate_threshold(&scores, q).unwrap();
        let n = scores.len() as f64;
        let frac = scores.iter().filter(|&&s| s >= tau).count() as f64 / n;
        prop_assert!(frac >= 1.0 - q - 1e-12 && frac <= 1.0 - q + 1.0 / n + 1e-12, "coverage {frac}");
    }

    #[test]
    fn detect_is_softmax_argmax_and_transform_stable(v in proptest::collection::vec(-10.0f64..10.0, 4..8), tau in -5.0f64..15.0) {
        let k = v.len() - 1;
        let state = DetectorState::uncalibrated(EnergyConfig::default(), k).with_tau(tau, 10);
        let d = state.detect(&v).unwrap();
        if d.verdict == Verdict::Seen {
            let p = softmax(&v[..k]);
            let best = (0..k).fold(0, |b, i| if p[i] > p[b] { i } else { b });
            prop_assert_eq!(d.label, best);
        }
        // A strictly increasing map applied to score and threshold keeps the partition.
        let f = |x: f64| 3.0 * x + (0.1 * x).exp();
        prop_assert_eq!(d.score < tau, f(d.score) < f(tau));
    }

    #[test]
    fn auroc_matches_pair_counting((id, ood) in score_sets()) {
        let s = samples(&id, &ood);
        let a = auroc(&s).unwrap();
        prop_assert!((a - brute_auroc(&id, &ood)).abs() <= 1e-12);
        let flipped: Vec<ScoredSample> = s.iter().map(|x| ScoredSample { is_id: !x.is_id, ..*x }).collect();
        prop_assert!((a + auroc(&flipped).unwrap() - 1.0).abs() <= 1e-12);
        let warped: Vec<ScoredSample> = s.iter().map(|x| ScoredSample { score: x.score.powi(3) + 2.0 * x.score, ..*x }).collect();
        prop_assert!((auroc(&warped).unwrap() - a).abs() <= 1e-12);
    }

    #[test]
    fn threshold_metrics_match_sweep((id, ood) in score_sets()) {
        let s = samples(&id, &ood);
        prop_assert_eq!(fpr_at_tpr(&s, DEFAULT_TPR).unwrap(), sweep_fpr(&id, &ood, 95));
        prop_assert_eq!(detection_error(&s, DEFAULT_TPR).unwrap(), sweep_error(&id, &ood, 95));
    }

    #[test]
    fn overlap_symmetric_and_bounded((id, ood) in score_sets(), bins in 2usize..80) {
        let a = overlap(&id, &ood, bins).unwrap();
        let b = overlap(&ood, &id, bins).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn dataset_round_trip(
        dims in (1usize..3, 1usize..6, 1usize..5, 1usize..3),
        count in 1usize..6,
        seed in any::<u64>(),
    ) {
        let (c, t, v, m) = dims;
        let c = c + 1;
        let mut x = seed;
        let mut next = || {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let sequences = (0..count)
            .map(|i| {
                let data = DenseArray::new(vec![c, t, v, m], (0..c * t * v * m).map(|_| next()).collect()).unwrap();
                SkeletonSequence::new(data, i % 3, format!("s{i}")).unwrap()
            })
            .collect();
        let ds = Dataset { sequences, meta: DatasetMeta { seed: Some(seed), ..Default::default() } };
        let bytes = write_dataset(&ds).unwrap();
        let back = read_dataset(&bytes).unwrap();
        prop_assert_eq!(&back.sequences, &ds.sequences);
        prop_assert_eq!(write_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn masking_leaves_other_joints_alone(v in 2usize..12, pct in 0.0f64..99.0, seed in any::<u64>()) {
        let data = DenseArray::new(vec![3, 4, v, 1], (0..12 * v).map(|i| 1.0 + i as f64).collect()).unwrap();
        let seq = SkeletonSequence::new(data, 0, "x").unwrap();
        let masked = mask_joints(&seq, pct, seed).unwrap();
        let mut zeroed = 0;
        let seq = &seq;
        for j in 0..v {
            let idx: Vec<usize> = (0..3).flat_map(|c| (0..4).map(move |t| seq.offset(c, t, j, 0))).collect();
            let all_zero = idx.iter().all(|&i| masked.data.data()[i] == 0.0);
            if all_zero {
                zeroed += 1;
            } else {
                for &i in &idx {
                    prop_assert_eq!(masked.data.data()[i].to_bits(), seq.data.data()[i].to_bits());
                }
            }
        }
        prop_assert_eq!(zeroed, (pct * v as f64 / 100.0).floor() as usize);
    }

    #[test]
    fn split_ratios(per_class in 6usize..40, classes in 2usize..8, unseen_pick in any::<Index>(), seed in any::<u64>()) {
        let unseen = unseen_pick.index(classes);
        let sequences = (0..classes * per_class)
            .map(|i| SkeletonSequence::new(DenseArray::zeros(&[3, 1, 1, 1]), i / per_class, format!("{i}")).unwrap())
            .collect();
        let ds = Dataset { sequences, meta: DatasetMeta::default() };
        let spec = SplitSpec::random(classes, unseen, seed).unwrap();
        let s = split(&ds, &spec).unwrap();
        let train_per = (per_class as f64 * 0.9).round() as usize;
        prop_assert_eq!(s.train.len(), train_per * spec.seen.len());
        prop_assert_eq!(s.val.len(), (per_class - train_per) * spec.seen.len());
        prop_assert_eq!(&s.val.sequences, &s.test_seen.sequences);
        let unseen_in_mix = s.test_mix.sequences.iter().filter(|x| spec.unseen.contains(&x.label)).count();
        prop_assert_eq!(unseen_in_mix, unseen * per_class);
        prop_assert!(s.train.sequences.iter().all(|x| spec.seen.contains(&x.label)));
    }

    #[test]
    fn sgd_without_momentum_is_exact(w in proptest::collection::vec(-5.0f64..5.0, 1..10), lr in 0.0f64..1.0, seed in any::<u64>()) {
        let g: Vec<f64> = w.iter().enumerate().map(|(i, x)| x * 0.3 - (seed % 7) as f64 + i as f64).collect();
        let mut params = vec![DenseArray::vector(w.clone())];
        sgd_step(&mut params, &[DenseArray::vector(g.clone())], &mut SgdState::default(), lr, 0.0, 0.0).unwrap();
        let expect: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a - lr * b).collect();
        prop_assert_eq!(params[0].data(), &expect[..]);
    }

    #[test]
    fn warmup_is_monotone(base in 0.0f64..1.0, warm in 0usize..10) {
        for e in 0..30 {
            prop_assert!(warmup_lr(e + 1, base, warm) >= warmup_lr(e, base, warm));
        }
    }
}

#[test]
fn double_normalization_is_detected() {
    let h = JointHierarchy::toy11();
    let once = normalize(&build_physical(&h)).unwrap();
    assert_ne!(normalize(&once).unwrap(), once);
    let eye = build_self_loop(5);
    assert_eq!(normalize(&eye).unwrap(), eye);
}

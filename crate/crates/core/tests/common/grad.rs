//! Central-difference checks of every differentiable operation over 20 seeds.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skeleton_ood::backbone::{self, graph_conv, Backbone, BackboneConfig, BlockConfig};
use skeleton_ood::energy::{energy_bounded_loss, EnergyConfig};
use skeleton_ood::fusion::{self, ash, AshConfig, AshStrategy, FusionHead, HeadConfig};
use skeleton_ood::graph::{GraphTopology, JointHierarchy, Subset};
use skeleton_ood::numerics::{check_gradient, DenseArray, NumericsError, Tape, Var};
use skeleton_ood::params::{BoundParams, ParamSet};

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform draws kept at least `gap` away from `kink`.
fn away(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kink: f64, gap: f64) -> DenseArray {
    let mut a = uniform(rng, shape, lo, hi);
    for v in a.data_mut() {
        while (*v - kink).abs() < gap {
            *v = rng.gen_range(lo..hi);
        }
    }
    a
}

/// Scalar root `mean(y * r)` with a fixed random projection `r`.
fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let r = tape.leaf(uniform(&mut rng, &y.shape(), -1.0, 1.0));
    Ok(tape.mean(tape.mul(y, r)?))
}

fn assert_check<F>(what: &str, seed: u64, param: &DenseArray, build: F)
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, NumericsError>,
{
    let c = check_gradient(build, param, TOL).unwrap();
    assert!(c.passed, "{what}, seed {seed}: relative error {}", c.max_relative_error);
}

fn each_seed(mut f: impl FnMut(u64, &mut ChaCha8Rng)) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(seed, &mut rng);
    }
}

pub fn elementwise_and_linear_ops() {
    each_seed(|seed, rng| {
        let a = uniform(rng, &[3, 4], -2.0, 2.0);
        let b = uniform(rng, &[3, 4], -2.0, 2.0);
        let (a2, b2) = (a.clone(), b.clone());
        assert_check("add", seed, &a, |t, x| project(t, t.add(x, t.leaf(b2.clone()))?, seed));
        assert_check("mul lhs", seed, &a, |t, x| project(t, t.mul(x, t.leaf(b2.clone()))?, seed));
        assert_check("mul rhs", seed, &b, |t, y| project(t, t.mul(t.leaf(a2.clone()), y)?, seed));
        let bias = uniform(rng, &[4], -1.0, 1.0);
        assert_check("add_bias input", seed, &a, |t, x| {
            project(t, t.add_bias(x, t.leaf(bias.clone()))?, seed)
        });
        assert_check("add_bias bias", seed, &bias, |t, c| {
            project(t, t.add_bias(t.leaf(a2.clone()), c)?, seed)
        });
        let m = uniform(rng, &[4, 5], -1.0, 1.0);
        let m2 = m.clone();
        assert_check("matmul lhs", seed, &a, |t, x| project(t, t.matmul(x, t.leaf(m2.clone()))?, seed));
        assert_check("matmul rhs", seed, &m, |t, w| project(t, t.matmul(t.leaf(a2.clone()), w)?, seed));
        assert_check("reshape", seed, &a, |t, x| project(t, t.reshape(x, &[2, 6])?, seed));
        assert_check("scale", seed, &a, |t, x| project(t, t.scale(x, -1.7), seed));
        assert_check("add_scalar", seed, &a, |t, x| project(t, t.add_scalar(x, 0.3), seed));
        let mask: Vec<f64> = (0..12).map(|i| if (i + seed) % 3 == 0 { 0.0 } else { 1.25 }).collect();
        assert_check("mask_mul", seed, &a, |t, x| project(t, t.mask_mul(x, mask.clone())?, seed));
        assert_check("mean", seed, &a, |t, x| Ok(t.mean(t.mul(x, x)?)));
        let c = uniform(rng, &[3, 2], -1.0, 1.0);
        assert_check("concat_cols lhs", seed, &a, |t, x| {
            project(t, t.concat_cols(x, t.leaf(c.clone()))?, seed)
        });
        assert_check("concat_cols rhs", seed, &c, |t, y| {
            project(t, t.concat_cols(t.leaf(a2.clone()), y)?, seed)
        });
        let cube = uniform(rng, &[2, 3, 4], -1.0, 1.0);
        assert_check("mean_axis1", seed, &cube, |t, x| project(t, t.mean_axis1(x)?, seed));
    });
}

pub fn piecewise_ops_away_from_kinks() {
    each_seed(|seed, rng| {
        let x = away(rng, &[4, 5], -2.0, 2.0, 0.0, 1e-3);
        assert_check("relu", seed, &x, |t, v| project(t, t.relu(v), seed));
        let x = away(rng, &[4, 5], -2.0, 2.0, 0.5, 1e-3);
        assert_check("clamp_max", seed, &x, |t, v| project(t, t.clamp_max(v, 0.5), seed));
        let x = away(rng, &[6], -2.0, 2.0, -0.25, 1e-3);
        assert_check("squared_hinge", seed, &x, |t, v| project(t, t.squared_hinge(v, -0.25), seed));
    });
}

pub fn graph_and_temporal_convolution() {
    let h = JointHierarchy::from_parents(vec![None, Some(0), Some(1), Some(1), Some(0)]).unwrap();
    let topo = GraphTopology::from_hierarchy(&h);
    each_seed(|seed, rng| {
        let x = uniform(rng, &[2, 3, 5, 3], -1.0, 1.0);
        let thetas: Vec<DenseArray> = (0..3).map(|_| uniform(rng, &[3, 4], -1.0, 1.0)).collect();
        let th = thetas.clone();
        assert_check("graph_conv input", seed, &x, |t, v| {
            let ws = [0, 1, 2].map(|g| t.leaf(th[g].clone()));
            project(t, graph_conv(t, v, &topo, ws).map_err(contract)?, seed)
        });
        for g in 0..3 {
            let xs = x.clone();
            let th = thetas.clone();
            assert_check(&format!("graph_conv theta {g}"), seed, &thetas[g], |t, w| {
                let ws = [0, 1, 2].map(|k| if k == g { w } else { t.leaf(th[k].clone()) });
                project(t, graph_conv(t, t.leaf(xs.clone()), &topo, ws).map_err(contract)?, seed)
            });
        }
        let adj = Rc::new(topo.normalized(Subset::Physical).clone());
        assert_check("graph_mix", seed, &x, |t, v| project(t, t.graph_mix(v, adj.clone())?, seed));

        let x = uniform(rng, &[2, 7, 3, 4], -1.0, 1.0);
        let w = uniform(rng, &[4, 3], -1.0, 1.0);
        for stride in [1, 2] {
            let (xs, ws) = (x.clone(), w.clone());
            assert_check("temporal_conv input", seed, &x, |t, v| {
                project(t, t.temporal_conv(v, t.leaf(ws.clone()), stride)?, seed)
            });
            assert_check("temporal_conv kernel", seed, &w, |t, k| {
                project(t, t.temporal_conv(t.leaf(xs.clone()), k, stride)?, seed)
            });
        }
    });
}

fn contract(e: skeleton_ood::Error) -> NumericsError {
    NumericsError::Contract(e.to_string())
}

pub fn cross_entropy_and_energy_hinge() {
    each_seed(|seed, rng| {
        let logits = uniform(rng, &[5, 4], -3.0, 3.0);
        let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
        assert_check("cross_entropy", seed, &logits, |t, l| t.cross_entropy(l, &targets));
        assert_check("soft_logsumexp", seed, &logits, |t, l| {
            project(t, t.soft_logsumexp(l, 3, 0.7)?, seed)
        });

        // Rows shifted so free energies straddle the margin on both sides.
        let cfg = EnergyConfig { margin: -2.0, alpha: 0.5, ..Default::default() };
        let mut l = uniform(rng, &[6, 4], -1.0, 1.0);
        for (i, row) in l.data_mut().chunks_exact_mut(4).enumerate() {
            let shift = if i % 2 == 0 { rng.gen_range(2.5..4.0) } else { rng.gen_range(-2.0..0.5) };
            row.iter_mut().for_each(|v| *v += shift);
        }
        let e: Vec<f64> = l
            .data()
            .chunks_exact(4)
            .map(|r| skeleton_ood::energy::energy_score(&r[..3], 1.0).unwrap())
            .collect();
        assert!(e.iter().any(|&x| x > cfg.margin + 1e-3) && e.iter().any(|&x| x < cfg.margin - 1e-3));
        assert!(e.iter().all(|&x| (x - cfg.margin).abs() > 1e-3));
        let targets: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
        assert_check("energy_bounded_loss", seed, &l, |t, v| {
            Ok(energy_bounded_loss(t, v, &targets, 3, &cfg).map_err(contract)?.total)
        });
    });
}

pub fn activation_shaping_with_fixed_mask() {
    each_seed(|seed, rng| {
        // Distinct values keep the survivor set stable under the probe step.
        let x = away(rng, &[3, 8], 0.1, 2.0, 0.0, 0.0);
        for strategy in [AshStrategy::Prune, AshStrategy::Binarize, AshStrategy::Scale] {
            let cfg = AshConfig { strategy, percentile: 60.0 };
            assert_check(&format!("ash {strategy:?}"), seed, &x, |t, v| {
                let (y, _) = ash::ash_rows(t, v, &cfg).map_err(contract)?;
                project(t, y, seed)
            });
        }
    });
}

/// Finite differences over every entry of every parameter in `params`.
fn check_params(what: &str, seed: u64, params: &ParamSet, build: impl for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Var<'t>) {
    let analytic: Vec<DenseArray> = {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let root = build(&tape, &bound);
        let mut g = tape.backward(root).unwrap();
        bound
            .vars()
            .iter()
            .zip(params.values())
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| DenseArray::zeros(p.shape())))
            .collect()
    };
    let eval = |p: &ParamSet| {
        let tape = Tape::new();
        let bound = p.bind(&tape);
        build(&tape, &bound).value().data()[0]
    };
    let h = 1e-5;
    for (k, (name, value)) in params.iter().enumerate() {
        for i in 0..value.len() {
            let mut plus = params.clone();
            plus.values_mut()[k].data_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[k].data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel <= TOL, "{what} seed {seed}: {name}[{i}] analytic {a} numeric {fd}");
        }
    }
}

fn randomize_biases(params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.names().to_vec();
    for name in names {
        if name.ends_with("bias") {
            params
                .get_mut(&name)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|b| *b += rng.gen_range(0.05..0.3));
        }
    }
}

fn head_config() -> HeadConfig {
    HeadConfig {
        feature_dim: 6,
        ash: Some(AshConfig::default()),
        fusion: true,
        mlp_hidden: 5,
        seen_classes: 3,
        extra_dims: 1,
        dropout: 0.2,
    }
}

pub fn se_gate_mlp_and_classifier() {
    let cfg = head_config();
    let head = FusionHead::new(cfg.clone()).unwrap();
    each_seed(|seed, rng| {
        let mut params = ParamSet::new();
        fusion::init_params(&cfg, &mut params, rng);
        randomize_biases(&mut params, rng);
        let features = away(rng, &[4, 6], 0.1, 1.5, 0.0, 0.0);
        let targets = [0usize, 2, 1, 1];
        check_params("fusion head", seed, &params, |t, p| {
            let f = t.leaf(features.clone());
            let shaped = head.shape_features(t, f).unwrap().map(|(s, _)| s);
            let fused = head.fuse(t, p, f, shaped).unwrap();
            let logits = head.classify::<ChaCha8Rng>(t, p, fused, None).unwrap();
            energy_bounded_loss(t, logits, &targets, 3, &EnergyConfig { margin: 0.0, ..Default::default() })
                .unwrap()
                .total
        });
        // Training-mode classifier: dropout mask drawn from a fixed seed.
        check_params("dropout classifier", seed, &params, |t, p| {
            let f = t.leaf(features.clone());
            let shaped = head.shape_features(t, f).unwrap().map(|(s, _)| s);
            let fused = head.fuse(t, p, f, shaped).unwrap();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = head.classify(t, p, fused, Some(&mut drop_rng)).unwrap();
            t.cross_entropy(logits, &targets).unwrap()
        });
        let p2 = params.clone();
        assert_check("fusion head input features", seed, &features, |t, f| {
            let bound = p2.bind(t);
            let shaped = head.shape_features(t, f).map_err(contract)?.map(|(s, _)| s);
            let fused = head.fuse(t, &bound, f, shaped).map_err(contract)?;
            let logits = head.classify::<ChaCha8Rng>(t, &bound, fused, None).map_err(contract)?;
            t.cross_entropy(logits, &targets)
        });
    });
}

pub fn small_backbone_every_weight() {
    let h = JointHierarchy::from_parents(vec![None, Some(0), Some(1), Some(0)]).unwrap();
    let config = BackboneConfig {
        blocks: vec![
            BlockConfig { in_channels: 3, out_channels: 4, temporal_kernel: 3, temporal_stride: 1 },
            BlockConfig { in_channels: 4, out_channels: 5, temporal_kernel: 3, temporal_stride: 2 },
        ],
    };
    let net = Backbone::new(config.clone(), GraphTopology::from_hierarchy(&h)).unwrap();
    each_seed(|seed, rng| {
        let mut params = ParamSet::new();
        backbone::init_params(&config, &mut params, rng);
        randomize_biases(&mut params, rng);
        let x = uniform(rng, &[2, 8, 4, 3], -1.0, 1.0);
        check_params("backbone", seed, &params, |t, p| {
            let y = net.forward(t, p, t.leaf(x.clone()), 1).unwrap();
            project(t, y, seed).unwrap()
        });
    });
}

pub fn desk_backbone_on_toy_input() {
    let h = JointHierarchy::from_parents(vec![None, Some(0), Some(1), Some(0)]).unwrap();
    let config = BackboneConfig::desk(3);
    let net = Backbone::new(config.clone(), GraphTopology::from_hierarchy(&h)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = ParamSet::new();
    backbone::init_params(&config, &mut params, &mut rng);
    randomize_biases(&mut params, &mut rng);
    let x = uniform(&mut rng, &[1, 8, 4, 3], -1.0, 1.0);
    check_params("desk backbone", 11, &params, |t, p| {
        let y = net.forward(t, p, t.leaf(x.clone()), 1).unwrap();
        project(t, y, 11).unwrap()
    });
}

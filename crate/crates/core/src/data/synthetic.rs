//! Synthetic motion classes over a joint hierarchy.
//!
//! Each class is an archetype: a base frequency, an amplitude envelope, and
//! per-joint oscillation amplitude, phase, and direction, with amplitudes
//! rescaled to a common RMS displacement. A joint's position
//! is its parent's position plus a fixed rest offset plus its own local
//! oscillation, so motion propagates down the tree. Per-sample variation
//! (amplitude scale, phase shift, coordinate jitter) is proportional to
//! `sigma`, which makes `sigma = 0` reproduce the archetype exactly.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, SkeletonSequence};
use crate::error::{Error, Result};
use crate::graph::JointHierarchy;
use crate::numerics::DenseArray;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub subjects: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 100,
            frames: 20,
            subjects: 1,
            sigma: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Envelope {
    Constant,
    RampUp,
    RampDown,
    Bell,
}

impl Envelope {
    fn at(self, u: f64) -> f64 {
        match self {
            Envelope::Constant => 1.0,
            Envelope::RampUp => 0.3 + 0.7 * u,
            Envelope::RampDown => 1.0 - 0.7 * u,
            Envelope::Bell => 0.3 + 0.7 * (PI * u).sin(),
        }
    }
}

struct Archetype {
    frequency: f64,
    envelope: Envelope,
    amplitude: Vec<f64>,
    phase: Vec<f64>,
    direction: Vec<[f64; 3]>,
}

fn unit_vector<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn archetype<R: Rng>(rng: &mut R, joints: usize) -> Archetype {
    let envelope = match rng.gen_range(0..4) {
        0 => Envelope::Constant,
        1 => Envelope::RampUp,
        2 => Envelope::RampDown,
        _ => Envelope::Bell,
    };
    Archetype {
        frequency: rng.gen_range(0.5..2.5),
        envelope,
        amplitude: (0..joints).map(|_| rng.gen_range(0.05..0.5)).collect(),
        phase: (0..joints).map(|_| rng.gen_range(0.0..2.0 * PI)).collect(),
        direction: (0..joints).map(|_| unit_vector(rng)).collect(),
    }
}

/// Rest offset of a joint from its parent: a fixed direction per joint index.
fn rest_offset(joint: usize, level: usize) -> [f64; 3] {
    let angle = joint as f64 * 2.399_963; // golden angle
    let len = 0.4 / (1.0 + 0.3 * level as f64);
    [len * angle.cos(), len * angle.sin(), 0.2 * (level as f64)]
}

/// Joints ordered so every parent precedes its children.
fn topological_order(h: &JointHierarchy) -> Vec<usize> {
    let mut order: Vec<usize> = (0..h.joint_count()).collect();
    order.sort_by_key(|&j| (h.level(j), j));
    order
}

struct Kinematics<'a> {
    hierarchy: &'a JointHierarchy,
    order: Vec<usize>,
    frames: usize,
}

impl Kinematics<'_> {
    /// Joint positions `[t][j]` for one subject performing `arch` with its
    /// amplitudes multiplied by `scale` and every phase offset by `shift`.
    fn positions(&self, arch: &Archetype, scale: f64, shift: f64, base_x: f64) -> Vec<Vec<[f64; 3]>> {
        let v = self.hierarchy.joint_count();
        let mut out = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let u = t as f64 / self.frames as f64;
            let mut pos = vec![[0.0f64; 3]; v];
            for &j in &self.order {
                let (parent, rest) = match self.hierarchy.parent(j) {
                    Some(p) => (pos[p], rest_offset(j, self.hierarchy.level(j))),
                    None => ([base_x, 0.0, 0.0], [0.0; 3]),
                };
                let osc = scale
                    * arch.amplitude[j]
                    * arch.envelope.at(u)
                    * (2.0 * PI * arch.frequency * u + arch.phase[j] + shift).sin();
                let mut p = [0.0; 3];
                for c in 0..3 {
                    p[c] = parent[c] + rest[c] + osc * arch.direction[j][c];
                }
                pos[j] = p;
            }
            out.push(pos);
        }
        out
    }

    /// Root-mean-square displacement of `arch` from the rest pose.
    fn motion_rms(&self, arch: &Archetype) -> f64 {
        let rest = self.positions(arch, 0.0, 0.0, 0.0);
        let moving = self.positions(arch, 1.0, 0.0, 0.0);
        let (mut sum, mut n) = (0.0, 0usize);
        for (a, b) in moving.iter().flatten().zip(rest.iter().flatten()) {
            for c in 0..3 {
                sum += (a[c] - b[c]).powi(2);
                n += 1;
            }
        }
        (sum / n as f64).sqrt()
    }
}

/// Every archetype is rescaled to this RMS displacement, so classes differ in
/// pattern rather than in overall motion intensity.
const MOTION_RMS: f64 = 0.25;

pub fn generate_synthetic(config: &SyntheticConfig, hierarchy: &JointHierarchy) -> Result<Dataset> {
    if config.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", config.classes)));
    }
    if config.per_class == 0 || config.frames == 0 || config.subjects == 0 {
        return Err(Error::Config("samples per class, frames, and subjects must be positive".into()));
    }
    if !(config.sigma >= 0.0 && config.sigma.is_finite()) {
        return Err(Error::Config(format!("jitter sigma must be nonnegative, got {}", config.sigma)));
    }
    let v = hierarchy.joint_count();
    let (t_len, m_len) = (config.frames, config.subjects);
    let kin = Kinematics {
        hierarchy,
        order: topological_order(hierarchy),
        frames: t_len,
    };
    let mut class_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut archetypes: Vec<Archetype> = (0..config.classes).map(|_| archetype(&mut class_rng, v)).collect();
    for arch in &mut archetypes {
        let gain = MOTION_RMS / kin.motion_rms(arch).max(1e-12);
        arch.amplitude.iter_mut().for_each(|a| *a *= gain);
    }
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f5a_4d70_u64);
    let sigma = config.sigma;

    let mut sequences = Vec::with_capacity(config.classes * config.per_class);
    for (class, arch) in archetypes.iter().enumerate() {
        for i in 0..config.per_class {
            let mut data = vec![0.0; 3 * t_len * v * m_len];
            for m in 0..m_len {
                let z1: f64 = StandardNormal.sample(&mut sample_rng);
                let z2: f64 = StandardNormal.sample(&mut sample_rng);
                let scale = 1.0 + 2.0 * sigma * z1;
                let shift = 4.0 * sigma * z2;
                let pos = kin.positions(arch, scale, shift, m as f64 * 1.5);
                for (t, frame) in pos.iter().enumerate() {
                    for (j, p) in frame.iter().enumerate() {
                        for (c, &coord) in p.iter().enumerate() {
                            let noise = if sigma > 0.0 {
                                let z: f64 = StandardNormal.sample(&mut sample_rng);
                                sigma * z
                            } else {
                                0.0
                            };
                            data[((c * t_len + t) * v + j) * m_len + m] = coord + noise;
                        }
                    }
                }
            }
            let data = DenseArray::new(vec![3, t_len, v, m_len], data)?;
            sequences.push(SkeletonSequence::new(data, class, format!("c{class:03}_s{i:04}"))?);
        }
    }

    let mut meta = DatasetMeta {
        class_names: (0..config.classes).map(|c| format!("action{c:02}")).collect(),
        seed: Some(config.seed),
        generator: Some(serde_json::to_value(config)?),
        ..Default::default()
    };
    meta.set_hierarchy(hierarchy);
    Ok(Dataset { sequences, meta })
}

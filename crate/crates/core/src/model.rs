//! Backbone plus fusion head with a detector state: the full classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, Backbone, BackboneConfig};
use crate::data::{to_batch, SkeletonSequence};
use crate::energy::{self, Detection, DetectorState, EnergyConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionHead, HeadConfig};
use crate::graph::{GraphTopology, JointHierarchy};
use crate::numerics::{Tape, Var};
use crate::params::{BoundParams, ParamSet};

/// Rows per tape when running inference.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    /// Parent index per joint, `-1` for the root.
    pub hierarchy: Vec<i64>,
    /// Dataset class id behind each seen logit slot.
    pub seen_class_ids: Vec<usize>,
    pub energy: EnergyConfig,
}

impl ModelConfig {
    pub fn joint_hierarchy(&self) -> Result<JointHierarchy> {
        let parents = self
            .hierarchy
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        Ok(JointHierarchy::from_parents(parents)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        self.energy.validate()?;
        if self.head.feature_dim != self.backbone.feature_dim() {
            return Err(Error::Config(format!(
                "head expects {} features but the backbone produces {}",
                self.head.feature_dim,
                self.backbone.feature_dim()
            )));
        }
        if self.seen_class_ids.len() != self.head.seen_classes {
            return Err(Error::Config(format!(
                "{} seen class ids for {} seen slots",
                self.seen_class_ids.len(),
                self.head.seen_classes
            )));
        }
        self.joint_hierarchy()?;
        Ok(())
    }
}

/// Detection score used by evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    #[default]
    Energy,
    Msp,
}

/// Inference-time options for the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub score: ScoreKind,
    /// Clamp applied to pooled features before the head.
    pub react: Option<f64>,
}

pub struct Forward<'t> {
    pub features: Var<'t>,
    pub logits: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    backbone: Backbone,
    head: FusionHead,
    pub params: ParamSet,
    pub detector: DetectorState,
}

impl Model {
    /// Freshly initialized parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        backbone::init_params(&config.backbone, &mut params, &mut rng);
        fusion::init_params(&config.head, &mut params, &mut rng);
        Self::from_parts(config, params, None)
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet, detector: Option<DetectorState>) -> Result<Self> {
        config.validate()?;
        let topology = GraphTopology::from_hierarchy(&config.joint_hierarchy()?);
        let backbone = Backbone::new(config.backbone.clone(), topology)?;
        let head = FusionHead::new(config.head.clone())?;
        let detector =
            detector.unwrap_or_else(|| DetectorState::uncalibrated(config.energy, config.head.seen_classes));
        let mut expected = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        backbone::init_params(&config.backbone, &mut expected, &mut rng);
        fusion::init_params(&config.head, &mut expected, &mut rng);
        if expected.names() != params.names() {
            return Err(Error::Config(format!(
                "parameter names {:?} do not match the architecture {:?}",
                params.names(),
                expected.names()
            )));
        }
        for ((name, want), got) in expected.iter().zip(params.values()) {
            if want.shape() != got.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, architecture needs {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Self {
            config,
            backbone,
            head,
            params,
            detector,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn joint_count(&self) -> usize {
        self.backbone.topology().joint_count()
    }

    pub fn seen_classes(&self) -> usize {
        self.config.head.seen_classes
    }

    /// Logit slot of a dataset class id, if it is a seen class.
    pub fn slot_of(&self, class_id: usize) -> Option<usize> {
        self.config.seen_class_ids.iter().position(|&c| c == class_id)
    }

    pub fn check_input(&self, seq: &SkeletonSequence) -> Result<()> {
        let s = seq.shape();
        if s.joints != self.joint_count() {
            return Err(Error::Argument(format!(
                "sample {} has {} joints, expected V = {}",
                seq.id,
                s.joints,
                self.joint_count()
            )));
        }
        if s.channels != self.config.backbone.in_channels() {
            return Err(Error::Argument(format!(
                "sample {} has {} coordinates, expected {}",
                seq.id,
                s.channels,
                self.config.backbone.in_channels()
            )));
        }
        Ok(())
    }

    /// Records the full forward pass. Dropout runs only when `rng` is given.
    pub fn forward<'t, R: Rng>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        batch: &[&SkeletonSequence],
        rng: Option<&mut R>,
        react: Option<f64>,
    ) -> Result<Forward<'t>> {
        for seq in batch {
            self.check_input(seq)?;
        }
        let (x, subjects) = to_batch(batch)?;
        let x = tape.leaf(x);
        let mut features = self.backbone.forward(tape, params, x, subjects)?;
        if let Some(c) = react {
            if !(c > 0.0) {
                return Err(Error::Argument(format!("ReAct clamp must be positive, got {c}")));
            }
            features = tape.clamp_max(features, c);
        }
        let shaped = self.head.shape_features(tape, features)?.map(|(s, _)| s);
        let fused = self.head.fuse(tape, params, features, shaped)?;
        let logits = self.head.classify(tape, params, fused, rng)?;
        Ok(Forward { features, logits })
    }

    /// Evaluation-mode logits, one row of length `K + k` per sequence.
    pub fn logits(&self, sequences: &[&SkeletonSequence], react: Option<f64>) -> Result<Vec<Vec<f64>>> {
        let width = self.config.head.logit_dim();
        let mut out = Vec::with_capacity(sequences.len());
        for chunk in sequences.chunks(EVAL_CHUNK) {
            let tape = Tape::new();
            let bound = self.params.bind(&tape);
            let f = self.forward::<ChaCha8Rng>(&tape, &bound, chunk, None, react)?;
            out.extend(f.logits.value().data().chunks_exact(width).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Pooled backbone features, one row of length `D` per sequence.
    pub fn features(&self, sequences: &[&SkeletonSequence]) -> Result<Vec<Vec<f64>>> {
        let d = self.config.backbone.feature_dim();
        let mut out = Vec::with_capacity(sequences.len());
        for chunk in sequences.chunks(EVAL_CHUNK) {
            let tape = Tape::new();
            let bound = self.params.bind(&tape);
            let f = self.forward::<ChaCha8Rng>(&tape, &bound, chunk, None, None)?;
            out.extend(f.features.value().data().chunks_exact(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Score of one logit row under `kind`; higher means more in-distribution.
    pub fn score(&self, logits: &[f64], kind: ScoreKind) -> Result<f64> {
        let seen = &logits[..self.seen_classes()];
        match kind {
            ScoreKind::Energy => energy::detection_score(seen, self.config.energy.epsilon),
            ScoreKind::Msp => energy::msp_score(seen),
        }
    }

    /// Closed-set prediction over the seen slots, as a dataset class id.
    pub fn closed_set_class(&self, logits: &[f64]) -> usize {
        self.config.seen_class_ids[energy::argmax(&logits[..self.seen_classes()])]
    }

    pub fn detect(&self, sequences: &[&SkeletonSequence]) -> Result<Vec<Detection>> {
        self.detector.tau()?;
        self.logits(sequences, None)?
            .iter()
            .map(|row| self.detector.detect(row))
            .collect()
    }
}

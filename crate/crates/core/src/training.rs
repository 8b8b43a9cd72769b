//! SGD with Nesterov momentum, the warm-up schedule, the epoch loop with
//! threshold calibration, and split evaluation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{mask_joints, Dataset, SkeletonSequence};
use crate::energy::{energy_bounded_loss, EnergyConfig};
use crate::error::{Error, Result};
use crate::fusion::{AshConfig, HeadConfig};
use crate::metrics::{MetricReport, ScoredSample};
use crate::model::{InferenceOptions, Model, ModelConfig};
use crate::numerics::{DenseArray, Tape};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Cross-entropy plus the energy hinge.
    #[default]
    Energy,
    /// Cross-entropy alone.
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Four blocks (16/32/32/64 channels), MLP width 64.
    #[default]
    Desk,
    /// Four blocks (64/64/128/256 channels), MLP width 400, batch 64.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub ash: Option<AshConfig>,
    pub fusion: bool,
    pub loss: LossKind,
    pub extra_dims: usize,
    pub dropout: f64,
    pub mlp_hidden: usize,
    pub preset: Preset,
    pub energy: EnergyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0004,
            batch_size: 32,
            epochs: 50,
            warmup_epochs: 5,
            seed: 0,
            ash: Some(AshConfig::default()),
            fusion: true,
            loss: LossKind::Energy,
            extra_dims: 1,
            dropout: 0.1,
            mlp_hidden: 64,
            preset: Preset::Desk,
            energy: EnergyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self {
            batch_size: 64,
            epochs: 100,
            mlp_hidden: 400,
            preset: Preset::Full,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warm-up ({} epochs) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        self.energy.validate()
    }

    fn backbone(&self, in_channels: usize) -> BackboneConfig {
        match self.preset {
            Preset::Desk => BackboneConfig::desk(in_channels),
            Preset::Full => {
                let mut b = BackboneConfig::desk(in_channels);
                let widths = [64, 64, 128, 256];
                let mut cin = in_channels;
                for (block, w) in b.blocks.iter_mut().zip(widths) {
                    block.in_channels = cin;
                    block.out_channels = w;
                    cin = w;
                }
                b
            }
        }
    }

    /// Architecture for `in_channels` coordinates and the given seen classes.
    pub fn model_config(&self, in_channels: usize, hierarchy: Vec<i64>, seen_class_ids: Vec<usize>) -> ModelConfig {
        let backbone = self.backbone(in_channels);
        let energy = match self.loss {
            LossKind::Energy => self.energy,
            LossKind::Ce => EnergyConfig {
                alpha: 0.0,
                ..self.energy
            },
        };
        ModelConfig {
            head: HeadConfig {
                feature_dim: backbone.feature_dim(),
                ash: self.ash,
                fusion: self.fusion,
                mlp_hidden: self.mlp_hidden,
                seen_classes: seen_class_ids.len(),
                extra_dims: self.extra_dims,
                dropout: self.dropout,
            },
            backbone,
            hierarchy,
            seen_class_ids,
            energy,
        }
    }
}

/// Linear ramp over the first `warmup_epochs`, constant afterwards.
pub fn warmup_lr(epoch: usize, base_lr: f64, warmup_epochs: usize) -> f64 {
    if epoch < warmup_epochs {
        base_lr * ((epoch + 1) as f64 / warmup_epochs as f64)
    } else {
        base_lr
    }
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SgdState {
    pub velocity: Vec<DenseArray>,
}

/// Nesterov update with L2 decay folded into the gradient:
/// `g += wd * w; v = mu * v - lr * g; w += mu * v - lr * g`.
pub fn sgd_step(
    params: &mut [DenseArray],
    grads: &[DenseArray],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::State(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| DenseArray::zeros(p.shape())).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::State("momentum state does not match the parameters".into()));
    }
    for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::State(format!(
                "shape mismatch: parameter {:?}, gradient {:?}, velocity {:?}",
                w.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g = gi + weight_decay * *wi;
            *vi = momentum * *vi - lr * g;
            *wi += momentum * *vi - lr * g;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cross_entropy: f64,
    pub energy_term: f64,
    /// Mean free energy `E` over the epoch's training samples.
    pub energy: f64,
    pub val_top1: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
}

/// Seen class ids of a training split; every label must be one of them.
fn seen_classes(train: &Dataset) -> Result<Vec<usize>> {
    let labels: BTreeSet<usize> = train.sequences.iter().map(|s| s.label).collect();
    if let Some(unseen) = &train.meta.unseen_classes {
        if let Some(bad) = unseen.iter().find(|c| labels.contains(c)) {
            return Err(Error::Protocol(format!(
                "training split contains samples of unseen class {bad}"
            )));
        }
    }
    match &train.meta.seen_classes {
        Some(seen) => {
            if let Some(bad) = labels.iter().find(|l| !seen.contains(l)) {
                return Err(Error::Protocol(format!(
                    "training label {bad} is not among the seen classes {seen:?}"
                )));
            }
            Ok(seen.clone())
        }
        None => Ok(labels.into_iter().collect()),
    }
}

/// Runs the epoch loop and calibrates the detector on training scores.
/// `on_epoch` sees each record as soon as it is produced.
pub fn train(
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let shape = train
        .shape()?
        .ok_or_else(|| Error::Protocol("training split is empty".into()))?;
    let seen = seen_classes(train)?;
    let hierarchy = match &train.meta.hierarchy {
        Some(h) => h.clone(),
        None => return Err(Error::Config("training data does not record its joint hierarchy".into())),
    };
    let model_config = config.model_config(shape.channels, hierarchy, seen);
    let mut model = Model::new(model_config, config.seed)?;
    let targets: Vec<usize> = train
        .sequences
        .iter()
        .map(|s| model.slot_of(s.label).expect("checked against seen classes"))
        .collect();
    let energy_cfg = model.config().energy;
    let k = model.seen_classes();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_STREAM);
    let mut sgd = SgdState::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = warmup_lr(epoch, config.learning_rate, config.warmup_epochs);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut ce_sum, mut term_sum, mut energy_sum) = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let seqs: Vec<&SkeletonSequence> = batch.iter().map(|&i| &train.sequences[i]).collect();
            let batch_targets: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let grads = {
                let tape = Tape::new();
                let bound = model.params.bind(&tape);
                let fwd = model.forward(&tape, &bound, &seqs, Some(&mut dropout_rng), None)?;
                let terms = energy_bounded_loss(&tape, fwd.logits, &batch_targets, k, &energy_cfg)?;
                let b = batch.len() as f64;
                loss_sum += terms.total.value().data()[0] * b;
                ce_sum += terms.cross_entropy.value().data()[0] * b;
                term_sum += terms.energy_term.value().data()[0] * b;
                energy_sum += terms.energy.value().data().iter().sum::<f64>();
                let mut g = tape.backward(terms.total)?;
                bound
                    .vars()
                    .iter()
                    .zip(model.params.values())
                    .map(|(&v, p)| g.take(v).unwrap_or_else(|| DenseArray::zeros(p.shape())))
                    .collect::<Vec<_>>()
            };
            sgd_step(
                model.params.values_mut(),
                &grads,
                &mut sgd,
                lr,
                config.momentum,
                config.weight_decay,
            )?;
        }
        let n = train.len() as f64;
        let val_top1 = match val {
            Some(v) if !v.is_empty() => Some(closed_set_top1(&model, v)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / n,
            cross_entropy: ce_sum / n,
            energy_term: term_sum / n,
            energy: energy_sum / n,
            val_top1,
        };
        on_epoch(&record);
        log.push(record);
    }

    let refs: Vec<&SkeletonSequence> = train.sequences.iter().collect();
    let scores: Vec<f64> = model
        .logits(&refs, None)?
        .iter()
        .map(|row| model.score(row, Default::default()))
        .collect::<Result<_>>()?;
    model.detector = model.detector.clone().calibrated(&scores)?;
    Ok(TrainOutcome { model, log })
}

fn closed_set_top1(model: &Model, data: &Dataset) -> Result<f64> {
    let refs: Vec<&SkeletonSequence> = data.sequences.iter().collect();
    let logits = model.logits(&refs, None)?;
    let hits = logits
        .iter()
        .zip(&data.sequences)
        .filter(|(row, s)| model.closed_set_class(row) == s.label)
        .count();
    Ok(100.0 * hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Seen-class samples only: Top-1.
    IdOnly,
    /// Seen and unseen samples: every metric.
    Mix,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    pub inference: InferenceOptions,
    /// Joint-masking percentage applied to every sample before scoring.
    pub mask_pct: Option<f64>,
    pub mask_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub samples: Vec<ScoredSample>,
}

/// Scores one sequence list into per-sample records. Seen-class samples are
/// in-distribution; their prediction is the closed-set argmax.
pub fn score_samples(model: &Model, sequences: &[&SkeletonSequence], options: &EvalOptions) -> Result<Vec<ScoredSample>> {
    let masked: Vec<SkeletonSequence>;
    let inputs: Vec<&SkeletonSequence> = match options.mask_pct {
        Some(p) if p > 0.0 => {
            masked = sequences
                .iter()
                .enumerate()
                .map(|(i, s)| mask_joints(s, p, options.mask_seed.wrapping_add(i as u64)))
                .collect::<Result<_>>()?;
            masked.iter().collect()
        }
        _ => sequences.to_vec(),
    };
    let logits = model.logits(&inputs, options.inference.react)?;
    logits
        .iter()
        .zip(sequences)
        .map(|(row, s)| {
            Ok(ScoredSample {
                score: model.score(row, options.inference.score)?,
                is_id: model.slot_of(s.label).is_some(),
                predicted: model.closed_set_class(row),
                truth: s.label,
            })
        })
        .collect()
}

/// Runs the calibrated model over a split and reports the metrics of `mode`.
pub fn evaluate(model: &Model, data: &Dataset, mode: EvalMode, options: &EvalOptions) -> Result<Evaluation> {
    let tau = model.detector.tau()?;
    if data.is_empty() {
        return Err(Error::Protocol("evaluation split is empty".into()));
    }
    let refs: Vec<&SkeletonSequence> = data.sequences.iter().collect();
    summarize(score_samples(model, &refs, options)?, mode, tau)
}

/// Metric report of already-scored samples under `mode`.
pub fn summarize(mut samples: Vec<ScoredSample>, mode: EvalMode, tau: f64) -> Result<Evaluation> {
    if mode == EvalMode::IdOnly {
        samples.retain(|s| s.is_id);
        if samples.is_empty() {
            return Err(Error::Protocol("split holds no seen-class samples".into()));
        }
    }
    let mut report = MetricReport::from_samples(&samples, tau)?;
    if mode == EvalMode::Mix && report.auroc.is_none() {
        return Err(Error::Protocol(
            "mix evaluation needs both seen and unseen samples".into(),
        ));
    }
    if mode == EvalMode::IdOnly {
        report.error = None;
        report.fpr95 = None;
        report.auroc = None;
        report.overlap = None;
    }
    Ok(Evaluation { report, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_examples() {
        assert!((warmup_lr(0, 1.0, 5) - 0.2).abs() < 1e-15);
        assert_eq!(warmup_lr(4, 0.3, 5), 0.3);
        assert_eq!(warmup_lr(50, 0.3, 5), 0.3);
        assert_eq!(warmup_lr(0, 0.3, 0), 0.3);
    }

    #[test]
    fn plain_gradient_descent() {
        let mut w = vec![DenseArray::vector(vec![1.0, -2.0])];
        let g = vec![DenseArray::vector(vec![0.5, 0.25])];
        let mut s = SgdState::default();
        sgd_step(&mut w, &g, &mut s, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(w[0].data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn zero_gradient_keeps_weights() {
        let mut w = vec![DenseArray::vector(vec![3.0])];
        let g = vec![DenseArray::vector(vec![0.0])];
        let mut s = SgdState::default();
        sgd_step(&mut w, &g, &mut s, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(w[0].data(), &[3.0]);
    }

    #[test]
    fn nesterov_on_scalar_quadratic() {
        // f(w) = w^2 / 2, so g = w. Hand iteration with lr 0.1, mu 0.9, w0 = 1:
        // step 1: v = -0.1, w = 1 - 0.09 - 0.1 = 0.81
        // step 2: g = 0.81, v = -0.09 - 0.081 = -0.171, w = 0.81 - 0.1539 - 0.081 = 0.5751
        let mut w = vec![DenseArray::vector(vec![1.0])];
        let mut s = SgdState::default();
        for _ in 0..2 {
            let g = vec![w[0].clone()];
            sgd_step(&mut w, &g, &mut s, 0.1, 0.9, 0.0).unwrap();
        }
        assert!((w[0].data()[0] - 0.5751).abs() < 1e-12);
        assert!((s.velocity[0].data()[0] + 0.171).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut w = vec![DenseArray::vector(vec![1.0])];
        let g = vec![DenseArray::vector(vec![1.0, 2.0])];
        assert!(sgd_step(&mut w, &g, &mut SgdState::default(), 0.1, 0.0, 0.0).is_err());
        assert!(sgd_step(&mut w, &[], &mut SgdState::default(), 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_epochs: 5,
            epochs: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

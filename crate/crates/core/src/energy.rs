//! Energy scoring, threshold calibration, detection, the energy-bounded
//! training objective, and the MSP / ReAct baseline scores.
//!
//! Scores follow the "higher is more in-distribution" convention: the
//! detection score is the negated free energy `-E(x) = eps * logsumexp(f / eps)`
//! taken over the `K` seen-class logits only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    /// Temperature.
    pub epsilon: f64,
    /// Fraction of training scores allowed below the threshold.
    pub quantile: f64,
    /// Energy margin `m_in` of the hinge term.
    pub margin: f64,
    /// Weight of the hinge term.
    pub alpha: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            quantile: 0.10,
            margin: -25.0,
            alpha: 0.1,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.epsilon)));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Config(format!("quantile must lie in (0, 1), got {}", self.quantile)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("loss weight must be nonnegative, got {}", self.alpha)));
        }
        if self.margin.is_nan() {
            return Err(Error::Config("margin must be a number".into()));
        }
        Ok(())
    }
}

/// Free energy `E = -eps * ln sum_i exp(f_i / eps)` over the seen logits.
pub fn energy_score(seen_logits: &[f64], epsilon: f64) -> Result<f64> {
    Ok(-numerics::logsumexp(seen_logits, epsilon)?)
}

/// Detection score `-E`; higher means more in-distribution.
pub fn detection_score(seen_logits: &[f64], epsilon: f64) -> Result<f64> {
    Ok(numerics::logsumexp(seen_logits, epsilon)?)
}

/// Maximum softmax probability over the seen logits.
pub fn msp_score(seen_logits: &[f64]) -> Result<f64> {
    if seen_logits.is_empty() {
        return Err(Error::Argument("MSP of an empty logit vector".into()));
    }
    Ok(numerics::softmax(seen_logits)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Elementwise `min(feature, clamp)`.
pub fn react_clamp(features: &[f64], clamp: f64) -> Result<Vec<f64>> {
    if !(clamp > 0.0) {
        return Err(Error::Argument(format!("ReAct clamp must be positive, got {clamp}")));
    }
    Ok(features.iter().map(|&f| f.min(clamp)).collect())
}

/// Nearest-rank `q`-quantile: the `ceil(q * N)`-th smallest score.
pub fn calibrate_threshold(scores: &[f64], quantile: f64) -> Result<f64> {
    if scores.len() < 10 {
        return Err(Error::Calibration(format!(
            "need at least 10 scores to calibrate, got {}",
            scores.len()
        )));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::Calibration(format!("quantile {quantile} outside (0, 1)")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Calibration("non-finite calibration score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // The small offset keeps products such as 0.1 * 100 from rounding up a rank.
    let rank = ((quantile * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub score: f64,
    pub verdict: Verdict,
    /// Index of the winning seen class, or `seen_classes` (the first unseen
    /// slot) for an unseen verdict.
    pub label: usize,
    /// Class probabilities over all `K + k` slots: softmax over the seen
    /// slots for a seen verdict, a one-hot on the first unseen slot otherwise.
    pub probabilities: Vec<f64>,
}

impl Detection {
    pub fn is_ood(&self) -> bool {
        self.verdict == Verdict::Unseen
    }
}

/// Threshold and configuration needed to run detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub tau: Option<f64>,
    pub calibration_count: usize,
    pub seen_classes: usize,
    pub config: EnergyConfig,
}

impl DetectorState {
    pub fn uncalibrated(config: EnergyConfig, seen_classes: usize) -> Self {
        Self {
            tau: None,
            calibration_count: 0,
            seen_classes,
            config,
        }
    }

    /// Sets `tau` from training-set detection scores.
    pub fn calibrated(self, training_scores: &[f64]) -> Result<Self> {
        let tau = calibrate_threshold(training_scores, self.config.quantile)?;
        Ok(Self {
            tau: Some(tau),
            calibration_count: training_scores.len(),
            ..self
        })
    }

    pub fn with_tau(self, tau: f64, count: usize) -> Self {
        Self {
            tau: Some(tau),
            calibration_count: count,
            ..self
        }
    }

    pub fn is_calibrated(&self) -> bool {
        self.tau.is_some()
    }

    pub fn tau(&self) -> Result<f64> {
        self.tau
            .ok_or_else(|| Error::State("detector has not been calibrated".into()))
    }

    /// Scores the seen slots and applies the threshold: `score < tau` means
    /// unseen.
    pub fn detect(&self, logits: &[f64]) -> Result<Detection> {
        let tau = self.tau()?;
        let k = self.seen_classes;
        if logits.len() <= k {
            return Err(Error::Argument(format!(
                "expected more than {k} logits (seen plus unseen slots), got {}",
                logits.len()
            )));
        }
        let seen = &logits[..k];
        let score = detection_score(seen, self.config.epsilon)?;
        let mut probabilities = vec![0.0; logits.len()];
        if score < tau {
            probabilities[k] = 1.0;
            return Ok(Detection {
                score,
                verdict: Verdict::Unseen,
                label: k,
                probabilities,
            });
        }
        let p = numerics::softmax(seen);
        let label = argmax(&p);
        probabilities[..k].copy_from_slice(&p);
        Ok(Detection {
            score,
            verdict: Verdict::Seen,
            label,
            probabilities,
        })
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Loss components recorded on the tape.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub cross_entropy: Var<'t>,
    pub energy_term: Var<'t>,
    /// Per-sample free energy `E`, shape `[B]`.
    pub energy: Var<'t>,
}

/// `CE + alpha * mean_b max(0, E_b - m_in)^2` for `logits: [B, K + k]`.
pub fn energy_bounded_loss<'t>(
    tape: &'t Tape,
    logits: Var<'t>,
    targets: &[usize],
    seen_classes: usize,
    config: &EnergyConfig,
) -> Result<LossTerms<'t>> {
    if let Some(&bad) = targets.iter().find(|&&t| t >= seen_classes) {
        return Err(Error::Argument(format!(
            "target {bad} is not one of the {seen_classes} seen classes"
        )));
    }
    let ce = tape.cross_entropy(logits, targets)?;
    let neg_energy = tape.soft_logsumexp(logits, seen_classes, config.epsilon)?;
    let energy = tape.scale(neg_energy, -1.0);
    let hinge = tape.squared_hinge(energy, config.margin);
    let hinge_mean = tape.mean(hinge);
    let energy_term = tape.scale(hinge_mean, config.alpha);
    let total = tape.add(ce, energy_term)?;
    Ok(LossTerms {
        total,
        cross_entropy: ce,
        energy_term,
        energy,
    })
}

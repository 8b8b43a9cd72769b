//! Activation shaping: percentile pruning of a nonnegative feature vector,
//! optionally followed by binarizing (B) or exponential rescaling (S) of the
//! survivors.
//!
//! The threshold is the nearest-rank percentile: the value at index
//! `floor(p / 100 * D)` of the ascending sort. Entries strictly below it are
//! pruned, so ties at the threshold all survive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CustomBackward, DenseArray, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AshStrategy {
    #[serde(rename = "p")]
    Prune,
    #[serde(rename = "b")]
    Binarize,
    #[serde(rename = "s")]
    Scale,
}

impl std::str::FromStr for AshStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p" => Ok(AshStrategy::Prune),
            "b" => Ok(AshStrategy::Binarize),
            "s" => Ok(AshStrategy::Scale),
            other => Err(Error::Config(format!("unknown ASH strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AshConfig {
    pub strategy: AshStrategy,
    pub percentile: f64,
}

impl Default for AshConfig {
    fn default() -> Self {
        Self {
            strategy: AshStrategy::Prune,
            percentile: 75.0,
        }
    }
}

impl AshConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::Config(format!(
                "pruning percentage must lie strictly between 0 and 100, got {}",
                self.percentile
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AshOutput {
    pub values: Vec<f64>,
    /// Set when pruning left nothing to binarize or rescale; `values` is then
    /// all zero.
    pub degenerate: bool,
}

fn check_input(features: &[f64], percentile: f64) -> Result<()> {
    if features.is_empty() {
        return Err(Error::Argument("activation shaping of an empty vector".into()));
    }
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::Argument(format!(
            "pruning percentage {percentile} outside (0, 100)"
        )));
    }
    if features.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Argument(
            "activation shaping expects finite nonnegative features".into(),
        ));
    }
    Ok(())
}

/// Nearest-rank percentile threshold.
pub fn threshold(features: &[f64], percentile: f64) -> f64 {
    let mut sorted = features.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((percentile * sorted.len() as f64) / 100.0).floor() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn survivors(features: &[f64], percentile: f64) -> Vec<bool> {
    let t = threshold(features, percentile);
    features.iter().map(|&v| v >= t).collect()
}

pub fn ash_p(features: &[f64], percentile: f64) -> Result<AshOutput> {
    check_input(features, percentile)?;
    Ok(AshOutput {
        values: prune(features, &survivors(features, percentile)),
        degenerate: false,
    })
}

pub fn ash_b(features: &[f64], percentile: f64) -> Result<AshOutput> {
    check_input(features, percentile)?;
    Ok(binarize(features, &survivors(features, percentile)))
}

pub fn ash_s(features: &[f64], percentile: f64) -> Result<AshOutput> {
    check_input(features, percentile)?;
    Ok(rescale(features, &survivors(features, percentile)))
}

pub fn apply(config: &AshConfig, features: &[f64]) -> Result<AshOutput> {
    match config.strategy {
        AshStrategy::Prune => ash_p(features, config.percentile),
        AshStrategy::Binarize => ash_b(features, config.percentile),
        AshStrategy::Scale => ash_s(features, config.percentile),
    }
}

fn prune(features: &[f64], mask: &[bool]) -> Vec<f64> {
    features
        .iter()
        .zip(mask)
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect()
}

fn binarize(features: &[f64], mask: &[bool]) -> AshOutput {
    let total: f64 = features.iter().sum();
    let pruned = prune(features, mask);
    let n = pruned.iter().filter(|&&v| v != 0.0).count();
    if n == 0 {
        return AshOutput {
            values: vec![0.0; features.len()],
            degenerate: true,
        };
    }
    let fill = total / n as f64;
    AshOutput {
        values: pruned
            .iter()
            .map(|&v| if v != 0.0 { fill } else { 0.0 })
            .collect(),
        degenerate: false,
    }
}

fn rescale(features: &[f64], mask: &[bool]) -> AshOutput {
    let before: f64 = features.iter().sum();
    let pruned = prune(features, mask);
    let after: f64 = pruned.iter().sum();
    if after == 0.0 {
        return AshOutput {
            values: vec![0.0; features.len()],
            degenerate: true,
        };
    }
    let factor = (before / after).exp();
    AshOutput {
        values: pruned.iter().map(|&v| v * factor).collect(),
        degenerate: false,
    }
}

/// Backward rule: the survivor mask is held fixed, gradients flow through the
/// surviving values and through the sums used for binarizing and rescaling.
struct AshBackward {
    strategy: AshStrategy,
    masks: Vec<bool>,
    width: usize,
}

impl CustomBackward for AshBackward {
    fn backward(
        &self,
        inputs: &[&DenseArray],
        _output: &DenseArray,
        grad_output: &DenseArray,
    ) -> Vec<DenseArray> {
        let x = inputs[0];
        let d = self.width;
        let mut gx = vec![0.0; x.len()];
        for ((row, g), (mask, out)) in x
            .data()
            .chunks_exact(d)
            .zip(grad_output.data().chunks_exact(d))
            .zip(self.masks.chunks_exact(d).zip(gx.chunks_exact_mut(d)))
        {
            match self.strategy {
                AshStrategy::Prune => {
                    for ((o, &gi), &m) in out.iter_mut().zip(g).zip(mask) {
                        *o = if m { gi } else { 0.0 };
                    }
                }
                AshStrategy::Binarize => {
                    let live: Vec<bool> = row
                        .iter()
                        .zip(mask)
                        .map(|(&v, &m)| m && v != 0.0)
                        .collect();
                    let n = live.iter().filter(|&&l| l).count();
                    if n == 0 {
                        continue;
                    }
                    let share: f64 = g
                        .iter()
                        .zip(&live)
                        .filter(|(_, &l)| l)
                        .map(|(gi, _)| gi)
                        .sum::<f64>()
                        / n as f64;
                    out.iter_mut().for_each(|o| *o = share);
                }
                AshStrategy::Scale => {
                    let s1: f64 = row.iter().sum();
                    let s2: f64 = row.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
                    if s2 == 0.0 {
                        continue;
                    }
                    let e = (s1 / s2).exp();
                    let a: f64 = row
                        .iter()
                        .zip(g)
                        .zip(mask)
                        .filter(|(_, &m)| m)
                        .map(|((v, gi), _)| v * gi)
                        .sum::<f64>()
                        * e;
                    for ((o, &gi), &m) in out.iter_mut().zip(g).zip(mask) {
                        let direct = if m { gi * e } else { 0.0 };
                        let via_ratio = a * (1.0 / s2 - if m { s1 / (s2 * s2) } else { 0.0 });
                        *o = direct + via_ratio;
                    }
                }
            }
        }
        vec![DenseArray::new(x.shape().to_vec(), gx).expect("input shape")]
    }
}

/// Applies activation shaping to every row of `x: [B, D]` on the tape.
/// Returns the shaped rows and the number of degenerate rows.
pub fn ash_rows<'t>(tape: &'t Tape, x: Var<'t>, config: &AshConfig) -> Result<(Var<'t>, usize)> {
    config.validate()?;
    let vx = x.value();
    let s = vx.shape();
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::Argument(format!("activation shaping expects [B, D], got {s:?}")));
    }
    let d = s[1];
    let mut data = Vec::with_capacity(vx.len());
    let mut masks = Vec::with_capacity(vx.len());
    let mut degenerate = 0;
    for row in vx.data().chunks_exact(d) {
        check_input(row, config.percentile)?;
        let mask = survivors(row, config.percentile);
        let out = match config.strategy {
            AshStrategy::Prune => AshOutput {
                values: prune(row, &mask),
                degenerate: false,
            },
            AshStrategy::Binarize => binarize(row, &mask),
            AshStrategy::Scale => rescale(row, &mask),
        };
        degenerate += usize::from(out.degenerate);
        data.extend(out.values);
        masks.extend(mask);
    }
    let value = DenseArray::new(s.to_vec(), data)?;
    let rule = AshBackward {
        strategy: config.strategy,
        masks,
        width: d,
    };
    Ok((tape.custom(&[x], value, Box::new(rule)), degenerate))
}

//! Detection and recognition metrics. In-distribution samples are the
//! positive class and higher scores mean "more in-distribution".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_TPR: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub is_id: bool,
    pub predicted: usize,
    pub truth: usize,
}

fn split_scores(samples: &[ScoredSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut id = Vec::new();
    let mut ood = Vec::new();
    for s in samples {
        if !s.score.is_finite() {
            return Err(Error::Metric(format!("non-finite score {}", s.score)));
        }
        if s.is_id {
            id.push(s.score);
        } else {
            ood.push(s.score);
        }
    }
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Metric(format!(
            "need both in-distribution and out-of-distribution samples, got {} and {}",
            id.len(),
            ood.len()
        )));
    }
    Ok((id, ood))
}

/// Operating point at the largest threshold whose TPR reaches `target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Scores at or above the threshold are predicted in-distribution.
pub fn operating_point(samples: &[ScoredSample], target: f64) -> Result<OperatingPoint> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::Metric(format!("TPR target must lie in (0, 1], got {target}")));
    }
    let (mut id, mut ood) = split_scores(samples)?;
    id.sort_by(|a, b| b.total_cmp(a));
    ood.sort_by(|a, b| b.total_cmp(a));
    // The threshold must admit at least ceil(target * n_id) ID samples; the
    // largest such threshold is the score at that rank.
    let need = ((target * id.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let threshold = id[need - 1];
    let tp = id.iter().filter(|&&s| s >= threshold).count();
    let fp = ood.iter().filter(|&&s| s >= threshold).count();
    Ok(OperatingPoint {
        threshold,
        tpr: tp as f64 / id.len() as f64,
        fpr: fp as f64 / ood.len() as f64,
    })
}

pub fn fpr_at_tpr(samples: &[ScoredSample], target: f64) -> Result<f64> {
    Ok(operating_point(samples, target)?.fpr)
}

/// `0.5 * (1 - TPR) + 0.5 * FPR` at the operating point reaching `target`
/// TPR, with the TPR term taken at its nominal value.
pub fn detection_error(samples: &[ScoredSample], target: f64) -> Result<f64> {
    let op = operating_point(samples, target)?;
    Ok(0.5 * (1.0 - target) + 0.5 * op.fpr)
}

/// Mann-Whitney statistic via midranks: `P(id > ood) + 0.5 P(id = ood)`.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (id, ood) = split_scores(samples)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps midranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        let ids = all[i..=j].iter().filter(|x| x.1).count() as u128;
        twice_rank_sum += twice_mid * ids;
        i = j + 1;
    }
    let n1 = id.len() as u128;
    let n0 = ood.len() as u128;
    // U = R - n1 (n1 + 1) / 2, doubled.
    let twice_u = twice_rank_sum - n1 * (n1 + 1);
    Ok(twice_u as f64 / (2 * n1 * n0) as f64)
}

/// Percentage of correct predictions.
pub fn top1(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::Metric(format!(
            "top-1 needs matching non-empty label lists, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / predicted.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

/// Equal-width bins over the joint range of both lists. A zero-width range
/// yields a single bin holding everything.
pub fn histogram(id: &[f64], ood: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins < 2 {
        return Err(Error::Metric(format!("need at least 2 bins, got {bins}")));
    }
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Metric("histogram needs two non-empty score lists".into()));
    }
    if id.iter().chain(ood).any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score in histogram".into()));
    }
    let lo = id.iter().chain(ood).copied().fold(f64::INFINITY, f64::min);
    let hi = id.iter().chain(ood).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![HistogramBin {
            lo,
            hi,
            id_count: id.len(),
            ood_count: ood.len(),
        }]);
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: lo + b as f64 * width,
            hi: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            id_count: 0,
            ood_count: 0,
        })
        .collect();
    let index = |s: f64| (((s - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1);
    for &s in id {
        out[index(s)].id_count += 1;
    }
    for &s in ood {
        out[index(s)].ood_count += 1;
    }
    Ok(out)
}

/// Histogram intersection of the two normalized score distributions.
pub fn overlap(id: &[f64], ood: &[f64], bins: usize) -> Result<f64> {
    let hist = histogram(id, ood, bins)?;
    let (ni, no) = (id.len() as f64, ood.len() as f64);
    let total: f64 = hist
        .iter()
        .map(|b| (b.id_count as f64 / ni).min(b.ood_count as f64 / no))
        .sum();
    Ok(total.clamp(0.0, 1.0))
}

/// JSON metric report. Fields that a mode does not compute are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub error: Option<f64>,
    pub fpr95: Option<f64>,
    pub auroc: Option<f64>,
    pub top1: Option<f64>,
    pub overlap: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
    pub tau: f64,
}

impl MetricReport {
    /// Computes every metric the samples support. Top-1 uses the
    /// in-distribution samples only.
    pub fn from_samples(samples: &[ScoredSample], tau: f64) -> Result<Self> {
        let n_id = samples.iter().filter(|s| s.is_id).count();
        let n_ood = samples.len() - n_id;
        let (pred, truth): (Vec<usize>, Vec<usize>) = samples
            .iter()
            .filter(|s| s.is_id)
            .map(|s| (s.predicted, s.truth))
            .unzip();
        let top1 = if n_id > 0 { Some(top1(&pred, &truth)?) } else { None };
        let mut report = Self {
            error: None,
            fpr95: None,
            auroc: None,
            top1,
            overlap: None,
            n_id,
            n_ood,
            tau,
        };
        if n_id > 0 && n_ood > 0 {
            let id: Vec<f64> = samples.iter().filter(|s| s.is_id).map(|s| s.score).collect();
            let ood: Vec<f64> = samples.iter().filter(|s| !s.is_id).map(|s| s.score).collect();
            report.error = Some(detection_error(samples, DEFAULT_TPR)?);
            report.fpr95 = Some(fpr_at_tpr(samples, DEFAULT_TPR)?);
            report.auroc = Some(auroc(samples)?);
            report.overlap = Some(overlap(&id, &ood, DEFAULT_BINS)?);
        }
        Ok(report)
    }
}

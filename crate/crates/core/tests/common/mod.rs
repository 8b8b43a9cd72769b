//! Oracles shared by the integration suites. Each is written from the
//! definitions directly, without calling the library routine it checks.
#![allow(dead_code)]

pub mod grad;

use skeleton_ood::metrics::ScoredSample;

/// Nearest-rank threshold found by counting instead of sorting: the value
/// whose rank interval `[#below, #at_or_below)` contains `floor(p/100 * D)`.
pub fn rank_threshold(f: &[f64], p: f64) -> f64 {
    let k = ((p * f.len() as f64) / 100.0).floor() as usize;
    let k = k.min(f.len() - 1);
    for &x in f {
        let below = f.iter().filter(|&&y| y < x).count();
        let at_or_below = f.iter().filter(|&&y| y <= x).count();
        if below <= k && k < at_or_below {
            return x;
        }
    }
    unreachable!("some value owns every rank")
}

/// Line-by-line pruning, binarizing and scaling.
pub fn literal_p(f: &[f64], p: f64) -> Vec<f64> {
    let t = rank_threshold(f, p);
    let mut fp = f.to_vec();
    for i in 0..fp.len() {
        if f[i] < t {
            fp[i] = 0.0;
        }
    }
    fp
}

pub fn literal_b(f: &[f64], p: f64) -> Vec<f64> {
    let t = rank_threshold(f, p);
    let mut s = 0.0;
    for &x in f {
        s += x;
    }
    let mut fp = f.to_vec();
    for i in 0..fp.len() {
        if f[i] < t {
            fp[i] = 0.0;
        }
    }
    let mut n = 0usize;
    for &x in &fp {
        if x != 0.0 {
            n += 1;
        }
    }
    let mut fb = vec![0.0; fp.len()];
    if n > 0 {
        for i in 0..fp.len() {
            if fp[i] != 0.0 {
                fb[i] = s / n as f64;
            }
        }
    }
    fb
}

pub fn literal_s(f: &[f64], p: f64) -> Vec<f64> {
    let t = rank_threshold(f, p);
    let mut s1 = 0.0;
    for &x in f {
        s1 += x;
    }
    let mut fp = f.to_vec();
    for i in 0..fp.len() {
        if f[i] < t {
            fp[i] = 0.0;
        }
    }
    let mut s2 = 0.0;
    for &x in &fp {
        s2 += x;
    }
    let mut fs = vec![0.0; fp.len()];
    if s2 > 0.0 {
        for i in 0..fp.len() {
            if fp[i] != 0.0 {
                fs[i] = fp[i] * (s1 / s2).exp();
            }
        }
    }
    fs
}

pub fn samples(id: &[f64], ood: &[f64]) -> Vec<ScoredSample> {
    let mk = |score: f64, is_id: bool| ScoredSample { score, is_id, predicted: 0, truth: 0 };
    id.iter().map(|&s| mk(s, true)).chain(ood.iter().map(|&s| mk(s, false))).collect()
}

/// Pair counting: wins plus half ties over all (id, ood) pairs, as an exact
/// fraction `(2 * wins + ties) / (2 * pairs)`.
pub fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice: u64 = 0;
    for &a in id {
        for &b in ood {
            if a > b {
                twice += 2;
            } else if a == b {
                twice += 1;
            }
        }
    }
    twice as f64 / (2 * id.len() * ood.len()) as f64
}

/// Every distinct score as a candidate threshold (score >= t means "ID");
/// keeps the largest one whose TPR reaches `target`, returning its FPR.
pub fn sweep_fpr(id: &[f64], ood: &[f64], target_pct: u64) -> f64 {
    let mut best: Option<f64> = None;
    for &t in id.iter().chain(ood) {
        let tp = id.iter().filter(|&&s| s >= t).count() as u64;
        if 100 * tp >= target_pct * id.len() as u64 && best.map_or(true, |b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("the smallest score always reaches any target");
    ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64
}

/// Detection error at the nominal TPR.
pub fn sweep_error(id: &[f64], ood: &[f64], target_pct: u64) -> f64 {
    0.5 * (1.0 - target_pct as f64 / 100.0) + 0.5 * sweep_fpr(id, ood, target_pct)
}

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta};
use crate::error::{Error, Result};

/// Seen/unseen class assignment and the train:holdout ratio for seen data.
/// The holdout serves as both validation and seen-only test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub train_fraction: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// Picks `unseen` classes uniformly at random out of `0..classes`.
    pub fn random(classes: usize, unseen: usize, seed: u64) -> Result<Self> {
        if unseen >= classes {
            return Err(Error::Config(format!(
                "{unseen} unseen classes out of {classes} leaves no seen class"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids: Vec<usize> = (0..classes).collect();
        ids.shuffle(&mut rng);
        let mut unseen_ids = ids[..unseen].to_vec();
        let mut seen_ids = ids[unseen..].to_vec();
        unseen_ids.sort_unstable();
        seen_ids.sort_unstable();
        Ok(Self {
            seen: seen_ids,
            unseen: unseen_ids,
            train_fraction: 0.9,
            holdout_fraction: 0.1,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seen.is_empty() {
            return Err(Error::Config("split needs at least one seen class".into()));
        }
        let seen: BTreeSet<_> = self.seen.iter().collect();
        if seen.len() != self.seen.len() {
            return Err(Error::Config("duplicate seen class".into()));
        }
        if self.unseen.iter().any(|c| seen.contains(c)) {
            return Err(Error::Config("a class cannot be both seen and unseen".into()));
        }
        let sum = self.train_fraction + self.holdout_fraction;
        if (sum - 1.0).abs() > 1e-12 || self.train_fraction <= 0.0 || self.holdout_fraction <= 0.0 {
            return Err(Error::Config(format!(
                "train/holdout fractions must be positive and sum to 1, got {} + {}",
                self.train_fraction, self.holdout_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test_seen: Dataset,
    pub test_mix: Dataset,
}

impl Splits {
    pub fn named(&self) -> [(&'static str, &Dataset); 4] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test_seen", &self.test_seen),
            ("test_mix", &self.test_mix),
        ]
    }
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let present: BTreeSet<usize> = dataset.sequences.iter().map(|s| s.label).collect();
    for c in spec.seen.iter().chain(&spec.unseen) {
        if !present.contains(c) {
            return Err(Error::Config(format!("class {c} has no samples")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for &class in &spec.seen {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.sequences[i].label == class)
            .collect();
        members.shuffle(&mut rng);
        let n_train = (members.len() as f64 * spec.train_fraction).round() as usize;
        if n_train == 0 || n_train == members.len() {
            return Err(Error::Config(format!(
                "class {class} with {} samples leaves an empty split",
                members.len()
            )));
        }
        let (tr, ho) = members.split_at(n_train);
        train.extend_from_slice(tr);
        holdout.extend_from_slice(ho);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    let unseen_set: BTreeSet<usize> = spec.unseen.iter().copied().collect();
    let unseen: Vec<usize> = (0..dataset.len())
        .filter(|&i| unseen_set.contains(&dataset.sequences[i].label))
        .collect();

    let make = |indices: &[usize], name: &str| -> Dataset {
        let mut meta = DatasetMeta {
            seen_classes: Some(spec.seen.clone()),
            unseen_classes: Some(spec.unseen.clone()),
            split: Some(name.to_string()),
            ..dataset.meta.clone()
        };
        meta.sample_ids.clear();
        Dataset {
            sequences: indices.iter().map(|&i| dataset.sequences[i].clone()).collect(),
            meta,
        }
    };
    let mix: Vec<usize> = holdout.iter().chain(&unseen).copied().collect();
    Ok(Splits {
        train: make(&train, "train"),
        val: make(&holdout, "val"),
        test_seen: make(&holdout, "test_seen"),
        test_mix: make(&mix, "test_mix"),
    })
}

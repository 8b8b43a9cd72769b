//! Skeleton sequences, the binary dataset container, synthetic motion data,
//! the seen/unseen split protocol, and random joint masking.

pub(crate) mod format;
mod mask;
mod split;
mod synthetic;

pub use format::{load_dataset, read_dataset, save_dataset, write_dataset, FormatError};
pub use mask::mask_joints;
pub use split::{split, SplitSpec, Splits};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::JointHierarchy;
use crate::numerics::DenseArray;

/// One action clip: coordinates laid out `[C, T, V, M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub data: DenseArray,
    pub label: usize,
    pub id: String,
}

/// `(C, T, V, M)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceShape {
    pub channels: usize,
    pub frames: usize,
    pub joints: usize,
    pub subjects: usize,
}

impl SequenceShape {
    pub fn len(&self) -> usize {
        self.channels * self.frames * self.joints * self.subjects
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.channels, self.frames, self.joints, self.subjects]
    }
}

impl SkeletonSequence {
    pub fn new(data: DenseArray, label: usize, id: impl Into<String>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 {
            return Err(Error::Argument(format!("sequence must be rank 4, got {s:?}")));
        }
        if !(2..=3).contains(&s[0]) {
            return Err(Error::Argument(format!("sequence must have 2 or 3 coordinates, got {}", s[0])));
        }
        if s[1] == 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Argument(format!("empty sequence axis in {s:?}")));
        }
        if !data.all_finite() {
            return Err(Error::Argument("sequence contains non-finite coordinates".into()));
        }
        Ok(Self {
            data,
            label,
            id: id.into(),
        })
    }

    pub fn shape(&self) -> SequenceShape {
        let s = self.data.shape();
        SequenceShape {
            channels: s[0],
            frames: s[1],
            joints: s[2],
            subjects: s[3],
        }
    }

    /// Flat offset of `(c, t, v, m)`.
    pub fn offset(&self, c: usize, t: usize, v: usize, m: usize) -> usize {
        let s = self.shape();
        ((c * s.frames + t) * s.joints + v) * s.subjects + m
    }
}

/// Trailer metadata carried by a dataset file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub generator: Option<serde_json::Value>,
    /// Parent index per joint, `-1` for the root.
    #[serde(default)]
    pub hierarchy: Option<Vec<i64>>,
    #[serde(default)]
    pub seen_classes: Option<Vec<usize>>,
    #[serde(default)]
    pub unseen_classes: Option<Vec<usize>>,
    #[serde(default)]
    pub split: Option<String>,
    #[serde(default)]
    pub sample_ids: Vec<String>,
}

impl DatasetMeta {
    pub fn set_hierarchy(&mut self, h: &JointHierarchy) {
        self.hierarchy = Some(
            h.parents()
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
        );
    }

    pub fn joint_hierarchy(&self) -> Result<Option<JointHierarchy>> {
        let Some(parents) = &self.hierarchy else {
            return Ok(None);
        };
        let parents = parents
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        Ok(Some(JointHierarchy::from_parents(parents)?))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub sequences: Vec<SkeletonSequence>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Common shape of every sequence; errors if they disagree.
    pub fn shape(&self) -> Result<Option<SequenceShape>> {
        let mut iter = self.sequences.iter();
        let Some(first) = iter.next() else {
            return Ok(None);
        };
        let shape = first.shape();
        for s in iter {
            if s.shape() != shape {
                return Err(Error::Argument(format!(
                    "sequence {} has shape {:?}, expected {:?}",
                    s.id,
                    s.shape().dims(),
                    shape.dims()
                )));
            }
        }
        Ok(Some(shape))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.label).collect()
    }
}

/// Stacks sequences into the backbone layout `[B * M, T, V, C]`.
pub fn to_batch(sequences: &[&SkeletonSequence]) -> Result<(DenseArray, usize)> {
    let Some(first) = sequences.first() else {
        return Err(Error::Argument("empty batch".into()));
    };
    let shape = first.shape();
    let SequenceShape {
        channels: c,
        frames: t,
        joints: v,
        subjects: m,
    } = shape;
    let mut out = Vec::with_capacity(sequences.len() * shape.len());
    for seq in sequences {
        if seq.shape() != shape {
            return Err(Error::Argument(format!(
                "batch mixes shapes {:?} and {:?}",
                shape.dims(),
                seq.shape().dims()
            )));
        }
        let d = seq.data.data();
        for mi in 0..m {
            for ti in 0..t {
                for vi in 0..v {
                    for ci in 0..c {
                        out.push(d[((ci * t + ti) * v + vi) * m + mi]);
                    }
                }
            }
        }
    }
    Ok((DenseArray::new(vec![sequences.len() * m, t, v, c], out)?, m))
}

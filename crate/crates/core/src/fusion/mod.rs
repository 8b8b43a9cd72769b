//! Feature fusion head: activation-shaped features concatenated with the
//! originals, channel gating, a two-layer MLP, dropout, and the classifier
//! over `K` seen classes plus `k` reserved unseen slots.

pub mod ash;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Tape, Var};
use crate::params::{glorot_uniform, BoundParams, ParamSet};

pub use ash::{AshConfig, AshOutput, AshStrategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub feature_dim: usize,
    /// `None` disables the shaped branch; the head then sees `F` alone.
    pub ash: Option<AshConfig>,
    /// When false the gating and MLP are skipped and the classifier reads the
    /// (possibly concatenated) features directly.
    pub fusion: bool,
    pub mlp_hidden: usize,
    pub seen_classes: usize,
    pub extra_dims: usize,
    pub dropout: f64,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if self.seen_classes == 0 {
            return Err(Error::Config("at least one seen class is required".into()));
        }
        if self.extra_dims == 0 {
            return Err(Error::Config("at least one unseen slot is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if let Some(a) = &self.ash {
            a.validate()?;
        }
        Ok(())
    }

    /// Width of the concatenated vector entering the gate.
    pub fn fused_input_dim(&self) -> usize {
        if self.ash.is_some() {
            2 * self.feature_dim
        } else {
            self.feature_dim
        }
    }

    /// Width of the vector entering the classifier.
    pub fn classifier_input_dim(&self) -> usize {
        if self.fusion {
            self.mlp_hidden
        } else {
            self.fused_input_dim()
        }
    }

    pub fn logit_dim(&self) -> usize {
        self.seen_classes + self.extra_dims
    }
}

pub fn init_params<R: Rng>(config: &HeadConfig, params: &mut ParamSet, rng: &mut R) {
    let wide = config.fused_input_dim();
    if config.fusion {
        let h = config.mlp_hidden;
        params.insert("head.se_weight", glorot_uniform(rng, &[wide, wide], wide, wide));
        params.insert("head.se_bias", DenseArray::filled(&[wide], 1.0));
        params.insert("head.mlp1_weight", glorot_uniform(rng, &[wide, h], wide, h));
        params.insert("head.mlp1_bias", DenseArray::zeros(&[h]));
        params.insert("head.mlp2_weight", glorot_uniform(rng, &[h, h], h, h));
        params.insert("head.mlp2_bias", DenseArray::zeros(&[h]));
    }
    let cin = config.classifier_input_dim();
    let out = config.logit_dim();
    params.insert("head.cls_weight", glorot_uniform(rng, &[cin, out], cin, out));
    params.insert("head.cls_bias", DenseArray::zeros(&[out]));
}

/// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
pub fn dropout<'t, R: Rng>(tape: &'t Tape, x: Var<'t>, rate: f64, rng: &mut R) -> Result<Var<'t>> {
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let mask = (0..x.value().len())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Ok(tape.mask_mul(x, mask)?)
}

#[derive(Debug, Clone)]
pub struct FusionHead {
    config: HeadConfig,
}

impl FusionHead {
    pub fn new(config: HeadConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    /// Activation shaping of pooled features `[B, D]`; returns the shaped rows
    /// and the count of degenerate rows.
    pub fn shape_features<'t>(&self, tape: &'t Tape, features: Var<'t>) -> Result<Option<(Var<'t>, usize)>> {
        match &self.config.ash {
            None => Ok(None),
            Some(cfg) => ash::ash_rows(tape, features, cfg).map(Some),
        }
    }

    /// Concatenates `features` with `shaped` (when present), gates channels by
    /// `relu(x W + b)`, then runs the two-layer MLP. With fusion disabled the
    /// concatenation is returned as-is.
    pub fn fuse<'t>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        features: Var<'t>,
        shaped: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let fs = features.shape();
        if fs.len() != 2 || fs[1] != self.config.feature_dim {
            return Err(Error::Argument(format!(
                "head expects [B, {}] features, got {fs:?}",
                self.config.feature_dim
            )));
        }
        let cat = match shaped {
            Some(s) => {
                if s.shape() != fs {
                    return Err(Error::Argument(format!(
                        "shaped features {:?} differ from originals {fs:?}",
                        s.shape()
                    )));
                }
                tape.concat_cols(features, s)?
            }
            None => features,
        };
        if !self.config.fusion {
            return Ok(cat);
        }
        let gate = tape.matmul(cat, params.var("head.se_weight"))?;
        let gate = tape.add_bias(gate, params.var("head.se_bias"))?;
        let gate = tape.relu(gate);
        let gated = tape.mul(cat, gate)?;
        let h = tape.matmul(gated, params.var("head.mlp1_weight"))?;
        let h = tape.add_bias(h, params.var("head.mlp1_bias"))?;
        let h = tape.relu(h);
        let h = tape.matmul(h, params.var("head.mlp2_weight"))?;
        Ok(tape.add_bias(h, params.var("head.mlp2_bias"))?)
    }

    /// `logits = W' dropout(fused) + b'`, length `K + k`. Dropout runs only
    /// when `rng` is supplied (training).
    pub fn classify<'t, R: Rng>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        fused: Var<'t>,
        rng: Option<&mut R>,
    ) -> Result<Var<'t>> {
        let h = match rng {
            Some(rng) => dropout(tape, fused, self.config.dropout, rng)?,
            None => fused,
        };
        let logits = tape.matmul(h, params.var("head.cls_weight"))?;
        Ok(tape.add_bias(logits, params.var("head.cls_bias"))?)
    }
}

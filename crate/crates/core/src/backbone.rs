//! Spatial-temporal feature extractor: stacked blocks of three-subset graph
//! convolution followed by depthwise temporal convolution, pooled to one
//! feature vector per sample.
//!
//! Activations are laid out `[N, T, V, C]` (samples-by-subjects, frames,
//! joints, channels) so that channel mixing is a single matrix product over
//! the flattened `N*T*V` rows.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphTopology, Subset};
use crate::numerics::{DenseArray, Tape, Var};
use crate::params::{glorot_uniform, BoundParams, ParamSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub temporal_kernel: usize,
    pub temporal_stride: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("block channels must be positive".into()));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        if self.temporal_stride == 0 {
            return Err(Error::Config("temporal stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub blocks: Vec<BlockConfig>,
}

impl BackboneConfig {
    /// Four blocks, channels 16 -> 32 -> 32 -> 64, temporal kernel 5.
    pub fn desk(in_channels: usize) -> Self {
        let spec = [(16, 1), (32, 2), (32, 1), (64, 2)];
        let mut blocks = Vec::with_capacity(spec.len());
        let mut cin = in_channels;
        for (cout, stride) in spec {
            blocks.push(BlockConfig {
                in_channels: cin,
                out_channels: cout,
                temporal_kernel: 5,
                temporal_stride: stride,
            });
            cin = cout;
        }
        Self { blocks }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        for (i, pair) in self.blocks.windows(2).enumerate() {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::Config(format!(
                    "block {} outputs {} channels but block {} expects {}",
                    i,
                    pair[0].out_channels,
                    i + 1,
                    pair[1].in_channels
                )));
            }
        }
        self.blocks.iter().try_for_each(BlockConfig::validate)
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].in_channels
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }
}

fn theta_name(block: usize, subset: Subset) -> String {
    format!("backbone.{block}.theta_{}", subset.tag())
}

/// Registers freshly initialized backbone parameters.
pub fn init_params<R: Rng>(config: &BackboneConfig, params: &mut ParamSet, rng: &mut R) {
    for (i, b) in config.blocks.iter().enumerate() {
        for subset in Subset::ALL {
            params.insert(
                theta_name(i, subset),
                glorot_uniform(rng, &[b.in_channels, b.out_channels], b.in_channels, b.out_channels),
            );
        }
        params.insert(format!("backbone.{i}.gcn_bias"), DenseArray::zeros(&[b.out_channels]));
        params.insert(
            format!("backbone.{i}.tcn_weight"),
            glorot_uniform(
                rng,
                &[b.out_channels, b.temporal_kernel],
                b.temporal_kernel,
                b.temporal_kernel,
            ),
        );
        params.insert(format!("backbone.{i}.tcn_bias"), DenseArray::zeros(&[b.out_channels]));
    }
}

/// `sum_g A_g X Theta_g` over the three normalized subsets.
///
/// `x` is `[N, T, V, Cin]`; each `Theta_g` is `[Cin, Cout]`.
pub fn graph_conv<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    topology: &GraphTopology,
    thetas: [Var<'t>; 3],
) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 || s[2] != topology.joint_count() {
        return Err(Error::Argument(format!(
            "graph convolution input {s:?} does not match {} joints",
            topology.joint_count()
        )));
    }
    let (n, t, v, cin) = (s[0], s[1], s[2], s[3]);
    let flat = tape.reshape(x, &[n * t * v, cin])?;
    let mut acc: Option<Var<'t>> = None;
    for (subset, theta) in Subset::ALL.into_iter().zip(thetas) {
        let ts = theta.shape();
        if ts.len() != 2 || ts[0] != cin {
            return Err(Error::Argument(format!(
                "weight {ts:?} for subset {} does not accept {cin} channels",
                subset.tag()
            )));
        }
        let mixed = tape.matmul(flat, theta)?;
        let mixed = tape.reshape(mixed, &[n, t, v, ts[1]])?;
        let adj = Rc::new(topology.normalized(subset).clone());
        let y = tape.graph_mix(mixed, adj)?;
        acc = Some(match acc {
            None => y,
            Some(prev) => tape.add(prev, y)?,
        });
    }
    Ok(acc.expect("three subsets"))
}

/// Feature extractor bound to a fixed topology.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    topology: GraphTopology,
}

impl Backbone {
    pub fn new(config: BackboneConfig, topology: GraphTopology) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, topology })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn topology(&self) -> &GraphTopology {
        &self.topology
    }

    /// Runs the block stack on `x: [B*M, T, V, C]` (subjects of a sample are
    /// consecutive rows) and average-pools frames, joints, and subjects,
    /// giving `[B, D]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        x: Var<'t>,
        subjects: usize,
    ) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Argument(format!("backbone input must be rank 4, got {s:?}")));
        }
        if s[2] != self.topology.joint_count() {
            return Err(Error::Argument(format!(
                "input has {} joints, topology expects {}",
                s[2],
                self.topology.joint_count()
            )));
        }
        if s[3] != self.config.in_channels() {
            return Err(Error::Argument(format!(
                "input has {} channels, backbone expects {}",
                s[3],
                self.config.in_channels()
            )));
        }
        if subjects == 0 || s[0] % subjects != 0 {
            return Err(Error::Argument(format!(
                "{} rows cannot be grouped into samples of {subjects} subjects",
                s[0]
            )));
        }
        let mut h = x;
        for (i, b) in self.config.blocks.iter().enumerate() {
            let thetas = Subset::ALL.map(|g| params.var(&theta_name(i, g)));
            h = graph_conv(tape, h, &self.topology, thetas)?;
            h = tape.add_bias(h, params.var(&format!("backbone.{i}.gcn_bias")))?;
            h = tape.relu(h);
            h = tape.temporal_conv(h, params.var(&format!("backbone.{i}.tcn_weight")), b.temporal_stride)?;
            h = tape.add_bias(h, params.var(&format!("backbone.{i}.tcn_bias")))?;
            h = tape.relu(h);
        }
        let hs = h.shape();
        let batch = hs[0] / subjects;
        let grouped = tape.reshape(h, &[batch, subjects * hs[1] * hs[2], hs[3]])?;
        Ok(tape.mean_axis1(grouped)?)
    }
}

//! DeskNet: a small plain CNN backbone with a projection head.
//!
//! Each block is a 3x3 stride-2 convolution, batch norm and ReLU, so a
//! 64x64 input yields 32, 16, 8 and 4 pixel feature maps. Global average
//! pooling of the last block gives the backbone feature vector; the
//! projection head (dense, ReLU, dense, L2 normalization) is only used by
//! contrastive pretraining.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BatchNormIds, Graph, ParamId, ParamSet, Scalar, Tensor, ValueId};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub projection_hidden: usize,
    pub projection_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: vec![16, 32, 64, 128],
            projection_hidden: 64,
            projection_dim: 32,
        }
    }
}

impl EncoderConfig {
    /// Total downsampling factor of the backbone.
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn validate(&self, resolution: usize) -> Result<()> {
        if self.widths.is_empty() || self.in_channels == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if resolution == 0 || !resolution.is_multiple_of(self.stride()) {
            return Err(Error::Config(format!(
                "input resolution {resolution} must be divisible by {}",
                self.stride()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: ParamId,
    bn: BatchNormIds,
}

#[derive(Clone, Debug)]
struct Projection {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles of an encoder living in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    blocks: Vec<ConvBlock>,
    projection: Option<Projection>,
}

pub(crate) fn he_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("matching length")
}

pub(crate) fn add_batch_norm<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    channels: usize,
) -> Result<BatchNormIds> {
    Ok(BatchNormIds {
        gamma: params.add(&format!("{prefix}.gamma"), Tensor::ones(&[channels]), true)?,
        beta: params.add(&format!("{prefix}.beta"), Tensor::zeros(&[channels]), true)?,
        running_mean: params.add(&format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), false)?,
        running_var: params.add(&format!("{prefix}.running_var"), Tensor::ones(&[channels]), false)?,
    })
}

pub(crate) fn lookup(params_has: impl Fn(&str) -> Option<ParamId>, name: &str) -> Result<ParamId> {
    params_has(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
}

impl Encoder {
    /// Registers freshly initialized encoder parameters in `params`.
    pub fn init<T: Scalar, R: Rng>(cfg: &EncoderConfig, params: &mut ParamSet<T>, rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.widths.len());
        let mut cin = cfg.in_channels;
        for (i, &cout) in cfg.widths.iter().enumerate() {
            let weight = params.add(
                &format!("enc.block{i}.conv.weight"),
                he_normal(&[3, 3, cin, cout], 9 * cin, rng),
                true,
            )?;
            let bn = add_batch_norm(params, &format!("enc.block{i}.bn"), cout)?;
            blocks.push(ConvBlock { weight, bn });
            cin = cout;
        }
        let (f, h, p) = (cfg.feature_dim(), cfg.projection_hidden, cfg.projection_dim);
        let projection = Some(Projection {
            w1: params.add("proj.fc1.weight", he_normal(&[f, h], f, rng), true)?,
            b1: params.add("proj.fc1.bias", Tensor::zeros(&[h]), true)?,
            w2: params.add("proj.fc2.weight", he_normal(&[h, p], h, rng), true)?,
            b2: params.add("proj.fc2.bias", Tensor::zeros(&[p]), true)?,
        });
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            projection,
        })
    }

    /// Resolves encoder parameter handles by name (e.g. after loading a checkpoint).
    pub fn bind<T: Scalar>(cfg: &EncoderConfig, params: &ParamSet<T>) -> Result<Self> {
        let mut enc = Self::bind_backbone(cfg, params)?;
        let id = |name: &str| lookup(|n| params.id(n), name);
        enc.projection = Some(Projection {
            w1: id("proj.fc1.weight")?,
            b1: id("proj.fc1.bias")?,
            w2: id("proj.fc2.weight")?,
            b2: id("proj.fc2.bias")?,
        });
        Ok(enc)
    }

    /// Like [`Encoder::bind`] without the projection head.
    pub fn bind_backbone<T: Scalar>(cfg: &EncoderConfig, params: &ParamSet<T>) -> Result<Self> {
        let id = |name: &str| lookup(|n| params.id(n), name);
        let mut blocks = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &cout) in cfg.widths.iter().enumerate() {
            let weight = id(&format!("enc.block{i}.conv.weight"))?;
            if params.get(weight).value.shape() != [3, 3, cin, cout] {
                return Err(Error::Checkpoint(format!(
                    "block {i} kernel shape {:?} does not match config",
                    params.get(weight).value.shape()
                )));
            }
            let p = format!("enc.block{i}.bn");
            blocks.push(ConvBlock {
                weight,
                bn: BatchNormIds {
                    gamma: id(&format!("{p}.gamma"))?,
                    beta: id(&format!("{p}.beta"))?,
                    running_mean: id(&format!("{p}.running_mean"))?,
                    running_var: id(&format!("{p}.running_var"))?,
                },
            });
            cin = cout;
        }
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            projection: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Runs the first `n_blocks` blocks and returns each block's output.
    pub fn forward_blocks<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        x: ValueId,
        n_blocks: usize,
    ) -> Result<Vec<ValueId>> {
        let c = g.value(x).last_dim();
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let mut outs = Vec::with_capacity(n_blocks);
        let mut h = x;
        for block in self.blocks.iter().take(n_blocks) {
            let w = g.param(params, block.weight);
            h = g.conv2d(h, w, None, 2, 1)?;
            h = g.batch_norm(params, h, &block.bn)?;
            h = g.relu(h);
            outs.push(h);
        }
        Ok(outs)
    }

    /// Backbone features: global average pool of the last block, `[n, feature_dim]`.
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: ValueId) -> Result<ValueId> {
        let blocks = self.forward_blocks(g, params, x, self.blocks.len())?;
        g.global_avg_pool(*blocks.last().expect("at least one block"))
    }

    /// Projection head; rows of the result are unit vectors.
    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, features: ValueId) -> Result<ValueId> {
        let p = self
            .projection
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("encoder was bound without a projection head".into()))?;
        let (w1, b1) = (g.param(params, p.w1), g.param(params, p.b1));
        let h = g.dense(features, w1, b1)?;
        let h = g.relu(h);
        let (w2, b2) = (g.param(params, p.w2), g.param(params, p.b2));
        let z = g.dense(h, w2, b2)?;
        Ok(g.l2_normalize(z))
    }

    /// Names of all backbone (non-projection) parameters.
    pub fn backbone_names<T: Scalar>(params: &ParamSet<T>) -> Vec<String> {
        params
            .iter()
            .filter(|(_, p)| p.name.starts_with("enc."))
            .map(|(_, p)| p.name.clone())
            .collect()
    }
}

//! Self-supervised pretraining loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{nt_xent, EmbeddingSet};
use crate::nn::{Checkpoint, Encoder, EncoderConfig, Graph, Mode, ParamSet, Provenance, Sgd, SgdConfig, Tensor};
use crate::pairing::{build_batch, images_to_tensor, AugParams, MapperBank, MsvclMode, PairingContext, Scheme};
use crate::seed;
use crate::synthgen::{Image, RenderedSubject, StyleId};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub scheme: Scheme,
    pub temperature: f64,
    /// Source subjects per batch; the batch holds twice as many samples.
    pub batch_n_sources: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub seed: u64,
    pub aug: AugParams,
    pub msvcl_mode: MsvclMode,
    pub encoder: EncoderConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Msvcl,
            temperature: 0.2,
            batch_n_sources: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 1000,
            seed: 0,
            aug: AugParams::default(),
            msvcl_mode: MsvclMode::CrossView,
            encoder: EncoderConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.batch_n_sources < 2 {
            return Err(Error::Config(format!(
                "batch_n_sources must be at least 2, got {}",
                self.batch_n_sources
            )));
        }
        self.aug.validate()?;
        self.sgd().validate()
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Pretraining inputs drawn from the dataset.
pub struct PretrainData<'a> {
    pub subjects: &'a [RenderedSubject],
    pub mappers: &'a MapperBank,
    pub seen_styles: &'a [StyleId],
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss_curve: Vec<f64>,
}

/// Seed of the encoder initialization. Shared by every scheme trained with
/// the same seed, including the untrained baseline.
pub fn init_seed(seed: u64) -> u64 {
    seed::derive(seed, &[seed::tag("encoder-init")])
}

/// Freshly initialized encoder parameters.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<(Encoder, ParamSet<f32>)> {
    let mut params = ParamSet::new();
    let enc = Encoder::init(cfg, &mut params, &mut seed::rng(init_seed(seed)))?;
    Ok((enc, params))
}

/// Untrained checkpoint (zero steps).
pub fn random_checkpoint(cfg: &EncoderConfig, seed: u64, config_hash: &str) -> Result<Checkpoint> {
    let (_, params) = init_encoder(cfg, seed)?;
    Ok(Checkpoint::new(
        Provenance {
            kind: "encoder".into(),
            scheme: "random".into(),
            seed,
            steps: 0,
            config_hash: config_hash.into(),
            encoder: cfg.clone(),
            extra: Default::default(),
        },
        &params,
    ))
}

pub fn pretrain(cfg: &PretrainConfig, data: &PretrainData<'_>, config_hash: &str) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let n = cfg.batch_n_sources;
    if data.subjects.len() < n {
        return Err(Error::Config(format!(
            "batch needs {n} subjects but the pretraining pool has {}",
            data.subjects.len()
        )));
    }
    let resolution = data.subjects[0].cc.height();
    cfg.encoder.validate(resolution)?;

    let (encoder, mut params) = init_encoder(&cfg.encoder, cfg.seed)?;
    let mut sgd = Sgd::new(cfg.sgd(), &params)?;
    let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::tag("pretrain"), seed::tag(cfg.scheme.as_str())]));
    let ctx = PairingContext {
        seen_styles: data.seen_styles,
        mappers: data.mappers,
        aug: &cfg.aug,
        msvcl_mode: cfg.msvcl_mode,
    };

    // Subjects are drawn without replacement within a pass over the pool.
    let mut order: Vec<usize> = (0..data.subjects.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + n > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let sources: Vec<&RenderedSubject> = order[cursor..cursor + n].iter().map(|&i| &data.subjects[i]).collect();
        cursor += n;

        let batch = build_batch(cfg.scheme, &sources, &ctx, &mut rng)?;
        let x: Tensor<f32> = batch.to_tensor()?;
        let mut g = Graph::new(Mode::Train);
        let x = g.input(x, false);
        let feats = encoder.features(&mut g, &params, x)?;
        let z = encoder.project(&mut g, &params, feats)?;
        let zv = g.value(z);
        let dim = zv.last_dim();
        let emb = EmbeddingSet::unchecked(zv.to_f64_vec(), dim, batch.positive_map.clone())?;
        let out = match nt_xent(&emb, cfg.temperature) {
            Ok(o) => o,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !out.loss.is_finite() {
            return Err(Error::Diverged { step, loss: out.loss });
        }
        let grad = Tensor::from_f64_slice(zv.shape(), &out.grad)?;
        let loss = g.fused_loss(&[z], out.loss as f32, vec![grad])?;
        params.zero_grad();
        g.backward(loss, &mut params).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { step, loss: out.loss },
            e => e,
        })?;
        g.commit_buffers(&mut params);
        sgd.step(&mut params);
        if params.iter().any(|(_, p)| !p.value.is_finite()) {
            return Err(Error::Diverged { step, loss: out.loss });
        }
        curve.push(out.loss);
        log::debug!("pretrain {} step {step}: loss {:.5}", cfg.scheme, out.loss);
    }

    let provenance = Provenance {
        kind: "encoder".into(),
        scheme: cfg.scheme.to_string(),
        seed: cfg.seed,
        steps: cfg.steps as u64,
        config_hash: config_hash.into(),
        encoder: cfg.encoder.clone(),
        extra: Default::default(),
    };
    Ok(PretrainOutcome {
        checkpoint: Checkpoint::new(provenance, &params),
        loss_curve: curve,
    })
}

pub fn write_loss_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Row-major `[rows, cols]` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

const EMBED_CHUNK: usize = 64;

/// Eval-mode backbone features (before the projection head).
pub fn embed_corpus(checkpoint: &Checkpoint, images: &[Image]) -> Result<Features> {
    let cfg = &checkpoint.provenance.encoder;
    let params: ParamSet<f32> = checkpoint.params.clone();
    let encoder = Encoder::bind_backbone(cfg, &params)?;
    let cols = cfg.feature_dim();
    let mut data = Vec::with_capacity(images.len() * cols);
    for chunk in images.chunks(EMBED_CHUNK) {
        for img in chunk {
            if img.height() != img.width() {
                return Err(Error::Shape("embed_corpus expects square images".into()));
            }
            cfg.validate(img.height())?;
        }
        let x: Tensor<f32> = images_to_tensor(chunk)?;
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(x, false);
        let f = encoder.features(&mut g, &params, x)?;
        let v = g.value(f);
        v.ensure_finite("embed_corpus")?;
        data.extend(v.to_f64_vec());
    }
    Ok(Features {
        rows: images.len(),
        cols,
        data,
    })
}

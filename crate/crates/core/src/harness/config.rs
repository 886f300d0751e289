//! Experiment configuration (TOML) and stage hashes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::PretrainConfig;
use crate::detect::DetectConfig;
use crate::metrics::ProbeConfig;
use crate::nn::EncoderConfig;
use crate::pairing::{AugParams, MsvclMode, Scheme};
use crate::synthgen::DatasetManifest;
use crate::{Error, Result};

/// A row of the results table: an untrained encoder or a pretraining scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Random,
    Pretrained(Scheme),
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Random,
        Method::Pretrained(Scheme::SimClr),
        Method::Pretrained(Scheme::Mscl),
        Method::Pretrained(Scheme::Mvcl),
        Method::Pretrained(Scheme::Msvcl),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Pretrained(s) => s.as_str(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("random") {
            Ok(Method::Random)
        } else {
            s.parse().map(Method::Pretrained).map_err(|_| {
                Error::Config(format!("unknown method {s:?} (expected random, simclr, mscl, mvcl or msvcl)"))
            })
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Pretraining hyperparameters shared by every scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub temperature: f64,
    pub batch_n_sources: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub aug: AugParams,
    pub msvcl_mode: MsvclMode,
    pub encoder: EncoderConfig,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            temperature: p.temperature,
            batch_n_sources: p.batch_n_sources,
            lr: p.lr,
            momentum: p.momentum,
            weight_decay: p.weight_decay,
            steps: p.steps,
            aug: p.aug,
            msvcl_mode: p.msvcl_mode,
            encoder: p.encoder,
        }
    }
}

impl PretrainSettings {
    pub fn for_run(&self, scheme: Scheme, seed: u64) -> PretrainConfig {
        PretrainConfig {
            scheme,
            temperature: self.temperature,
            batch_n_sources: self.batch_n_sources,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            steps: self.steps,
            seed,
            aug: self.aug.clone(),
            msvcl_mode: self.msvcl_mode,
            encoder: self.encoder.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// IoU threshold of the mAP matching.
    pub iou_thresh: f64,
    pub probe: ProbeConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Relative paths are resolved against the config file's directory.
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub dataset: DatasetManifest,
    pub pretrain: PretrainSettings,
    pub detect: DetectConfig,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/desk"),
            seeds: vec![0, 1, 2],
            methods: Method::ALL.to_vec(),
            dataset: DatasetManifest::default(),
            pretrain: PretrainSettings::default(),
            detect: DetectConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config; a relative `output_dir` is resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::Io(e),
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        if cfg.output_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.seeds.iter().all(|s| seen.insert(*s)) {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        self.dataset.validate()?;
        for m in &self.methods {
            if let Method::Pretrained(s) = m {
                self.pretrain.for_run(*s, 0).validate()?;
            }
        }
        self.pretrain.encoder.validate(self.dataset.resolution)?;
        self.detect.validate()?;
        if !(self.eval.iou_thresh > 0.0 && self.eval.iou_thresh <= 1.0) {
            return Err(Error::Config(format!("eval.iou_thresh {} outside (0, 1]", self.eval.iou_thresh)));
        }
        Ok(())
    }

    pub fn dataset_hash(&self) -> String {
        hash_json(&("dataset", &self.dataset))
    }

    pub fn pretrain_hash(&self, method: Method, seed: u64) -> String {
        match method {
            Method::Random => hash_json(&("pretrain", self.dataset_hash(), "random", seed, &self.pretrain.encoder)),
            Method::Pretrained(s) => hash_json(&("pretrain", self.dataset_hash(), self.pretrain.for_run(s, seed))),
        }
    }

    pub fn finetune_hash(&self, method: Method, seed: u64) -> String {
        hash_json(&("finetune", self.pretrain_hash(method, seed), &self.detect))
    }

    pub fn eval_hash(&self, method: Method, seed: u64) -> String {
        hash_json(&("eval", self.finetune_hash(method, seed), self.eval.iou_thresh))
    }

    pub fn probe_hash(&self, method: Method, seed: u64) -> String {
        hash_json(&("probe", self.pretrain_hash(method, seed), &self.eval.probe))
    }

    /// Hash of the whole experiment.
    pub fn config_hash(&self) -> String {
        hash_json(self)
    }
}

/// SHA-256 of the canonical JSON encoding of `value`.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize");
    hex::encode(Sha256::digest(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let err = ExperimentConfig::from_toml_str("seeds = [1]\nbogus_key = 3\n").unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let err = ExperimentConfig::from_toml_str("[detect]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn literal_weight_decay_is_rejected() {
        let err = ExperimentConfig::from_toml_str("[detect]\nweight_decay = 10000.0\n").unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn stage_hashes_follow_their_inputs() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.detect.epochs += 1;
        let m = Method::Pretrained(Scheme::Msvcl);
        assert_eq!(a.pretrain_hash(m, 0), b.pretrain_hash(m, 0));
        assert_ne!(a.finetune_hash(m, 0), b.finetune_hash(m, 0));
        assert_ne!(a.pretrain_hash(m, 0), a.pretrain_hash(m, 1));
        assert_ne!(a.pretrain_hash(Method::Random, 0), a.pretrain_hash(m, 0));
    }

    #[test]
    fn methods_parse() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("imagenet".parse::<Method>().is_err());
    }
}

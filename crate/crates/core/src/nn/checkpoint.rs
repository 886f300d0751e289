//! Binary parameter container shared by pretrained encoders and detectors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MSVCLCKP"            magic
//! u32                    format version (1)
//! u32                    header length in bytes
//! [u8; header length]    UTF-8 JSON header: provenance + parameter table
//! f32 * numel            parameter data, in header table order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderConfig, ParamSet, Scalar, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MSVCLCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// "encoder" or "detector".
    pub kind: String,
    pub scheme: String,
    pub seed: u64,
    pub steps: u64,
    pub config_hash: String,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    provenance: Provenance,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub provenance: Provenance,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(provenance: Provenance, params: &ParamSet<T>) -> Self {
        Self {
            provenance,
            params: params.cast(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            provenance: self.provenance.clone(),
            params: self
                .params
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let numel: usize = self.params.iter().map(|(_, p)| p.value.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * numel);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let header: Header = serde_json::from_slice(
            bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?,
        )?;
        let mut offset = 16 + hlen;
        let mut params = ParamSet::new();
        for entry in &header.params {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", entry.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.add(&entry.name, Tensor::from_vec(&entry.shape, data)?, entry.trainable)?;
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after parameter data"));
        }
        Ok(Self {
            provenance: header.provenance,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn params_as<T: Scalar>(&self) -> ParamSet<T> {
        self.params.cast()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Encoder;

    fn sample() -> Checkpoint {
        let cfg = EncoderConfig::default();
        let mut ps = ParamSet::<f32>::new();
        Encoder::init(&cfg, &mut ps, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        Checkpoint::new(
            Provenance {
                kind: "encoder".into(),
                scheme: "msvcl".into(),
                seed: 3,
                steps: 10,
                config_hash: "abc".into(),
                encoder: cfg,
                extra: BTreeMap::new(),
            },
            &ps,
        )
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = sample();
        let a = ck.to_bytes().unwrap();
        let b = Checkpoint::from_bytes(&a).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"P5\n64 64\n255\n....").is_err());
    }
}

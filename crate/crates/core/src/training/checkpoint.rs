//! Binary checkpoint: magic, version, a JSON header describing every tensor,
//! raw little-endian f64 payload, and a trailing SHA-256 of all prior bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::{AdamState, Moments};
use super::trainer::StreamCursor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind, NmtModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MTNMTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Digest identifying a model layout; checkpoints only load into a matching one.
pub fn config_fingerprint(config: &ModelConfig, kind: ModelKind) -> String {
    let text = serde_json::to_string(&(config, kind)).expect("config serializes");
    crate::fingerprint(&text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub kind: ModelKind,
    pub fingerprint: String,
    pub step: u64,
    pub seed: u64,
    pub cursors: Vec<StreamCursor>,
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    adam_step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    kind: ModelKind,
    fingerprint: String,
    step: u64,
    seed: u64,
    cursors: Vec<StreamCursor>,
    tensors: Vec<TensorEntry>,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

impl Checkpoint {
    /// Rebuilds the model with the stored parameters.
    pub fn model(&self) -> Result<NmtModel> {
        let mut model = NmtModel::new(self.config.clone(), self.kind)?;
        model.params_mut().load_from(self.params.clone())?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.adam.moments.len() != self.params.len() {
            return Err(corrupt("optimizer state does not cover every parameter"));
        }
        let header = Header {
            config: self.config.clone(),
            kind: self.kind,
            fingerprint: self.fingerprint.clone(),
            step: self.step,
            seed: self.seed,
            cursors: self.cursors.clone(),
            tensors: self
                .params
                .iter()
                .zip(&self.adam.moments)
                .map(|((name, t), m)| TensorEntry { name: name.clone(), shape: t.shape().to_vec(), adam_step: m.step })
                .collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for ((_, t), m) in self.params.iter().zip(&self.adam.moments) {
            if m.m.len() != t.numel() || m.v.len() != t.numel() {
                return Err(corrupt("optimizer moment size differs from its parameter"));
            }
            put(t.data());
            put(&m.m);
            put(&m.v);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch; file is truncated or corrupt"));
        }
        let mut pos = MAGIC.len();
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(pos..pos + n).ok_or_else(|| corrupt("unexpected end of file"))?;
            pos += n;
            Ok(s)
        };
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(header_len)?).map_err(|e| corrupt(e.to_string()))?;

        let mut floats = |n: usize| -> Result<Vec<f64>> {
            let raw = take(n.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
        };
        let mut params = Vec::with_capacity(header.tensors.len());
        let mut moments = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let t = Tensor::new(entry.shape, floats(n)?).map_err(|e| corrupt(e.to_string()))?;
            moments.push(Moments { step: entry.adam_step, m: floats(n)?, v: floats(n)? });
            params.push((entry.name, t));
        }
        if pos != body.len() {
            return Err(corrupt("trailing bytes after payload"));
        }
        Ok(Self {
            config: header.config,
            kind: header.kind,
            fingerprint: header.fingerprint,
            step: header.step,
            seed: header.seed,
            cursors: header.cursors,
            params,
            adam: AdamState { moments },
        })
    }
}

/// Writes atomically through a temporary sibling file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint without checking it against any configuration.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Reads a checkpoint and verifies it was written for `config` and `kind`.
pub fn load_checkpoint(path: &Path, config: &ModelConfig, kind: ModelKind) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(path)?;
    let expected = config_fingerprint(config, kind);
    let stored = config_fingerprint(&ckpt.config, ckpt.kind);
    if ckpt.fingerprint != stored {
        return Err(corrupt("stored fingerprint does not match stored configuration"));
    }
    if stored != expected {
        return Err(Error::FingerprintMismatch { expected, found: stored });
    }
    Ok(ckpt)
}

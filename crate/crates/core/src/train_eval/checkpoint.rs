//! Versioned binary checkpoint container.
//!
//! Layout: magic, `u32` version, `u64` header length, JSON header, raw
//! little-endian `f64` payload, then a SHA-256 of everything before it.
//! The payload holds parameter values, buffers, and Adam's first and
//! second moments, in header order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{AttnGrounder, ModelConfig};
use crate::nn::optim::Adam;
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::text_encoder::Vocabulary;

const MAGIC: &[u8; 8] = b"ATTNGRD\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vocabulary,
    step: usize,
    best_ap50: Option<f64>,
    adam_t: u64,
    params: Vec<TensorEntry>,
    buffers: Vec<TensorEntry>,
}

/// Everything needed to rebuild a model and continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    pub step: usize,
    pub best_ap50: Option<f64>,
    pub params: Vec<(TensorEntry, Vec<f64>)>,
    pub buffers: Vec<(TensorEntry, Vec<f64>)>,
    pub adam_t: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

fn entry(name: &str, t: &Tensor) -> (TensorEntry, Vec<f64>) {
    (
        TensorEntry {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
        },
        t.data().to_vec(),
    )
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn capture(
        model: &ModelConfig,
        train: &TrainConfig,
        vocab: &Vocabulary,
        store: &ParamStore,
        adam: &Adam,
        step: usize,
        best_ap50: Option<f64>,
    ) -> Self {
        Self {
            model: model.clone(),
            train: train.clone(),
            vocab: vocab.clone(),
            step,
            best_ap50,
            params: store.params().iter().map(|p| entry(&p.name, &p.value)).collect(),
            buffers: store.buffers().iter().map(|b| entry(&b.name, &b.value)).collect(),
            adam_t: adam.t,
            adam_m: adam.m.iter().map(|t| t.data().to_vec()).collect(),
            adam_v: adam.v.iter().map(|t| t.data().to_vec()).collect(),
        }
    }

    /// Copies stored values into `store`, which must have been built from a
    /// compatible config.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if store.params().len() != self.params.len() || store.buffers().len() != self.buffers.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameters and {} buffers, model has {} and {}",
                self.params.len(),
                self.buffers.len(),
                store.params().len(),
                store.buffers().len()
            )));
        }
        for (p, (e, data)) in store.params().iter().zip(&self.params) {
            if p.name != e.name || p.value.shape() != e.shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "parameter {} {:?} vs checkpoint {} {:?}",
                    p.name,
                    p.value.shape(),
                    e.name,
                    e.shape
                )));
            }
            debug_assert_eq!(data.len(), p.value.numel());
        }
        for (b, (e, _)) in store.buffers().iter().zip(&self.buffers) {
            if b.name != e.name || b.value.shape() != e.shape.as_slice() {
                return Err(Error::Incompatible(format!("buffer {} vs checkpoint {}", b.name, e.name)));
            }
        }
        for (p, (_, data)) in store.params_mut().iter_mut().zip(&self.params) {
            p.value.data_mut().copy_from_slice(data);
        }
        for (b, (_, data)) in store.buffers_mut().iter_mut().zip(&self.buffers) {
            b.value.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    /// Rebuilds the model described by the checkpoint.
    pub fn restore(&self) -> Result<(AttnGrounder, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table = Tensor::zeros(&[self.model.vocab_size, self.model.embed_dim]);
        let model = AttnGrounder::new(self.model.clone(), table, &mut store, &mut rng)?;
        self.apply_to(&mut store)?;
        Ok((model, store))
    }

    pub fn restore_adam(&self, store: &ParamStore) -> Result<Adam> {
        let mut adam = Adam::new(store);
        if self.adam_m.len() != adam.m.len() || self.adam_v.len() != adam.v.len() {
            return Err(Error::Incompatible("optimizer state does not match parameters".into()));
        }
        adam.t = self.adam_t;
        for (dst, src) in adam.m.iter_mut().zip(&self.adam_m).chain(adam.v.iter_mut().zip(&self.adam_v)) {
            if dst.numel() != src.len() {
                return Err(Error::Incompatible("optimizer moment shape mismatch".into()));
            }
            dst.data_mut().copy_from_slice(src);
        }
        Ok(adam)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            best_ap50: self.best_ap50,
            adam_t: self.adam_t,
            params: self.params.iter().map(|(e, _)| e.clone()).collect(),
            buffers: self.buffers.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let blocks = self
            .params
            .iter()
            .map(|(_, d)| d)
            .chain(self.buffers.iter().map(|(_, d)| d))
            .chain(&self.adam_m)
            .chain(&self.adam_v);
        for block in blocks {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_owned());
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let json = body.get(20..20 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let mut header: Header = serde_json::from_slice(json).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        header.vocab.reindex();
        let mut payload = body[20 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        if !(body.len() - 20 - hlen).is_multiple_of(8) {
            return Err(corrupt("ragged payload"));
        }
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = payload.by_ref().take(n).collect();
            if v.len() == n {
                Ok(v)
            } else {
                Err(Error::CorruptCheckpoint("truncated payload".into()))
            }
        };
        let numel = |e: &TensorEntry| e.shape.iter().product::<usize>();
        let params = header.params.iter().map(|e| Ok((e.clone(), take(numel(e))?))).collect::<Result<Vec<_>>>()?;
        let buffers = header.buffers.iter().map(|e| Ok((e.clone(), take(numel(e))?))).collect::<Result<Vec<_>>>()?;
        let adam_m = header.params.iter().map(|e| take(numel(e))).collect::<Result<Vec<_>>>()?;
        let adam_v = header.params.iter().map(|e| take(numel(e))).collect::<Result<Vec<_>>>()?;
        if payload.next().is_some() {
            return Err(corrupt("trailing payload"));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            vocab: header.vocab,
            step: header.step,
            best_ap50: header.best_ap50,
            params,
            buffers,
            adam_t: header.adam_t,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

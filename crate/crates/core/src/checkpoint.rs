//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      6 bytes   "SSTGNN"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 TOML (CheckpointMeta)
//! n_tensors  u32, then per tensor:
//!     name_len u32, name bytes
//!     rank     u32, then rank × u64 dims
//!     values   product(dims) × f64
//! ```
//!
//! Tensor names are namespaced: `param/<name>` for the model weights,
//! `best/<name>` for the selected weights of a resumable run,
//! `adam.m/<name>` and `adam.v/<name>` for optimizer moments,
//! `norm/mean`, `norm/std`, and `history` (`epochs × 4`, NaN for a missing
//! validation value).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SstGnn};
use crate::numcore::{ParamStore, Tensor};
use crate::train::{AdamState, EpochRecord, LossHistory, Selected, TrainConfig, Trainer};

pub const MAGIC: &[u8; 6] = b"SSTGNN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Epochs completed when written.
    pub epoch: usize,
    pub adam_step: u64,
    pub selected_epoch: Option<usize>,
    pub best_score: Option<f64>,
    /// Resolved run configuration, verbatim.
    pub run_config: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub normalizer: Normalizer,
    pub params: ParamStore,
    /// Selected weights, stored only in resumable checkpoints.
    pub best: Option<ParamStore>,
    pub adam: Option<(Vec<Tensor>, Vec<Tensor>)>,
    pub history: LossHistory,
}

impl Checkpoint {
    /// Inference checkpoint holding one weight set.
    pub fn for_params(
        model: ModelConfig,
        train: TrainConfig,
        normalizer: Normalizer,
        params: ParamStore,
        epoch: usize,
    ) -> Self {
        Self {
            meta: CheckpointMeta {
                model,
                train,
                epoch,
                adam_step: 0,
                selected_epoch: None,
                best_score: None,
                run_config: None,
            },
            normalizer,
            params,
            best: None,
            adam: None,
            history: LossHistory::default(),
        }
    }

    /// Full trainer state, enough to continue training where it stopped.
    pub fn resumable(trainer: &Trainer, normalizer: Normalizer) -> Self {
        Self {
            meta: CheckpointMeta {
                model: trainer.model.config().clone(),
                train: trainer.config.clone(),
                epoch: trainer.epoch,
                adam_step: trainer.adam.step,
                selected_epoch: trainer.best.as_ref().and_then(|b| b.epoch),
                best_score: trainer.best.as_ref().map(|b| b.score),
                run_config: None,
            },
            normalizer,
            params: trainer.model.params().clone(),
            best: trainer.best.as_ref().map(|b| b.params.clone()),
            adam: Some((trainer.adam.m.clone(), trainer.adam.v.clone())),
            history: trainer.history.clone(),
        }
    }

    pub fn with_run_config(mut self, text: String) -> Self {
        self.meta.run_config = Some(text);
        self
    }

    pub fn model(&self) -> Result<SstGnn> {
        SstGnn::from_store(self.meta.model.clone(), self.params.clone())
    }

    /// Rebuilds a trainer; `config` overrides the stored training settings (e.g. more epochs).
    pub fn trainer(&self, config: TrainConfig) -> Result<Trainer> {
        let model = self.model()?;
        let (m, v) = self
            .adam
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume".into()))?;
        let adam = AdamState {
            beta1: self.meta.train.beta1,
            beta2: self.meta.train.beta2,
            eps: self.meta.train.eps,
            step: self.meta.adam_step,
            m,
            v,
        };
        let best = match (&self.best, self.meta.best_score) {
            (Some(params), Some(score)) => Some(Selected {
                epoch: self.meta.selected_epoch,
                score,
                params: params.clone(),
            }),
            _ => None,
        };
        Ok(Trainer {
            model,
            adam,
            config,
            epoch: self.meta.epoch,
            best,
            history: self.history.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("cannot encode metadata: {e}")))?;
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (_, p) in self.params.iter() {
            tensors.push((format!("param/{}", p.name()), &p.value));
        }
        if let Some(best) = &self.best {
            for (_, p) in best.iter() {
                tensors.push((format!("best/{}", p.name()), &p.value));
            }
        }
        if let Some((m, v)) = &self.adam {
            for ((_, p), t) in self.params.iter().zip(m) {
                tensors.push((format!("adam.m/{}", p.name()), t));
            }
            for ((_, p), t) in self.params.iter().zip(v) {
                tensors.push((format!("adam.v/{}", p.name()), t));
            }
        }
        let mean = Tensor::new(&[self.normalizer.mean().len()], self.normalizer.mean().to_vec())?;
        let std = Tensor::new(&[self.normalizer.std().len()], self.normalizer.std().to_vec())?;
        tensors.push(("norm/mean".into(), &mean));
        tensors.push(("norm/std".into(), &std));
        let history = history_tensor(&self.history)?;
        if let Some(h) = &history {
            tensors.push(("history".into(), h));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, tensors.len())?;
        for (name, t) in tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not an SSTGNN checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let meta: CheckpointMeta = toml::from_str(meta_text)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;

        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut best = ParamStore::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        let mut mean = None;
        let mut std = None;
        let mut history = LossHistory::default();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&dims, values)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            match name.split_once('/') {
                Some(("param", p)) => {
                    params.insert(p, t)?;
                }
                Some(("best", p)) => {
                    best.insert(p, t)?;
                }
                Some(("adam.m", _)) => adam_m.push(t),
                Some(("adam.v", _)) => adam_v.push(t),
                Some(("norm", "mean")) => mean = Some(t.into_data()),
                Some(("norm", "std")) => std = Some(t.into_data()),
                None if name == "history" => history = history_from_tensor(&t),
                _ => return Err(Error::Checkpoint(format!("unknown tensor {name}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        let normalizer = match (mean, std) {
            (Some(m), Some(s)) => Normalizer::new(m, s)?,
            _ => return Err(Error::Checkpoint("missing normalizer".into())),
        };
        let adam = if adam_m.is_empty() {
            None
        } else {
            if adam_m.len() != params.len() || adam_v.len() != params.len() {
                return Err(Error::Checkpoint("optimizer state does not cover every parameter".into()));
            }
            Some((adam_m, adam_v))
        };
        Ok(Self {
            meta,
            normalizer,
            params,
            best: (!best.is_empty()).then_some(best),
            adam,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint("field exceeds u32".into()))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn history_tensor(h: &LossHistory) -> Result<Option<Tensor>> {
    if h.is_empty() {
        return Ok(None);
    }
    let data = h
        .records
        .iter()
        .flat_map(|r| [r.epoch as f64, r.train_mse, r.val_mse.unwrap_or(f64::NAN), r.lr])
        .collect();
    Tensor::matrix(h.len(), 4, data).map(Some)
}

fn history_from_tensor(t: &Tensor) -> LossHistory {
    LossHistory {
        records: (0..t.rows())
            .map(|i| {
                let r = t.row(i);
                EpochRecord {
                    epoch: r[0] as usize,
                    train_mse: r[1],
                    val_mse: (!r[2].is_nan()).then_some(r[2]),
                    lr: r[3],
                }
            })
            .collect(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

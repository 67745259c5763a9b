//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `LGNC` |
//! | 4 | format version (`u32`) |
//! | 8 | header length `n` (`u64`) |
//! | n | JSON header: model config, labels, training config, trainer counters, tensor directory |
//! | … | tensor payloads as `f32`, in directory order |
//! | 32 | SHA-256 of every preceding byte |
//!
//! Tensors are stored bit for bit, so a saved run resumes exactly.

use std::fs;
use std::path::Path;

use kws_core::data::LabelMap;
use kws_core::model::{Buffer, LgNet, LgNetConfig, Param, ParamGroup};
use kws_core::train::{Schedule, Snapshot, TrainState, TrainingConfig};
use kws_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LGNC";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// A model plus, optionally, the trainer state needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LgNet<f32>,
    pub labels: LabelMap,
    pub training: TrainingConfig,
    pub state: Option<TrainState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    Buffer,
    Velocity,
    BestParam,
    BestBuffer,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    role: Role,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<ParamGroup>,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateHeader {
    stage: u8,
    epoch: usize,
    finished: bool,
    schedule: Schedule,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: LgNetConfig,
    text_dim: Option<usize>,
    labels: LabelMap,
    training: TrainingConfig,
    state: Option<StateHeader>,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload: Vec<&[f32]> = Vec::new();
        for p in self.model.params() {
            entries.push(Entry { role: Role::Param, name: p.name.clone(), group: Some(p.group), shape: p.value.shape().to_vec() });
            payload.push(p.value.data());
        }
        for b in self.model.buffers() {
            entries.push(Entry { role: Role::Buffer, name: b.name.clone(), group: None, shape: b.value.shape().to_vec() });
            payload.push(b.value.data());
        }
        if let Some(s) = &self.state {
            for (p, v) in self.model.params().iter().zip(&s.velocity) {
                entries.push(Entry { role: Role::Velocity, name: p.name.clone(), group: None, shape: vec![v.len()] });
                payload.push(v);
            }
            if let Some(best) = &s.best {
                for (i, t) in best.params.iter().enumerate() {
                    entries.push(Entry { role: Role::BestParam, name: format!("{i}"), group: None, shape: t.shape().to_vec() });
                    payload.push(t.data());
                }
                for (i, t) in best.buffers.iter().enumerate() {
                    entries.push(Entry { role: Role::BestBuffer, name: format!("{i}"), group: None, shape: t.shape().to_vec() });
                    payload.push(t.data());
                }
            }
        }
        let header = Header {
            model: self.model.config().clone(),
            text_dim: self.model.text_dim(),
            labels: self.labels.clone(),
            training: self.training.clone(),
            state: self.state.as_ref().map(|s| StateHeader {
                stage: s.stage,
                epoch: s.epoch,
                finished: s.finished,
                schedule: s.schedule.clone(),
            }),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("checkpoint headers always serialise");
        let mut out = Vec::with_capacity(16 + json.len() + payload.iter().map(|d| 4 * d.len()).sum::<usize>() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for d in payload {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses and verifies a checkpoint; `path` only labels errors.
    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        if bytes.len() < 16 + DIGEST_LEN {
            return Err(bad(format!("{} bytes is too short for a checkpoint", bytes.len())));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch: the file is corrupt or truncated".into()));
        }
        if &body[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let json = body.get(16..16 + hlen).ok_or_else(|| bad("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;

        let mut data = &body[16 + hlen..];
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if data.len() < 4 * n {
                return Err(bad("tensor data shorter than its directory".into()));
            }
            let (head, rest) = data.split_at(4 * n);
            data = rest;
            let vals = head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Tensor::from_vec(shape, vals))
        };
        let (mut params, mut buffers, mut velocity, mut best_p, mut best_b) = (vec![], vec![], vec![], vec![], vec![]);
        for e in &header.tensors {
            let t = take(&e.shape)?;
            match e.role {
                Role::Param => {
                    let group = e.group.ok_or_else(|| bad(format!("parameter `{}` has no group", e.name)))?;
                    params.push(Param { name: e.name.clone(), group, value: t });
                }
                Role::Buffer => buffers.push(Buffer { name: e.name.clone(), value: t }),
                Role::Velocity => velocity.push(t.into_data()),
                Role::BestParam => best_p.push(t),
                Role::BestBuffer => best_b.push(t),
            }
        }
        if !data.is_empty() {
            return Err(bad(format!("{} unexpected trailing bytes", data.len())));
        }
        let model = LgNet::from_parts(header.model, header.text_dim, params, buffers).map_err(|e| bad(e.to_string()))?;
        let state = match header.state {
            None => None,
            Some(s) => {
                if velocity.len() != model.params().len()
                    || velocity.iter().zip(model.params()).any(|(v, p)| v.len() != p.value.numel())
                {
                    return Err(bad("velocity buffers do not match the parameters".into()));
                }
                let best = (!best_p.is_empty()).then_some(Snapshot { params: best_p, buffers: best_b });
                Some(TrainState {
                    stage: s.stage,
                    epoch: s.epoch,
                    finished: s.finished,
                    schedule: s.schedule,
                    velocity,
                    best,
                })
            }
        };
        Ok(Checkpoint { model, labels: header.labels, training: header.training, state })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

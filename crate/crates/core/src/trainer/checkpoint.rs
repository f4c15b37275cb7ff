//! `KDCCKPT1` checkpoint files.
//!
//! Layout: 8-byte magic, little-endian `u64` manifest length, the UTF-8 JSON
//! manifest, then every tensor's values back to back as little-endian floats.
//! Tensors are `f32` when every value is exactly representable as one (always
//! the case after `f32` training) and `f64` otherwise. The manifest records
//! the payload length and its SHA-256.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::AdamState;
use super::config::TrainConfig;
use super::{MakdState, TrainState};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{ParamTree, Tensor};

pub const CKPT_MAGIC: &[u8; 8] = b"KDCCKPT1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Number of samples in the training set; resuming checks it.
    pub dataset_len: usize,
    pub state: TrainState,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Counters {
    step: u64,
    epochs_completed: u64,
    adam_t: u64,
    makd_adam_t: Option<u64>,
}

/// Every draw is keyed by `(seed, stream tag, counters...)`, so the seed and
/// the step counter are the entire generator state.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    generator: String,
    seed: u64,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    dataset_len: usize,
    counters: Counters,
    rng: RngState,
    makd_running_loss: Option<[Option<f64>; 2]>,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
    payload_sha256: String,
}

const GENERATOR: &str = "chacha8-splitmix-keyed";

const PARAMS: &str = "params";
const ADAM_M: &str = "adam.m";
const ADAM_V: &str = "adam.v";
const MAKD_PARAMS: &str = "makd.params";
const MAKD_ADAM_M: &str = "makd.adam.m";
const MAKD_ADAM_V: &str = "makd.adam.v";

fn f32_exact(t: &Tensor) -> bool {
    t.data().iter().all(|&x| (x as f32 as f64).to_bits() == x.to_bits())
}

struct PayloadWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl PayloadWriter {
    fn put(&mut self, group: &str, name: &str, t: &Tensor) {
        let f32_ok = f32_exact(t);
        self.entries.push(TensorEntry {
            group: group.into(),
            name: name.into(),
            shape: t.shape().to_vec(),
            dtype: if f32_ok { "f32le" } else { "f64le" }.into(),
            offset: self.bytes.len(),
        });
        for &x in t.data() {
            if f32_ok {
                self.bytes.extend_from_slice(&(x as f32).to_le_bytes());
            } else {
                self.bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    fn tree(&mut self, group: &str, tree: &ParamTree) {
        for (name, p) in tree.iter() {
            self.put(group, name, &p.tensor);
        }
    }

    fn moments(&mut self, m_group: &str, v_group: &str, adam: &AdamState) {
        for (name, t) in &adam.m {
            self.put(m_group, name, t);
        }
        for (name, t) in &adam.v {
            self.put(v_group, name, t);
        }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let st = &ckpt.state;
    let mut w = PayloadWriter {
        bytes: Vec::new(),
        entries: Vec::new(),
    };
    w.tree(PARAMS, &st.params);
    w.moments(ADAM_M, ADAM_V, &st.adam);
    if let Some(mk) = &st.makd {
        w.tree(MAKD_PARAMS, &mk.params);
        w.moments(MAKD_ADAM_M, MAKD_ADAM_V, &mk.adam);
    }
    let manifest = Manifest {
        format_version: CKPT_VERSION,
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        dataset_len: ckpt.dataset_len,
        counters: Counters {
            step: st.step,
            epochs_completed: st.epochs_completed,
            adam_t: st.adam.t,
            makd_adam_t: st.makd.as_ref().map(|m| m.adam.t),
        },
        rng: RngState {
            generator: GENERATOR.into(),
            seed: ckpt.train.seed,
            step: st.step,
        },
        makd_running_loss: st.makd.as_ref().map(|m| m.running_loss),
        tensors: w.entries,
        payload_bytes: w.bytes.len(),
        payload_sha256: hex::encode(Sha256::digest(&w.bytes)),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + w.bytes.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.bytes);
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    // write-then-rename so an interrupted save never leaves a torn file
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != CKPT_MAGIC {
        let n = bytes.len().min(8);
        return Err(Error::MagicMismatch {
            expected: String::from_utf8_lossy(CKPT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..n]).into_owned(),
        });
    }
    let len = bytes
        .get(8..16)
        .ok_or_else(|| corrupt("file ends inside the manifest length"))?;
    let mlen = u64::from_le_bytes(len.try_into().unwrap()) as usize;
    let body = 16usize
        .checked_add(mlen)
        .and_then(|end| bytes.get(16..end))
        .ok_or_else(|| corrupt(format!("file ends inside the {mlen}-byte manifest")))?;
    // read the version first so a newer layout reports as such
    #[derive(Deserialize)]
    struct Version {
        format_version: u32,
    }
    let v: Version = serde_json::from_slice(body)
        .map_err(|e| Error::MalformedHeader(format!("manifest JSON: {e}")))?;
    if v.format_version != CKPT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CKPT_VERSION,
            found: v.format_version,
        });
    }
    let manifest: Manifest = serde_json::from_slice(body)
        .map_err(|e| Error::MalformedHeader(format!("manifest JSON: {e}")))?;
    if manifest.rng.generator != GENERATOR {
        return Err(Error::MalformedHeader(format!(
            "unknown generator {}",
            manifest.rng.generator
        )));
    }
    let payload = &bytes[16 + mlen..];
    if payload.len() != manifest.payload_bytes {
        return Err(corrupt(format!(
            "payload has {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }

    let mut params = ParamTree::new();
    let mut adam = AdamState {
        t: manifest.counters.adam_t,
        ..Default::default()
    };
    let mut makd_params = ParamTree::new();
    let mut makd_adam = AdamState {
        t: manifest.counters.makd_adam_t.unwrap_or(0),
        ..Default::default()
    };
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let width = match e.dtype.as_str() {
            "f32le" => 4,
            "f64le" => 8,
            other => return Err(corrupt(format!("tensor {} has dtype {other}", e.name))),
        };
        let raw = e
            .offset
            .checked_add(n * width)
            .and_then(|end| payload.get(e.offset..end))
            .ok_or_else(|| corrupt(format!("tensor {} lies outside the payload", e.name)))?;
        let data: Vec<f64> = if width == 4 {
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        };
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(err.to_string()))?;
        let dup = |_| corrupt(format!("duplicate tensor {}/{}", e.group, e.name));
        match e.group.as_str() {
            PARAMS => params.insert(e.name.clone(), t).map_err(dup)?,
            MAKD_PARAMS => makd_params.insert(e.name.clone(), t).map_err(dup)?,
            ADAM_M => {
                adam.m.insert(e.name.clone(), t);
            }
            ADAM_V => {
                adam.v.insert(e.name.clone(), t);
            }
            MAKD_ADAM_M => {
                makd_adam.m.insert(e.name.clone(), t);
            }
            MAKD_ADAM_V => {
                makd_adam.v.insert(e.name.clone(), t);
            }
            other => return Err(corrupt(format!("unknown tensor group {other}"))),
        }
    }
    let makd = match (manifest.makd_running_loss, manifest.counters.makd_adam_t) {
        (Some(running_loss), Some(_)) => Some(MakdState {
            params: makd_params,
            adam: makd_adam,
            running_loss,
        }),
        (None, None) => None,
        _ => return Err(corrupt("inconsistent MAKD state")),
    };
    Ok(Checkpoint {
        model: manifest.model,
        train: manifest.train,
        dataset_len: manifest.dataset_len,
        state: TrainState {
            params,
            adam,
            step: manifest.counters.step,
            epochs_completed: manifest.counters.epochs_completed,
            makd,
        },
    })
}

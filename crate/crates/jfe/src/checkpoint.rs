//! Checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "JFEC" | version | blob length | blob (UTF-8 JSON) | tensor count |
//!   per tensor: name length | name | rank | dims… | f32 values… |
//! CRC-32 of every preceding byte
//! ```
//!
//! The blob records the architecture, the stage lineage, unmerged adapter
//! hyper-parameters, the generator position, the frozen tensor names and
//! an echo of the run configuration.

use std::path::Path;

use jfe_core::adapters::{relink, ADAPTER_PREFIX};
use jfe_core::numerics::{ParamStore, Tensor};
use jfe_core::trainer::{AdapterInfo, Checkpoint, ModelConfig, RngState, Stage};
use serde::{Deserialize, Serialize};

use crate::error::{JfeError, Result};

pub const MAGIC: &[u8; 4] = b"JFEC";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Blob {
    model: ModelConfig,
    stages: Vec<Stage>,
    adapter: Option<AdapterInfo>,
    rng: RngState,
    steps: u64,
    frozen: Vec<String>,
    config: serde_json::Value,
}

/// A checkpoint with the configuration echo it was saved with.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedCheckpoint {
    pub checkpoint: Checkpoint,
    pub config: serde_json::Value,
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| JfeError::Format(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint, config: &serde_json::Value) -> Result<Vec<u8>> {
    let store = &ckpt.store;
    let blob = Blob {
        model: ckpt.model,
        stages: ckpt.stages.clone(),
        adapter: ckpt.adapter,
        rng: ckpt.rng,
        steps: ckpt.steps,
        frozen: store
            .entries()
            .iter()
            .filter(|e| !e.trainable)
            .map(|e| e.name.clone())
            .collect(),
        config: config.clone(),
    };
    let blob = serde_json::to_vec(&blob).map_err(|e| JfeError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(blob.len() + 4 * store.scalar_count() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    push_u32(&mut out, blob.len())?;
    out.extend_from_slice(&blob);
    push_u32(&mut out, store.len())?;
    for e in store.entries() {
        push_u32(&mut out, e.name.len())?;
        out.extend_from_slice(e.name.as_bytes());
        push_u32(&mut out, e.tensor.shape().len())?;
        for d in e.tensor.shape() {
            push_u32(&mut out, *d)?;
        }
        for v in e.tensor.data() {
            let f = *v as f32;
            if f64::from(f) != *v {
                return Err(JfeError::Format(format!(
                    "tensor {} holds {v}, which is not an f32 value",
                    e.name
                )));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            JfeError::Truncated(format!("file ends inside {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

struct RawTensor<'a> {
    name: &'a [u8],
    shape: Vec<usize>,
    payload: &'a [u8],
}

/// Walks the record structure of `body` (everything before the checksum).
fn parse_body(body: &[u8]) -> Result<(&[u8], Vec<RawTensor<'_>>, usize)> {
    let mut c = Cursor {
        bytes: body,
        pos: 8,
    };
    let blob_len = c.u32("blob length")?;
    let blob = c.take(blob_len, "config blob")?;
    let count = c.u32("tensor count")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        let what = format!("tensor record {i}");
        let name_len = c.u32(&what)?;
        let name = c.take(name_len, &what)?;
        let rank = c.u32(&what)?;
        let shape = (0..rank)
            .map(|_| c.u32(&what))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(4usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| JfeError::Truncated(format!("{what}: dimensions overflow")))?;
        let payload = c.take(n, &what)?;
        tensors.push(RawTensor {
            name,
            shape,
            payload,
        });
    }
    Ok((blob, tensors, c.pos))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SavedCheckpoint> {
    if bytes.len() < 8 {
        return Err(JfeError::Truncated(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(JfeError::Format(
            "not a checkpoint file (missing JFEC header)".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(JfeError::Version {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(JfeError::Truncated("file ends before the checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    let parsed = parse_body(body);
    if computed != stored {
        return Err(match parsed {
            Err(e @ JfeError::Truncated(_)) => e,
            _ => JfeError::Checksum { stored, computed },
        });
    }
    let (blob, raw, end) = parsed?;
    if end != body.len() {
        return Err(JfeError::Format(format!(
            "{} unexpected bytes after the last tensor",
            body.len() - end
        )));
    }
    let blob: Blob = serde_json::from_slice(blob)
        .map_err(|e| JfeError::Format(format!("checkpoint blob: {e}")))?;

    let mut store = ParamStore::new();
    for t in raw {
        let name = std::str::from_utf8(t.name)
            .map_err(|_| JfeError::Format("tensor name is not UTF-8".into()))?;
        let data: Vec<f64> = t
            .payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let tensor = Tensor::new(&t.shape, data)?;
        tensor.check_finite(name)?;
        let trainable = !blob.frozen.iter().any(|f| f == name);
        store.insert(name, tensor, trainable)?;
    }
    if let Some(missing) = blob.frozen.iter().find(|f| !store.contains(f)) {
        return Err(JfeError::Format(format!(
            "frozen tensor {missing} is not in the checkpoint"
        )));
    }
    match &blob.adapter {
        Some(a) => {
            relink(&mut store, a.scale(), a.dropout)?;
        }
        None if store
            .entries()
            .iter()
            .any(|e| e.name.starts_with(ADAPTER_PREFIX)) =>
        {
            return Err(JfeError::Format(
                "adapter tensors present without adapter settings".into(),
            ));
        }
        None => {}
    }
    let checkpoint = Checkpoint {
        model: blob.model,
        stages: blob.stages,
        adapter: blob.adapter,
        rng: blob.rng,
        steps: blob.steps,
        store,
    };
    checkpoint.encoder()?;
    Ok(SavedCheckpoint {
        checkpoint,
        config: blob.config,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, config: &serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(ckpt, config)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| JfeError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| JfeError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SavedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| JfeError::io(path, e))?;
    decode_checkpoint(&bytes)
}

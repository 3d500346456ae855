//! Binary checkpoints.
//!
//! ```text
//! "MRWK" | u32 version | u64 header_len | header JSON | f64 LE payload | u64 checksum
//! ```
//!
//! The header holds the run config, progress, sampler state and a tensor
//! directory (name, dtype, shape, byte offset into the payload). The trailer is
//! the first 8 bytes (LE) of the SHA-256 of everything before it. Writes go
//! to a temporary sibling file that is synced and then renamed over the target.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::optim::Adam;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRWK";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: u8,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub store: ParamStore,
    pub adam: Option<Adam>,
    pub progress: Progress,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    progress: Progress,
    rng: Option<RngState>,
    adam: Option<AdamMeta>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

fn checksum(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(Sha256::digest(bytes)[..8].try_into().unwrap())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut tensors: Vec<(String, &Tensor)> = ck.store.iter().map(|p| (p.name.clone(), &p.value)).collect();
    if let Some(a) = &ck.adam {
        for (p, (m, v)) in ck.store.iter().zip(a.m.iter().zip(&a.v)) {
            tensors.push((format!("opt.m.{}", p.name), m));
            tensors.push((format!("opt.v.{}", p.name), v));
        }
    }
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                dtype: "f64".into(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.numel() as u64;
            e
        })
        .collect();
    let header = Header {
        config: ck.config.clone(),
        progress: ck.progress,
        rng: ck.rng,
        adam: ck.adam.as_ref().map(|a| AdamMeta {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            t: a.t,
        }),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX + json.len() + offset as usize + 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err(0, "missing MRWK magic"));
    }
    if bytes.len() < PREFIX {
        return Err(format_err(bytes.len(), "truncated prefix"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_end = bytes.len().checked_sub(8).filter(|&e| e >= PREFIX);
    let Some(body_end) = body_end else {
        return Err(format_err(bytes.len(), "truncated before checksum"));
    };
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = checksum(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Corruption { stored, computed });
    }
    let hend = PREFIX
        .checked_add(hlen)
        .filter(|&e| e <= body_end)
        .ok_or_else(|| format_err(PREFIX, "header length exceeds file"))?;
    let header: Header =
        serde_json::from_slice(&bytes[PREFIX..hend]).map_err(|e| format_err(PREFIX, format!("header: {e}")))?;
    let payload = &bytes[hend..body_end];
    let mut store = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for e in &header.tensors {
        if e.dtype != "f64" {
            return Err(format_err(PREFIX, format!("tensor `{}` has dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(format_err(hend + payload.len(), format!("tensor `{}` runs past payload", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&e.shape, data)?;
        if let Some(rest) = e.name.strip_prefix("opt.m.") {
            store.id(rest)?;
            m.push(t);
        } else if let Some(rest) = e.name.strip_prefix("opt.v.") {
            store.id(rest)?;
            v.push(t);
        } else {
            store.insert(e.name.clone(), t)?;
        }
    }
    let adam = match header.adam {
        Some(a) => {
            if m.len() != store.len() || v.len() != store.len() {
                return Err(format_err(PREFIX, "optimizer moments do not cover every parameter"));
            }
            Some(Adam {
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                t: a.t,
                m,
                v,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        config: header.config,
        store,
        adam,
        progress: header.progress,
        rng: header.rng,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck);
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Model;

    fn sample() -> Checkpoint {
        let config = RunConfig::default();
        let model = Model::new(&config).unwrap();
        let adam = Adam::for_phase(&model.store, &config.phase1);
        Checkpoint {
            config: model.config,
            store: model.store,
            adam: Some(adam),
            progress: Progress { phase: 1, step: 3 },
            rng: None,
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ck = sample();
        let a = encode_checkpoint(&ck);
        let back = decode_checkpoint(&a).unwrap();
        assert_eq!(encode_checkpoint(&back), a);
        assert_eq!(back.progress, ck.progress);
    }

    #[test]
    fn flipped_payload_byte_is_corruption() {
        let mut a = encode_checkpoint(&sample());
        let i = a.len() - 20;
        a[i] ^= 1;
        assert!(matches!(decode_checkpoint(&a), Err(Error::Corruption { .. })));
    }

    #[test]
    fn version_and_truncation() {
        let mut a = encode_checkpoint(&sample());
        a[4] = 9;
        assert!(matches!(
            decode_checkpoint(&a),
            Err(Error::UnsupportedVersion { found: 9, supported: 1 })
        ));
        assert!(matches!(decode_checkpoint(b"MRWK\x01"), Err(Error::Format { .. })));
        assert!(matches!(decode_checkpoint(b"nope"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn atomic_save_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.mrwk");
        save_checkpoint(&p, &sample()).unwrap();
        assert!(p.exists() && !p.with_extension("tmp").exists());
        load_checkpoint(&p).unwrap();
    }
}

//! Versioned checkpoint container.
//!
//! ```text
//! magic "SMCKPT\0\0" | u32 version | u64 header length | JSON header | f64 LE payload
//! ```
//!
//! The payload holds every tensor in store order, followed by the AdamW first
//! and second moments (same order) when optimizer state is present. The header
//! carries the config echo, epoch, step, tensor table and a SHA-256 of the
//! payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::training::{AdamW, TrainConfig};

const MAGIC: &[u8; 8] = b"SMCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    seed: u64,
    epoch: usize,
    step: u64,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    payload_sha256: String,
}

fn push_mat(out: &mut Vec<u8>, m: &Mat) {
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut payload = Vec::with_capacity(8 * ckpt.params.scalar_count() * 3);
    for (_, _, m) in ckpt.params.iter() {
        push_mat(&mut payload, m);
    }
    if let Some(opt) = &ckpt.optimizer {
        for m in opt.m.iter().chain(&opt.v) {
            push_mat(&mut payload, m);
        }
    }
    let header = Header {
        seed: ckpt.config.seed,
        epoch: ckpt.epoch,
        step: ckpt.step,
        config: ckpt.config.clone(),
        tensors: ckpt
            .params
            .iter()
            .map(|(_, name, m)| TensorEntry {
                name: name.to_string(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            steps: o.steps.clone(),
        }),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: String| Error::CorruptCheckpoint(m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if hlen > body.len() {
        return Err(corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = &body[hlen..];
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload hash mismatch".into()));
    }
    let scalars: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    let copies = if header.optimizer.is_some() { 3 } else { 1 };
    if payload.len() != 8 * scalars * copies {
        return Err(corrupt("payload length does not match the tensor table".into()));
    }
    let mut offset = 0;
    let mut next = |rows: usize, cols: usize| {
        let m = Mat::from_shape_fn((rows, cols), |(r, c)| {
            let at = offset + 8 * (r * cols + c);
            f64::from_le_bytes(payload[at..at + 8].try_into().expect("8 bytes"))
        });
        offset += 8 * rows * cols;
        m
    };
    let mut params = ParamStore::new();
    for t in &header.tensors {
        params.insert(t.name.clone(), next(t.rows, t.cols));
    }
    let optimizer = match header.optimizer {
        Some(o) => {
            if o.steps.len() != header.tensors.len() {
                return Err(corrupt("optimizer step table has the wrong length".into()));
            }
            let m = header.tensors.iter().map(|t| next(t.rows, t.cols)).collect();
            let v = header.tensors.iter().map(|t| next(t.rows, t.cols)).collect();
            Some(AdamW {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                m,
                v,
                steps: o.steps,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        step: header.step,
        params,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io("writing checkpoint", path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io("reading checkpoint", path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::training::Trainer;

    fn tiny() -> Checkpoint {
        let config = TrainConfig {
            model: ModelConfig::tiny(),
            ..TrainConfig::default()
        };
        let mut ckpt = Trainer::new(&config).unwrap().checkpoint();
        let opt = ckpt.optimizer.as_mut().unwrap();
        opt.m[0].fill(0.25);
        opt.v[1].fill(-0.0);
        opt.steps[2] = 7;
        ckpt.epoch = 3;
        ckpt.step = 41;
        ckpt
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = tiny();
        let back = decode_checkpoint(&encode_checkpoint(&ckpt)).unwrap();
        assert_eq!(back, ckpt);
        for ((_, _, a), (_, _, b)) in ckpt.params.iter().zip(back.params.iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(encode_checkpoint(&back), encode_checkpoint(&ckpt));
    }

    #[test]
    fn detects_corruption() {
        let bytes = encode_checkpoint(&tiny());
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 8]), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(decode_checkpoint(b"not a checkpoint at all"), Err(Error::CorruptCheckpoint(_))));
    }
}

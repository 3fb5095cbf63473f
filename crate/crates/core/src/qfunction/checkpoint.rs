//! Binary checkpoint format.
//!
//! ```text
//! magic    "TMQN"                       4 bytes
//! version  u32 LE                       4 bytes
//! hlen     u32 LE                       4 bytes
//! header   JSON (arch, meta, adam)      hlen bytes
//! params   f32 LE × param_count
//! adam m   f32 LE × param_count
//! adam v   f32 LE × param_count
//! crc32    u32 LE over everything above
//! ```

use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, CheckpointError, NetArch, QParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMQN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Episodes completed when the checkpoint was written.
    pub episode: u64,
    pub seed: u64,
    #[serde(default)]
    pub note: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: NetArch,
    meta: CheckpointMeta,
    adam: AdamConfig,
    adam_step: u64,
    param_count: usize,
}

pub fn save_checkpoint(params: &QParams<f32>, adam: &AdamState<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let header = Header {
        arch: params.arch().clone(),
        meta: meta.clone(),
        adam: adam.config,
        adam_step: adam.step,
        param_count: params.len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 12 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for array in [params.data(), &adam.m, &adam.v] {
        for v in array {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(QParams<f32>, AdamState<f32>, CheckpointMeta), CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Checksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != read_u32(tail, 0) {
        return Err(CheckpointError::Checksum);
    }
    if &body[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(body, 4);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = read_u32(body, 8) as usize;
    let json = body.get(12..12 + hlen).ok_or_else(|| CheckpointError::Header("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let n = header.arch.param_count()?;
    if n != header.param_count {
        return Err(CheckpointError::Header(format!(
            "declared {} parameters, architecture has {n}",
            header.param_count
        )));
    }
    let payload = &body[12 + hlen..];
    if payload.len() != 12 * n {
        return Err(CheckpointError::Header(format!("expected {} payload bytes, found {}", 12 * n, payload.len())));
    }
    let read = |i: usize, what: &'static str| -> Result<Vec<f32>, CheckpointError> {
        let values: Vec<f32> = payload[4 * n * i..4 * n * (i + 1)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(what));
        }
        Ok(values)
    };
    let params = QParams::from_data(&header.arch, read(0, "parameters")?)?;
    let adam = AdamState {
        config: header.adam,
        m: read(1, "first moments")?,
        v: read(2, "second moments")?,
        step: header.adam_step,
    };
    Ok((params, adam, header.meta))
}

/// Fails with [`CheckpointError::ArchMismatch`] unless `found` equals `expected`.
pub fn ensure_arch(expected: &NetArch, found: &NetArch) -> Result<(), CheckpointError> {
    if expected != found {
        return Err(CheckpointError::ArchMismatch { expected: expected.describe(), found: found.describe() });
    }
    Ok(())
}

impl QParams<f32> {
    /// Loads a checkpoint and checks it was written for `expected`.
    pub fn load_for(
        bytes: &[u8],
        expected: &NetArch,
    ) -> Result<(QParams<f32>, AdamState<f32>, CheckpointMeta), CheckpointError> {
        let loaded = load_checkpoint(bytes)?;
        ensure_arch(expected, loaded.0.arch())?;
        Ok(loaded)
    }
}

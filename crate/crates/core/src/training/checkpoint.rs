//! Model checkpoints.
//!
//! Layout: `"OEMC"`, version `u16`, config length `u32`, config JSON, SHA-256
//! of the config JSON, SHA-256 of the bucket table, parameter count `u32`,
//! then per parameter a `u16` name length, the name and one tensor record.
//! A SHA-256 of everything before it closes the file.

use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shapeedit_numerics::{read_tensor, write_tensor, Scalar};

use crate::editnet::{ModelConfig, ModelParams};
use crate::error::{Error, IoContext, Result};
use crate::microworld::AspectBucket;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OEMC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
}

pub fn bucket_table_hash() -> [u8; 32] {
    let mut h = Sha256::new();
    for b in AspectBucket::ALL {
        let (w, hgt) = b.dims();
        h.update(b.name().as_bytes());
        h.update((w as u32).to_le_bytes());
        h.update((hgt as u32).to_le_bytes());
    }
    h.finalize().into()
}

pub fn encode_checkpoint<S: Scalar>(params: &ModelParams<S>, step: u64) -> Result<Vec<u8>> {
    params.validate()?;
    let meta = CheckpointMeta { model: params.config.clone(), step };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&Sha256::digest(&json));
    out.extend_from_slice(&bucket_table_hash());
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in &params.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor(&mut out, t)?;
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn take<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| Error::Checkpoint("file truncated".into()))?;
    Ok(buf)
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<(ModelParams<S>, CheckpointMeta)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 4 + 2 + 32 {
        return Err(bad("file truncated"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a model checkpoint (bad magic)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version} is not supported (this build reads version {CHECKPOINT_VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch: file is corrupted or truncated"));
    }
    let mut r = Cursor::new(body);
    take::<6>(&mut r)?;
    let len = u32::from_le_bytes(take(&mut r)?) as usize;
    if len > body.len() {
        return Err(bad("file truncated"));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("file truncated"))?;
    let config_hash: [u8; 32] = take(&mut r)?;
    if Sha256::digest(&json).as_slice() != config_hash {
        return Err(bad("config hash mismatch"));
    }
    if take::<32>(&mut r)? != bucket_table_hash() {
        return Err(bad("checkpoint was written for a different bucket table"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&json)?;
    let count = u32::from_le_bytes(take(&mut r)?) as usize;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let n = u16::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(|_| bad("file truncated"))?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let t = read_tensor::<S, _>(&mut r).map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
        tensors.insert(name, t);
    }
    if (r.position() as usize) != body.len() {
        return Err(bad("trailing bytes after last parameter"));
    }
    let params = ModelParams { config: meta.model.clone(), tensors };
    params.validate().map_err(|e| Error::Checkpoint(format!("checkpoint does not match its config: {e}")))?;
    Ok((params, meta))
}

/// Writes via a temporary file and rename.
pub fn save_checkpoint<S: Scalar>(params: &ModelParams<S>, step: u64, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, step)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension("oemc.tmp");
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(ModelParams<S>, CheckpointMeta)> {
    let bytes = std::fs::read(path).at(path)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editnet::{init_model, Variant};

    fn tiny() -> ModelParams<f32> {
        let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, temb_dim: 4, variant: Variant::Editnet, ..Default::default() };
        init_model(&cfg, 5, None).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = tiny();
        let bytes = encode_checkpoint(&p, 42).unwrap();
        let (q, meta) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(meta.step, 42);
        assert_eq!(p, q);
        assert_eq!(encode_checkpoint(&q, 42).unwrap(), bytes);
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let bytes = encode_checkpoint(&tiny(), 1).unwrap();
        for i in (0..bytes.len()).step_by(97).chain([5, bytes.len() - 1]) {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert!(decode_checkpoint::<f32>(&b).is_err(), "flip at {i} went unnoticed");
        }
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint::<f32>(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn version_bump_is_rejected_by_name() {
        let mut b = encode_checkpoint(&tiny(), 1).unwrap();
        b[4..6].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        let msg = decode_checkpoint::<f32>(&b).unwrap_err().to_string();
        assert!(msg.contains("version 2"), "{msg}");
    }
}

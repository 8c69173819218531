//! Versioned model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "LSEGCKPT" | version u32 | config digest [32]
//! config_len u32 | model config JSON
//! epoch u64 | val_soft_dice f64 bits | rng_cursor u64 | extra_len u32 | extra JSON
//! n_entries u32 | n_entries x (name_len u16, name, ndim u8, dims u32.., offset u64)
//! payload: f32 values | SHA-256 of everything before it [32]
//! ```

use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::bytes::{extend_f32s, f32s_from_le, Reader};
use super::{read_file, write_file};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;
use crate::unet::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"LSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Training state stored alongside the parameters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_soft_dice: f64,
    /// Position of the training RNG when the snapshot was taken.
    pub rng_cursor: u64,
    /// Free-form JSON, e.g. the training configuration.
    pub extra: String,
}

/// A model snapshot with its metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.model, &self.meta, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (model, meta) = load_checkpoint(path)?;
        Ok(Checkpoint { model, meta })
    }
}

pub fn encode_checkpoint(model: &Model<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&config));
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(meta.epoch as u64).to_le_bytes());
    out.extend_from_slice(&meta.val_soft_dice.to_bits().to_le_bytes());
    out.extend_from_slice(&meta.rng_cursor.to_le_bytes());
    out.extend_from_slice(&(meta.extra.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.extra.as_bytes());

    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in model.params() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.len() as u64;
    }
    for t in model.params().values() {
        extend_f32s(&mut out, t.data());
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

fn utf8(bytes: &[u8], field: &'static str) -> Result<String, FormatError> {
    String::from_utf8(bytes.to_vec()).map_err(|e| FormatError::InvalidHeader {
        field,
        detail: e.to_string(),
    })
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(Model<f32>, CheckpointMeta)> {
    let mut r = Reader::new(buf);
    let magic = r.take(MAGIC.len()).map_err(|_| FormatError::BadMagic {
        expected: String::from_utf8_lossy(MAGIC).into_owned(),
        found: String::from_utf8_lossy(buf).into_owned(),
    })?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        }
        .into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    if buf.len() < r.pos() + DIGEST_LEN * 2 {
        return Err(FormatError::TruncatedPayload {
            expected: r.pos() + DIGEST_LEN * 2,
            found: buf.len(),
        }
        .into());
    }
    let (body, trailer) = buf.split_at(buf.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(FormatError::ChecksumMismatch.into());
    }

    let mut r = Reader::new(body);
    r.take(MAGIC.len() + 4)?;
    let digest = r.array::<DIGEST_LEN>()?;
    let config_len = r.u32()? as usize;
    let config_bytes = r.take(config_len)?;
    if Sha256::digest(config_bytes).as_slice() != digest {
        return Err(FormatError::DigestMismatch.into());
    }
    let config: ModelConfig =
        serde_json::from_slice(config_bytes).map_err(|e| FormatError::InvalidHeader {
            field: "config",
            detail: e.to_string(),
        })?;
    let epoch = r.u64()? as usize;
    let val_soft_dice = f64::from_bits(r.u64()?);
    let rng_cursor = r.u64()?;
    let extra_len = r.u32()? as usize;
    let extra = utf8(r.take(extra_len)?, "extra")?;

    let n = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = utf8(r.take(len)?, "entry name")?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let offset = r.u64()? as usize;
        entries.push((name, shape, offset));
    }
    let payload = &body[r.pos()..];
    let mut params = IndexMap::with_capacity(n);
    for (name, shape, offset) in entries {
        let count: usize = shape.iter().product();
        let end = offset
            .checked_add(count * 4)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| FormatError::TruncatedPayload {
                expected: offset.saturating_add(count * 4),
                found: payload.len(),
            })?;
        let t = Tensor::new(shape, f32s_from_le(&payload[offset..end])).map_err(|e| {
            FormatError::InvalidHeader {
                field: "entry shape",
                detail: e.to_string(),
            }
        })?;
        params.insert(name, t);
    }
    let model = Model::from_params(config, params)?;
    Ok((
        model,
        CheckpointMeta {
            epoch,
            val_soft_dice,
            rng_cursor,
            extra,
        },
    ))
}

pub fn save_checkpoint(
    model: &Model<f32>,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(model, meta))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model<f32>, CheckpointMeta)> {
    let path = path.as_ref();
    decode_checkpoint(&read_file(path)?).map_err(|e| match e {
        Error::Format(_) | Error::Config(_) => e,
        other => Error::Format(FormatError::InvalidHeader {
            field: "checkpoint",
            detail: other.to_string(),
        }),
    })
}

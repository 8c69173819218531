//! Patch datasets on disk: `patches.bin` holds a small header followed by the
//! raw float32 blocks of every patch (channels then target), and
//! `manifest.jsonl` has one record per patch pointing into it.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bytes::{extend_f32s, f32s_from_le, Reader};
use super::{read_file, write_file};
use crate::data::Patch;
use crate::error::{FormatError, Result};

const MAGIC: &[u8; 8] = b"LSEGPTCH";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 12;
pub const DATA_FILE: &str = "patches.bin";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub subject: String,
    pub origin: [usize; 3],
    pub size: usize,
    pub positive: bool,
    /// Byte offset of the patch block in the data file.
    pub offset: u64,
    /// Byte length of the block: `3 * size³ * 4`.
    pub length: u64,
}

/// Writes `patches` to `dir`, replacing any previous set.
pub fn write_patch_set(dir: impl AsRef<Path>, patches: &[Patch]) -> Result<Vec<ManifestRecord>> {
    let dir = dir.as_ref();
    let mut data =
        Vec::with_capacity(HEADER_LEN + patches.iter().map(|p| 12 * p.voxels()).sum::<usize>());
    data.extend_from_slice(MAGIC);
    data.extend_from_slice(&VERSION.to_le_bytes());
    let mut records = Vec::with_capacity(patches.len());
    let mut manifest = String::new();
    for p in patches {
        let offset = data.len() as u64;
        extend_f32s(&mut data, &p.channels);
        extend_f32s(&mut data, &p.target);
        let rec = ManifestRecord {
            subject: p.subject_id.clone(),
            origin: p.origin,
            size: p.size,
            positive: p.positive,
            offset,
            length: data.len() as u64 - offset,
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(manifest, "{line}").expect("writing to a String");
        records.push(rec);
    }
    write_file(&dir.join(DATA_FILE), &data)?;
    write_file(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    Ok(records)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let text = read_file(&dir.as_ref().join(MANIFEST_FILE))?;
    let text = String::from_utf8(text).map_err(|e| FormatError::Manifest {
        line: 0,
        detail: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                FormatError::Manifest {
                    line: i + 1,
                    detail: e.to_string(),
                }
                .into()
            })
        })
        .collect()
}

pub fn read_patch_set(dir: impl AsRef<Path>) -> Result<Vec<Patch>> {
    let dir = dir.as_ref();
    let records = read_manifest(dir)?;
    let data = read_file(&dir.join(DATA_FILE))?;
    let mut r = Reader::new(&data);
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        }
        .into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let n = rec.size.pow(3);
        let bad = |detail: String| FormatError::Manifest {
            line: i + 1,
            detail,
        };
        if rec.size == 0 || rec.length != 12 * n as u64 {
            return Err(bad(format!(
                "length {} does not match size {}",
                rec.length, rec.size
            ))
            .into());
        }
        let (start, end) = (rec.offset as usize, (rec.offset + rec.length) as usize);
        if start < HEADER_LEN || end > data.len() {
            return Err(FormatError::TruncatedPayload {
                expected: end,
                found: data.len(),
            }
            .into());
        }
        let mut values = f32s_from_le(&data[start..end]);
        let target = values.split_off(2 * n);
        let p = Patch::new(rec.subject, rec.origin, rec.size, values, target)?;
        if p.positive != rec.positive {
            return Err(bad("positive flag disagrees with the stored target".into()).into());
        }
        out.push(p);
    }
    Ok(out)
}

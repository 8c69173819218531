//! On-disk formats: a float32 NIfTI-1 subset for volumes, a versioned
//! checksummed checkpoint file, and a raw patch container with a JSONL
//! manifest. All writers are deterministic byte-for-byte.

mod bytes;
pub mod checkpoint;
pub mod nifti;
pub mod patch_store;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointMeta, CHECKPOINT_VERSION,
};
pub use nifti::{decode_volume, encode_volume, read_volume, write_volume};
pub use patch_store::{read_patch_set, write_patch_set, ManifestRecord};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file and renames it into place, so a
/// reader never observes a half-written file.
pub(crate) fn write_file(path: &Path, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = Path::new(&tmp);
    fs::write(tmp, data).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

//! Single-file NIfTI-1 (`.nii`), little-endian float32, 3-D only. Orientation
//! is written as a spacing-scaled identity and ignored when reading.

use std::path::Path;

use super::bytes::{extend_f32s, f32s_from_le};
use super::{read_file, write_file};
use crate::data::Volume;
use crate::error::{Error, FormatError, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const DT_FLOAT32: i16 = 16;

fn put_i16(h: &mut [u8], at: usize, v: i16) {
    h[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(h: &mut [u8], at: usize, v: f32) {
    h[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(h: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([h[at], h[at + 1]])
}

fn get_i32(h: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(h[at..at + 4].try_into().expect("4 bytes"))
}

fn get_f32(h: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(h[at..at + 4].try_into().expect("4 bytes"))
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let [d, h, w] = v.dims();
    let [sd, sh, sw] = v.spacing();
    if [d, h, w].iter().any(|&n| n > i16::MAX as usize) {
        return Err(Error::invalid(format!(
            "volume {:?} exceeds the NIfTI-1 extent limit",
            v.dims()
        )));
    }
    let mut out = vec![0u8; VOX_OFFSET];
    let hdr = &mut out[..HEADER_SIZE];
    hdr[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    hdr[38] = b'r';
    for (i, n) in [3, w as i16, h as i16, d as i16, 1, 1, 1, 1]
        .into_iter()
        .enumerate()
    {
        put_i16(hdr, 40 + 2 * i, n);
    }
    put_i16(hdr, 70, DT_FLOAT32);
    put_i16(hdr, 72, 32);
    for (i, p) in [1.0, sw, sh, sd, 0.0, 0.0, 0.0, 0.0]
        .into_iter()
        .enumerate()
    {
        put_f32(hdr, 76 + 4 * i, p);
    }
    put_f32(hdr, 108, VOX_OFFSET as f32);
    put_f32(hdr, 112, 1.0);
    hdr[123] = 2; // millimetres
    put_i16(hdr, 254, 1); // sform_code: scanner-independent
    for (row, s) in [sw, sh, sd].into_iter().enumerate() {
        put_f32(hdr, 280 + 16 * row + 4 * row, s);
    }
    hdr[344..348].copy_from_slice(MAGIC);
    extend_f32s(&mut out, v.data());
    Ok(out)
}

pub fn decode_volume(buf: &[u8]) -> Result<Volume> {
    if buf.len() < HEADER_SIZE {
        return Err(FormatError::InvalidHeader {
            field: "sizeof_hdr",
            detail: format!(
                "file is {} bytes, shorter than the 348-byte header",
                buf.len()
            ),
        }
        .into());
    }
    let h = &buf[..HEADER_SIZE];
    let size = get_i32(h, 0);
    if size != HEADER_SIZE as i32 {
        return Err(FormatError::UnsupportedHeader(size).into());
    }
    if &h[344..348] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&h[344..348]).into_owned(),
        }
        .into());
    }
    let datatype = get_i16(h, 70);
    if datatype != DT_FLOAT32 {
        return Err(FormatError::UnsupportedDatatype(datatype).into());
    }
    let bitpix = get_i16(h, 72);
    if bitpix != 32 {
        return Err(FormatError::InvalidHeader {
            field: "bitpix",
            detail: format!("{bitpix} does not match float32"),
        }
        .into());
    }
    let dim: [i16; 8] = std::array::from_fn(|i| get_i16(h, 40 + 2 * i));
    let trailing_ok = dim[4..].iter().all(|&n| n == 1 || n == 0);
    if dim[0] != 3 || dim[1..4].iter().any(|&n| n < 1) || !trailing_ok {
        return Err(FormatError::UnsupportedDim(dim).into());
    }
    let spacing = [get_f32(h, 76 + 12), get_f32(h, 76 + 8), get_f32(h, 76 + 4)];
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(FormatError::InvalidHeader {
            field: "pixdim",
            detail: format!("spacing {spacing:?} must be positive"),
        }
        .into());
    }
    let vox_offset = get_f32(h, 108);
    if !(vox_offset >= VOX_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(FormatError::InvalidHeader {
            field: "vox_offset",
            detail: format!("{vox_offset} must be an integer >= 352"),
        }
        .into());
    }
    let (slope, inter) = (get_f32(h, 112), get_f32(h, 116));
    if !(slope == 0.0 || slope == 1.0) || inter != 0.0 {
        return Err(FormatError::InvalidHeader {
            field: "scl_slope",
            detail: format!("intensity scaling ({slope}, {inter}) is not supported"),
        }
        .into());
    }
    let dims = [dim[3] as usize, dim[2] as usize, dim[1] as usize];
    let start = vox_offset as usize;
    let expected = start + dims.iter().product::<usize>() * 4;
    if buf.len() < expected {
        return Err(FormatError::TruncatedPayload {
            expected,
            found: buf.len(),
        }
        .into());
    }
    Volume::new(dims, spacing, f32s_from_le(&buf[start..expected]))
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_volume(v)?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&read_file(path.as_ref())?)
}

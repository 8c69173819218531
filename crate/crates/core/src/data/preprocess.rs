//! Isotropic resampling, centre crop/pad and intensity normalization.

use serde::{Deserialize, Serialize};

use super::interp::sample_volume;
use super::{Provenance, Sample, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Target voxel spacing in mm; `None` keeps the native grid.
    pub target_spacing: Option<[f32; 3]>,
    /// Crop or pad to these dims after resampling.
    pub target_dims: Option<[usize; 3]>,
    pub pad_value: f32,
    pub normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing: None,
            target_dims: None,
            pad_value: 0.0,
            normalize: true,
        }
    }
}

/// Trilinear resampling onto a grid of `target_spacing` covering the same
/// physical extent; voxel centres are aligned and sampling is edge-clamped.
pub fn resample_trilinear(v: &Volume, target_spacing: [f32; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    if target_spacing == v.spacing() {
        return Ok(v.clone());
    }
    let src = v.dims();
    let sp = v.spacing();
    let mut dims = [0usize; 3];
    let mut ratio = [0f64; 3];
    for a in 0..3 {
        let extent = src[a] as f64 * sp[a] as f64;
        dims[a] = ((extent / target_spacing[a] as f64).round() as usize).max(1);
        ratio[a] = target_spacing[a] as f64 / sp[a] as f64;
    }
    let map = |i: usize, a: usize| (i as f64 + 0.5) * ratio[a] - 0.5;
    Volume::from_fn(dims, target_spacing, |z, y, x| {
        sample_volume(v, map(z, 0), map(y, 1), map(x, 2))
    })
}

/// Symmetric crop or pad on each axis; when the difference is odd the extra
/// voxel is taken from or added to the high side.
pub fn center_crop_or_pad(v: &Volume, target_dims: [usize; 3], pad_value: f32) -> Result<Volume> {
    if target_dims.contains(&0) {
        return Err(Error::invalid(format!(
            "target dims must be >= 1, got {target_dims:?}"
        )));
    }
    let src = v.dims();
    if src == target_dims {
        return Ok(v.clone());
    }
    // offset of the output origin in source coordinates; truncating division
    // leaves the odd voxel on the high side for both crop and pad
    let off: [isize; 3] = [0, 1, 2].map(|a| (src[a] as isize - target_dims[a] as isize) / 2);
    Volume::from_fn(target_dims, v.spacing(), |z, y, x| {
        let p = [
            z as isize + off[0],
            y as isize + off[1],
            x as isize + off[2],
        ];
        if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < src[a]) {
            v.get(p[0] as usize, p[1] as usize, p[2] as usize)
        } else {
            pad_value
        }
    })
}

/// Zero mean, unit variance over all voxels; a (near) constant volume is only
/// centred.
pub fn znormalize(v: &Volume) -> Volume {
    let n = v.len() as f64;
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .data()
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std < 1e-8 {
        v.map(|x| (x as f64 - mean) as f32)
    } else {
        v.map(|x| ((x as f64 - mean) / std) as f32)
    }
}

/// Zeroes every voxel where `mask` is below 0.5.
pub fn apply_mask(v: &Volume, mask: &Volume) -> Result<Volume> {
    if v.dims() != mask.dims() {
        return Err(Error::shape(format!(
            "mask {:?} does not match volume {:?}",
            mask.dims(),
            v.dims()
        )));
    }
    let mut out = v.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        if m < 0.5 {
            *o = 0.0;
        }
    }
    Ok(out)
}

/// Resample, crop/pad and normalize a subject. Images pad with `pad_value`,
/// the mask with 0; the mask is never normalized.
pub fn preprocess_sample(s: &Sample, cfg: &PreprocessConfig) -> Result<Sample> {
    let mut base = s.baseline.clone();
    let mut follow = s.followup.clone();
    let mut gt = s.gt_soft.clone();
    if let Some(sp) = cfg.target_spacing {
        base = resample_trilinear(&base, sp)?;
        follow = resample_trilinear(&follow, sp)?;
        gt = resample_trilinear(&gt, sp)?.map(|x| x.clamp(0.0, 1.0));
    }
    if let Some(d) = cfg.target_dims {
        base = center_crop_or_pad(&base, d, cfg.pad_value)?;
        follow = center_crop_or_pad(&follow, d, cfg.pad_value)?;
        gt = center_crop_or_pad(&gt, d, 0.0)?;
    }
    if cfg.normalize {
        base = znormalize(&base);
        follow = znormalize(&follow);
    }
    let provenance = match &s.provenance {
        Provenance::Derived(p) => Provenance::Derived(p.clone()),
        _ => Provenance::Derived(format!("preprocessed {}", s.subject_id)),
    };
    Sample::new(s.subject_id.clone(), base, follow, gt, provenance)
}

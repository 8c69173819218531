//! Volumes, subjects and patches, plus everything that produces them:
//! phantom generation, preprocessing, tiling, balancing, augmentation and
//! train/validation splitting.

pub mod augment;
mod interp;
pub mod patches;
pub mod phantom;
pub mod preprocess;
pub mod split;

pub use augment::AugmentConfig;
pub use patches::{balance, extract_subvolumes, grid_origins, Balanced, Patch, POSITIVE_THRESHOLD};
pub use phantom::{generate_phantom, PhantomSpec};
pub use preprocess::{center_crop_or_pad, resample_trilinear, znormalize, PreprocessConfig};
pub use split::{split_patches, split_subjects, PatchSplit};

use std::path::PathBuf;

use crate::error::{Error, Result};

/// A dense 3-D scalar field, `x` fastest, with voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!(
                "volume extents must be >= 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::shape(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        Volume::new(dims, spacing, vec![0.0; dims.iter().product()])
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f32; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Volume::new(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// True when every voxel lies in `[0, 1]`.
    pub fn is_mask_valued(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }
}

/// Where a sample came from.
#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Phantom(PhantomSpec),
    Files {
        baseline: PathBuf,
        followup: PathBuf,
        masks: Vec<PathBuf>,
    },
    Derived(String),
}

/// Baseline and follow-up images of one subject with the soft new-lesion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub baseline: Volume,
    pub followup: Volume,
    pub gt_soft: Volume,
    pub provenance: Provenance,
}

impl Sample {
    pub fn new(
        subject_id: impl Into<String>,
        baseline: Volume,
        followup: Volume,
        gt_soft: Volume,
        provenance: Provenance,
    ) -> Result<Self> {
        if !baseline.same_grid(&followup) || !baseline.same_grid(&gt_soft) {
            return Err(Error::shape(format!(
                "sample volumes disagree: baseline {:?}@{:?}, follow-up {:?}@{:?}, mask {:?}@{:?}",
                baseline.dims(),
                baseline.spacing(),
                followup.dims(),
                followup.spacing(),
                gt_soft.dims(),
                gt_soft.spacing()
            )));
        }
        if !gt_soft.is_mask_valued() {
            return Err(Error::invalid(
                "ground-truth mask values must lie in [0, 1]",
            ));
        }
        Ok(Sample {
            subject_id: subject_id.into(),
            baseline,
            followup,
            gt_soft,
            provenance,
        })
    }

    /// Averages several rater masks into one soft mask.
    pub fn average_masks(masks: &[Volume]) -> Result<Volume> {
        let first = masks
            .first()
            .ok_or_else(|| Error::invalid("at least one mask is required"))?;
        if let Some(bad) = masks.iter().find(|m| !m.same_grid(first)) {
            return Err(Error::shape(format!(
                "mask grids differ: {:?} vs {:?}",
                first.dims(),
                bad.dims()
            )));
        }
        let n = masks.len() as f64;
        let data = (0..first.len())
            .map(|i| (masks.iter().map(|m| m.data()[i] as f64).sum::<f64>() / n) as f32)
            .collect();
        let avg = Volume::new(first.dims(), first.spacing(), data)?;
        if !avg.is_mask_valued() {
            return Err(Error::invalid("rater masks must lie in [0, 1]"));
        }
        Ok(avg)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.baseline.dims()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_validation() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new([2, 2, 2], [0.0, 1.0, 1.0], vec![0.0; 8]).is_err());
        assert!(Volume::new([0, 2, 2], [1.0; 3], vec![]).is_err());
        let v =
            Volume::from_fn([2, 3, 4], [1.0; 3], |z, y, x| (z * 100 + y * 10 + x) as f32).unwrap();
        assert_eq!(v.get(1, 2, 3), 123.0);
        assert_eq!(v.data()[v.index(1, 0, 2)], 102.0);
    }

    #[test]
    fn sample_checks_grids() {
        let a = Volume::zeros([2, 2, 2], [1.0; 3]).unwrap();
        let b = Volume::zeros([2, 2, 3], [1.0; 3]).unwrap();
        assert!(Sample::new(
            "s",
            a.clone(),
            b,
            a.clone(),
            Provenance::Derived("t".into())
        )
        .is_err());
        let bad_gt = a.map(|_| 2.0);
        assert!(Sample::new(
            "s",
            a.clone(),
            a.clone(),
            bad_gt,
            Provenance::Derived("t".into())
        )
        .is_err());
    }

    #[test]
    fn rater_masks_average() {
        let ones = Volume::new([1, 1, 2], [1.0; 3], vec![1.0, 0.0]).unwrap();
        let zeros = Volume::zeros([1, 1, 2], [1.0; 3]).unwrap();
        let avg = Sample::average_masks(&[ones.clone(), zeros.clone(), ones, zeros]).unwrap();
        assert_eq!(avg.data(), &[0.5, 0.0]);
    }
}

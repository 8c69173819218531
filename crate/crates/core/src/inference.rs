//! Whole-volume prediction: sliding-window stitching, Monte-Carlo dropout
//! averaging, ensembling and thresholding.

use rayon::prelude::*;

use crate::data::{extract_subvolumes, Patch, Sample, Volume};
use crate::error::{Error, Result};
use crate::rng::derive_seed2;
use crate::tensor::Tensor;
use crate::unet::{mc_dropout_forward, Model};

/// Anything that maps one `(1, 2, S, S, S)` patch to a `(1, 1, S, S, S)`
/// prediction. `index` is the patch's position in the canonical z-major grid.
pub trait PatchPredictor: Sync {
    fn predict_patch(&self, patch: &Patch, index: usize) -> Result<Tensor>;
}

/// Runs a network on each patch, deterministically (`mc_passes == 0`) or as
/// the mean of `mc_passes` dropout-active passes.
pub struct ModelPredictor<'a> {
    pub model: &'a Model<f32>,
    pub mc_passes: usize,
    pub seed: u64,
}

impl PatchPredictor for ModelPredictor<'_> {
    fn predict_patch(&self, patch: &Patch, index: usize) -> Result<Tensor> {
        // one patch per forward: normalized ReLU divides by the max over the
        // whole tensor, so batching would couple neighbouring patches
        let x = patch.input_tensor();
        if self.mc_passes == 0 {
            self.model.predict(&x)
        } else {
            let seed = derive_seed2(self.seed, 0x4d43, index as u64);
            Ok(mc_dropout_forward(self.model, &x, self.mc_passes, seed, false)?.mean)
        }
    }
}

/// Running sum and coverage count over the padded grid.
#[derive(Clone, Debug)]
pub struct StitchAccumulator {
    dims: [usize; 3],
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl StitchAccumulator {
    pub fn new(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        StitchAccumulator {
            dims,
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn add(&mut self, origin: [usize; 3], size: usize, values: &[f32]) -> Result<()> {
        if values.len() != size * size * size || (0..3).any(|a| origin[a] + size > self.dims[a]) {
            return Err(Error::shape(format!(
                "patch at {origin:?} of size {size} does not fit {:?}",
                self.dims
            )));
        }
        let [_, h, w] = self.dims;
        for z in 0..size {
            for y in 0..size {
                let dst = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
                let src = (z * size + y) * size;
                for x in 0..size {
                    self.sum[dst + x] += values[src + x] as f64;
                    self.count[dst + x] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn count(&self) -> &[u32] {
        &self.count
    }

    /// `sum / count` cropped to the leading `dims` region.
    pub fn finish(&self, dims: [usize; 3], spacing: [f32; 3]) -> Result<Volume> {
        let [_, h, w] = self.dims;
        let mut out = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let i = (z * h + y) * w + x;
                    if self.count[i] == 0 {
                        return Err(Error::invalid(format!(
                            "voxel ({z}, {y}, {x}) is not covered by any patch"
                        )));
                    }
                    out.push((self.sum[i] / self.count[i] as f64) as f32);
                }
            }
        }
        Volume::new(dims, spacing, out)
    }
}

/// Predicts every window of the `stride` grid and averages overlaps with
/// uniform weights. Patch predictions may run in parallel; accumulation is in
/// canonical order, so the result does not depend on scheduling.
pub fn sliding_window_predict(
    predictor: &dyn PatchPredictor,
    sample: &Sample,
    size: usize,
    stride: usize,
) -> Result<Volume> {
    let patches = extract_subvolumes(sample, size, stride)?;
    let preds: Vec<Tensor> = patches
        .par_iter()
        .enumerate()
        .map(|(i, p)| predictor.predict_patch(p, i))
        .collect::<Result<_>>()?;
    let padded = [0, 1, 2].map(|a| {
        patches
            .iter()
            .map(|p| p.origin[a] + size)
            .max()
            .unwrap_or(size)
    });
    let mut acc = StitchAccumulator::new(padded);
    for (p, y) in patches.iter().zip(&preds) {
        if y.shape() != [1, 1, size, size, size] {
            return Err(Error::shape(format!(
                "patch prediction has shape {:?}",
                y.shape()
            )));
        }
        acc.add(p.origin, size, y.data())?;
    }
    acc.finish(sample.dims(), sample.baseline.spacing())
}

/// Whole-volume prediction from one network.
pub fn predict_volume(
    model: &Model<f32>,
    sample: &Sample,
    size: usize,
    stride: usize,
    mc_passes: usize,
    seed: u64,
) -> Result<Volume> {
    sliding_window_predict(
        &ModelPredictor {
            model,
            mc_passes,
            seed,
        },
        sample,
        size,
        stride,
    )
}

/// Unweighted voxelwise mean, accumulated in f64 in member order.
pub fn mean_volumes(members: &[Volume]) -> Result<Volume> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid("ensemble needs at least one member"))?;
    if let Some(bad) = members.iter().find(|m| m.dims() != first.dims()) {
        return Err(Error::shape(format!(
            "member dims differ: {:?} vs {:?}",
            first.dims(),
            bad.dims()
        )));
    }
    let n = members.len() as f64;
    let data = (0..first.len())
        .map(|i| (members.iter().map(|m| m.data()[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Volume::new(first.dims(), first.spacing(), data)
}

/// Soft average of the members' whole-volume predictions. Member `k` uses
/// the MC seed derived from `(seed, k)`.
pub fn ensemble_predict(
    models: &[Model<f32>],
    sample: &Sample,
    size: usize,
    stride: usize,
    mc_passes: usize,
    seed: u64,
) -> Result<Volume> {
    if models.is_empty() {
        return Err(Error::invalid("ensemble needs at least one member"));
    }
    let preds = models
        .iter()
        .enumerate()
        .map(|(k, m)| {
            predict_volume(
                m,
                sample,
                size,
                stride,
                mc_passes,
                derive_seed2(seed, 0x454e, k as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    mean_volumes(&preds)
}

/// 1 where `pred >= threshold`, else 0.
pub fn binarize(pred: &Volume, threshold: f32) -> Result<Volume> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(pred.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

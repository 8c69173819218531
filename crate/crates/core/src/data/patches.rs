//! Overlapping subvolume extraction and positive-class oversampling.

use log::warn;
use rand::seq::index::sample;

use super::Sample;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// A patch is positive when any target voxel reaches this value.
pub const POSITIVE_THRESHOLD: f32 = 0.5;

/// A cubic training subvolume. `channels` holds the baseline then the
/// follow-up block, each `size³` voxels, `x` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub subject_id: String,
    pub origin: [usize; 3],
    pub size: usize,
    pub channels: Vec<f32>,
    pub target: Vec<f32>,
    pub positive: bool,
}

impl Patch {
    pub fn new(
        subject_id: impl Into<String>,
        origin: [usize; 3],
        size: usize,
        channels: Vec<f32>,
        target: Vec<f32>,
    ) -> Result<Self> {
        let n = size * size * size;
        if size == 0 || channels.len() != 2 * n || target.len() != n {
            return Err(Error::shape(format!(
                "patch of size {size} needs {} channel and {n} target voxels, got {} and {}",
                2 * n,
                channels.len(),
                target.len()
            )));
        }
        let positive = is_positive(&target);
        Ok(Patch {
            subject_id: subject_id.into(),
            origin,
            size,
            channels,
            target,
            positive,
        })
    }

    pub fn voxels(&self) -> usize {
        self.size * self.size * self.size
    }

    pub fn baseline(&self) -> &[f32] {
        &self.channels[..self.voxels()]
    }

    pub fn followup(&self) -> &[f32] {
        &self.channels[self.voxels()..]
    }

    /// Recomputes the positive flag after the target changed.
    pub fn refresh_label(&mut self) {
        self.positive = is_positive(&self.target);
    }

    /// Shape `(1, 2, S, S, S)`.
    pub fn input_tensor(&self) -> Tensor {
        let s = self.size;
        Tensor::from_parts(vec![1, 2, s, s, s], self.channels.clone())
    }

    /// Shape `(1, 1, S, S, S)`.
    pub fn target_tensor(&self) -> Tensor {
        let s = self.size;
        Tensor::from_parts(vec![1, 1, s, s, s], self.target.clone())
    }
}

fn is_positive(target: &[f32]) -> bool {
    target.iter().any(|&v| v >= POSITIVE_THRESHOLD)
}

/// Stacks patches of one size into `(B, 2, S, S, S)` inputs and
/// `(B, 1, S, S, S)` targets.
pub fn stack(patches: &[&Patch]) -> Result<(Tensor, Tensor)> {
    let first = patches
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty batch"))?;
    let s = first.size;
    if patches.iter().any(|p| p.size != s) {
        return Err(Error::shape("patches in a batch must share one size"));
    }
    let mut x = Vec::with_capacity(patches.len() * first.channels.len());
    let mut y = Vec::with_capacity(patches.len() * first.target.len());
    for p in patches {
        x.extend_from_slice(&p.channels);
        y.extend_from_slice(&p.target);
    }
    let b = patches.len();
    Ok((
        Tensor::from_parts(vec![b, 2, s, s, s], x),
        Tensor::from_parts(vec![b, 1, s, s, s], y),
    ))
}

pub(crate) fn check_window(size: usize, stride: usize) -> Result<()> {
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::invalid(format!(
            "patch size {size} must be a positive multiple of 16"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    if stride > size {
        return Err(Error::invalid(format!(
            "stride {stride} larger than patch size {size} would leave gaps"
        )));
    }
    Ok(())
}

/// Window start offsets along one axis of extent `dim`; the last window may
/// run past the end, into high-side zero padding.
pub fn grid_origins(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    let n = if dim <= size {
        1
    } else {
        (dim - size).div_ceil(stride) + 1
    };
    (0..n).map(|i| i * stride).collect()
}

/// Extent after high-side padding so that the window grid covers every voxel.
pub fn padded_extent(dim: usize, size: usize, stride: usize) -> usize {
    grid_origins(dim, size, stride)
        .last()
        .map_or(size, |&o| o + size)
}

/// Every window of the `stride` grid, z-major, reading zeros past the end of
/// the volume.
pub fn extract_subvolumes(s: &Sample, size: usize, stride: usize) -> Result<Vec<Patch>> {
    check_window(size, stride)?;
    let dims = s.dims();
    let grids: Vec<Vec<usize>> = (0..3)
        .map(|a| grid_origins(dims[a], size, stride))
        .collect();
    let n = size * size * size;
    let mut out = Vec::with_capacity(grids.iter().map(Vec::len).product());
    for &oz in &grids[0] {
        for &oy in &grids[1] {
            for &ox in &grids[2] {
                let mut channels = vec![0.0f32; 2 * n];
                let mut target = vec![0.0f32; n];
                let (b, f) = channels.split_at_mut(n);
                let xs = size.min(dims[2].saturating_sub(ox));
                for z in 0..size.min(dims[0].saturating_sub(oz)) {
                    for y in 0..size.min(dims[1].saturating_sub(oy)) {
                        let src = s.baseline.index(oz + z, oy + y, ox);
                        let dst = (z * size + y) * size;
                        b[dst..dst + xs].copy_from_slice(&s.baseline.data()[src..src + xs]);
                        f[dst..dst + xs].copy_from_slice(&s.followup.data()[src..src + xs]);
                        target[dst..dst + xs].copy_from_slice(&s.gt_soft.data()[src..src + xs]);
                    }
                }
                out.push(Patch::new(
                    s.subject_id.clone(),
                    [oz, oy, ox],
                    size,
                    channels,
                    target,
                )?);
            }
        }
    }
    Ok(out)
}

/// Result of [`balance`]. `balanced` is false when one class was empty and
/// the input came back unchanged.
#[derive(Clone, Debug)]
pub struct Balanced {
    pub patches: Vec<Patch>,
    pub balanced: bool,
}

/// Oversamples the minority class up to the majority count: every minority
/// patch gets `floor(Nmaj/Nmin) - 1` extra copies, then `Nmaj mod Nmin` of
/// them, drawn without replacement, get one more. Originals keep their order
/// and the copies follow.
pub fn balance(patches: Vec<Patch>, rng: &mut RngState) -> Balanced {
    let pos: Vec<usize> = (0..patches.len())
        .filter(|&i| patches[i].positive)
        .collect();
    let n_pos = pos.len();
    let n_neg = patches.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        warn!("cannot balance {n_pos} positive and {n_neg} negative patches; leaving them as is");
        return Balanced {
            patches,
            balanced: false,
        };
    }
    if n_pos == n_neg {
        return Balanced {
            patches,
            balanced: true,
        };
    }
    let minority: Vec<usize> = if n_pos < n_neg {
        pos
    } else {
        (0..patches.len())
            .filter(|&i| !patches[i].positive)
            .collect()
    };
    let major = n_pos.max(n_neg);
    let k = minority.len();
    let extra_rounds = major / k - 1;
    let remainder = major % k;
    let mut copies = Vec::with_capacity(major - k);
    for _ in 0..extra_rounds {
        copies.extend(minority.iter().copied());
    }
    let mut chosen = sample(rng, k, remainder).into_vec();
    chosen.sort_unstable();
    copies.extend(chosen.into_iter().map(|j| minority[j]));
    let mut out = patches;
    out.reserve(copies.len());
    for i in copies {
        let p = out[i].clone();
        out.push(p);
    }
    Balanced {
        patches: out,
        balanced: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Provenance, Volume};
    use crate::rng::rng_from_seed;

    fn sample_with(dims: [usize; 3], gt: impl Fn(usize, usize, usize) -> f32) -> Sample {
        let base =
            Volume::from_fn(dims, [1.0; 3], |z, y, x| (z * 10000 + y * 100 + x) as f32).unwrap();
        let follow = base.map(|v| -v);
        let g = Volume::from_fn(dims, [1.0; 3], gt).unwrap();
        Sample::new("t", base, follow, g, Provenance::Derived("test".into())).unwrap()
    }

    fn tagged(n_pos: usize, n_neg: usize) -> Vec<Patch> {
        (0..n_pos + n_neg)
            .map(|i| {
                let t = if i < n_pos { 1.0 } else { 0.0 };
                Patch::new(
                    format!("p{i}"),
                    [0; 3],
                    16,
                    vec![0.0; 2 * 4096],
                    vec![t; 4096],
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn window_validation() {
        assert!(check_window(32, 0).is_err());
        assert!(check_window(32, 33).is_err());
        assert!(check_window(24, 8).is_err());
        assert!(check_window(32, 32).is_ok());
    }

    #[test]
    fn grid_arithmetic() {
        assert_eq!(grid_origins(64, 32, 32), vec![0, 32]);
        assert_eq!(grid_origins(64, 32, 16), vec![0, 16, 32]);
        assert_eq!(grid_origins(70, 32, 32), vec![0, 32, 64]);
        assert_eq!(padded_extent(70, 32, 32), 96);
        assert_eq!(grid_origins(10, 32, 16), vec![0]);
    }

    /// Fewest multiples of `stride` whose windows reach every voxel.
    fn covering_oracle(dim: usize, size: usize, stride: usize) -> usize {
        let mut covered = vec![false; dim];
        let mut n = 0;
        while covered.iter().any(|c| !c) {
            let o = n * stride;
            covered
                .iter_mut()
                .skip(o)
                .take(size)
                .for_each(|c| *c = true);
            n += 1;
        }
        n
    }

    #[test]
    fn grid_matches_covering_oracle() {
        for dim in 1..80 {
            for size in [16, 32, 48] {
                for stride in [1, 5, 8, 16, 24, 32, 48] {
                    if stride <= size {
                        assert_eq!(
                            grid_origins(dim, size, stride).len(),
                            covering_oracle(dim, size, stride)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn disjoint_tiling_partitions_volume() {
        let s = sample_with([64, 64, 64], |_, _, _| 0.0);
        let ps = extract_subvolumes(&s, 32, 32).unwrap();
        assert_eq!(ps.len(), 8);
        assert!(ps.iter().all(|p| !p.positive));
        let mut seen = vec![0u8; 64 * 64 * 64];
        for p in &ps {
            for z in 0..32 {
                for y in 0..32 {
                    for x in 0..32 {
                        let (gz, gy, gx) = (p.origin[0] + z, p.origin[1] + y, p.origin[2] + x);
                        seen[s.baseline.index(gz, gy, gx)] += 1;
                        assert_eq!(
                            p.baseline()[(z * 32 + y) * 32 + x],
                            s.baseline.get(gz, gy, gx)
                        );
                        assert_eq!(
                            p.followup()[(z * 32 + y) * 32 + x],
                            s.followup.get(gz, gy, gx)
                        );
                    }
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(extract_subvolumes(&s, 32, 16).unwrap().len(), 27);
    }

    #[test]
    fn ordering_is_z_major_and_padding_is_zero() {
        let s = sample_with([20, 16, 40], |z, _, _| if z == 19 { 0.7 } else { 0.0 });
        let ps = extract_subvolumes(&s, 16, 16).unwrap();
        let origins: Vec<[usize; 3]> = ps.iter().map(|p| p.origin).collect();
        assert_eq!(origins[..3], [[0, 0, 0], [0, 0, 16], [0, 0, 32]]);
        assert_eq!(origins[3], [16, 0, 0]);
        let last = &ps[5];
        // x past 40 and z past 20 read as zero
        assert_eq!(last.baseline()[10], 0.0);
        assert_eq!(last.baseline()[(5 * 16) * 16], 0.0);
        assert!(last.positive && !ps[0].positive);
    }

    #[test]
    fn balance_exact_division() {
        let b = balance(tagged(10, 40), &mut rng_from_seed(0));
        assert!(b.balanced);
        assert_eq!(b.patches.iter().filter(|p| p.positive).count(), 40);
        assert_eq!(b.patches.len(), 80);
    }

    #[test]
    fn balance_remainder() {
        let b = balance(tagged(3, 7), &mut rng_from_seed(1));
        let mut per = std::collections::HashMap::new();
        for p in b.patches.iter().filter(|p| p.positive) {
            *per.entry(p.subject_id.clone()).or_insert(0) += 1;
        }
        let mut counts: Vec<i32> = per.values().copied().collect();
        counts.sort();
        assert_eq!(counts, vec![2, 2, 3]);
        // originals first, in order
        assert_eq!(b.patches[..10], tagged(3, 7)[..]);
    }

    #[test]
    fn balance_degenerate_cases() {
        let same = tagged(5, 5);
        assert_eq!(balance(same.clone(), &mut rng_from_seed(0)).patches, same);
        let none = tagged(0, 4);
        let b = balance(none.clone(), &mut rng_from_seed(0));
        assert!(!b.balanced);
        assert_eq!(b.patches, none);
        let b = balance(tagged(7, 3), &mut rng_from_seed(0));
        assert_eq!(b.patches.iter().filter(|p| !p.positive).count(), 7);
    }
}

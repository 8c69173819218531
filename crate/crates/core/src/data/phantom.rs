//! Synthetic longitudinal FLAIR-like pairs with known new lesions.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Provenance, Sample, Volume};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Standard deviation (voxels) of the Gaussian blobs forming the background.
    pub background_scale: f64,
    pub background_blobs: usize,
    pub shared_lesions: usize,
    /// Per-axis semi-axis range (voxels) of lesions present at both timepoints.
    pub shared_radius: [f64; 2],
    pub new_lesions: usize,
    pub new_radius: [f64; 2],
    /// Intensity added inside a lesion.
    pub contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            spacing: [1.0; 3],
            background_scale: 8.0,
            background_blobs: 12,
            shared_lesions: 3,
            shared_radius: [2.0, 4.0],
            new_lesions: 2,
            new_radius: [3.0, 5.0],
            contrast: 1.0,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::invalid(format!(
                "phantom dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("phantom spacing must be positive"));
        }
        if !(self.background_scale > 0.0) {
            return Err(Error::invalid("background scale must be positive"));
        }
        if !(self.contrast > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid(
                "contrast must be positive and noise sigma non-negative",
            ));
        }
        for (name, r, count) in [
            ("shared", self.shared_radius, self.shared_lesions),
            ("new", self.new_radius, self.new_lesions),
        ] {
            if !(r[0] > 0.0) || !(r[1] >= r[0]) {
                return Err(Error::invalid(format!(
                    "{name} lesion radius range {r:?} is not a positive interval"
                )));
            }
            if count > 0 {
                for (axis, &d) in self.dims.iter().enumerate() {
                    if 2.0 * r[1] + 1.0 > d as f64 {
                        return Err(Error::invalid(format!(
                            "{name} lesion radius {} does not fit axis {axis} of extent {d}",
                            r[1]
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn random(dims: [usize; 3], range: [f64; 2], rng: &mut RngState) -> Self {
        let mut radii = [0.0; 3];
        let mut center = [0.0; 3];
        for a in 0..3 {
            radii[a] = if range[1] > range[0] {
                rng.random_range(range[0]..=range[1])
            } else {
                range[0]
            };
            // keep the whole ellipsoid inside the voxel grid
            let lo = radii[a] - 0.5;
            let hi = dims[a] as f64 - 0.5 - radii[a];
            center[a] = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                (lo + hi) / 2.0
            };
        }
        Ellipsoid { center, radii }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Adds this ellipsoid's partial-volume occupancy, rendered on a grid of
    /// twice the resolution and box-averaged, into `out`.
    fn splat(&self, dims: [usize; 3], out: &mut [f64]) {
        let lo = |a: usize| ((self.center[a] - self.radii[a] - 1.0).floor().max(0.0)) as usize;
        let hi =
            |a: usize| ((self.center[a] + self.radii[a] + 1.0).ceil() as usize).min(dims[a] - 1);
        const OFF: [f64; 2] = [-0.25, 0.25];
        for z in lo(0)..=hi(0) {
            for y in lo(1)..=hi(1) {
                for x in lo(2)..=hi(2) {
                    let mut hits = 0u32;
                    for dz in OFF {
                        for dy in OFF {
                            for dx in OFF {
                                hits += self.contains([z as f64 + dz, y as f64 + dy, x as f64 + dx])
                                    as u32;
                            }
                        }
                    }
                    out[(z * dims[1] + y) * dims[2] + x] += hits as f64 / 8.0;
                }
            }
        }
    }
}

fn background(spec: &PhantomSpec, rng: &mut RngState) -> Vec<f64> {
    let d = spec.dims;
    let blobs: Vec<([f64; 3], f64)> = (0..spec.background_blobs)
        .map(|_| {
            let c = [0, 1, 2].map(|a| rng.random_range(0.0..d[a] as f64));
            (c, rng.random_range(-0.2..0.3))
        })
        .collect();
    let inv = 1.0 / (2.0 * spec.background_scale * spec.background_scale);
    let mut out = Vec::with_capacity(d.iter().product());
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let p = [z as f64, y as f64, x as f64];
                let v: f64 = blobs
                    .iter()
                    .map(|(c, amp)| {
                        let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                        amp * (-r2 * inv).exp()
                    })
                    .sum();
                out.push(0.5 + v);
            }
        }
    }
    out
}

/// Builds a baseline/follow-up pair sharing a smooth background and "old"
/// lesions, with new lesions in the follow-up only; the soft mask marks the
/// new lesions with partial-volume boundary values.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Sample> {
    spec.validate()?;
    let d = spec.dims;
    let n: usize = d.iter().product();
    let mut geo = rng_from_seed(derive_seed(spec.seed, 0));
    let bg = background(spec, &mut geo);

    let mut old = vec![0.0f64; n];
    for _ in 0..spec.shared_lesions {
        Ellipsoid::random(d, spec.shared_radius, &mut geo).splat(d, &mut old);
    }
    let mut new = vec![0.0f64; n];
    for _ in 0..spec.new_lesions {
        Ellipsoid::random(d, spec.new_radius, &mut geo).splat(d, &mut new);
    }

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rb = rng_from_seed(derive_seed(spec.seed, 1));
    let mut rf = rng_from_seed(derive_seed(spec.seed, 2));
    let mut base = Vec::with_capacity(n);
    let mut follow = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    for i in 0..n {
        let o = old[i].min(1.0);
        let l = (old[i] + new[i]).min(1.0);
        base.push((bg[i] + spec.contrast * o + noise.sample(&mut rb)) as f32);
        follow.push((bg[i] + spec.contrast * l + noise.sample(&mut rf)) as f32);
        gt.push(new[i].min(1.0) as f32);
    }
    let vol = |data| Volume::new(d, spec.spacing, data);
    Sample::new(
        format!("phantom-{}", spec.seed),
        vol(base)?,
        vol(follow)?,
        vol(gt)?,
        Provenance::Phantom(spec.clone()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims: [24, 24, 24],
            new_radius: [2.0, 3.0],
            shared_radius: [1.5, 2.5],
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn no_new_lesions_gives_empty_mask() {
        let s = generate_phantom(&PhantomSpec {
            new_lesions: 0,
            ..small(3)
        })
        .unwrap();
        assert!(s.gt_soft.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(
            generate_phantom(&small(7)).unwrap(),
            generate_phantom(&small(7)).unwrap()
        );
        assert_ne!(
            generate_phantom(&small(7)).unwrap().followup,
            generate_phantom(&small(8)).unwrap().followup
        );
    }

    #[test]
    fn rendered_sphere_matches_analytic_volume() {
        let spec = PhantomSpec {
            new_lesions: 1,
            new_radius: [5.0, 5.0],
            shared_lesions: 0,
            seed: 11,
            ..Default::default()
        };
        let s = generate_phantom(&spec).unwrap();
        let sum: f64 = s.gt_soft.data().iter().map(|&v| v as f64).sum();
        let analytic = 4.0 / 3.0 * PI * 125.0;
        assert!(
            (sum - analytic).abs() / analytic < 0.1,
            "sum {sum} vs {analytic}"
        );
        // partial-volume boundary exists
        assert!(s.gt_soft.data().iter().any(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn new_lesions_only_in_followup() {
        let s = generate_phantom(&PhantomSpec {
            noise_sigma: 0.0,
            ..small(5)
        })
        .unwrap();
        let mut diff_outside = 0.0f64;
        let mut diff_inside = 0.0f64;
        for i in 0..s.gt_soft.len() {
            let d = (s.followup.data()[i] - s.baseline.data()[i]) as f64;
            if s.gt_soft.data()[i] == 0.0 {
                diff_outside = diff_outside.max(d.abs());
            } else {
                diff_inside = diff_inside.max(d);
            }
        }
        assert_eq!(diff_outside, 0.0);
        assert!(diff_inside > 0.5);
    }

    #[test]
    fn oversized_lesion_rejected() {
        let spec = PhantomSpec {
            dims: [8, 8, 8],
            new_radius: [5.0, 5.0],
            ..Default::default()
        };
        assert!(generate_phantom(&spec).is_err());
        let spec = PhantomSpec {
            new_radius: [3.0, 2.0],
            ..small(0)
        };
        assert!(spec.validate().is_err());
    }
}

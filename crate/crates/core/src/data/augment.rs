//! Training-time augmentations. Every geometric transform resamples the image
//! channels and the soft target through the same coordinate map.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::interp::trilinear;
use super::Patch;
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineParams {
    pub max_rotation_deg: f64,
    pub scale_range: [f64; 2],
    pub max_translation: f64,
}

impl Default for AffineParams {
    fn default() -> Self {
        AffineParams {
            max_rotation_deg: 15.0,
            scale_range: [0.95, 1.05],
            max_translation: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticParams {
    /// Gaussian smoothing of the white-noise field, in voxels.
    pub sigma: f64,
    /// Largest displacement, in voxels.
    pub alpha: f64,
}

impl Default for ElasticParams {
    fn default() -> Self {
        ElasticParams {
            sigma: 4.0,
            alpha: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasFieldParams {
    pub order: usize,
    pub max_coefficient: f64,
}

impl Default for BiasFieldParams {
    fn default() -> Self {
        BiasFieldParams {
            order: 3,
            max_coefficient: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    pub affine: AffineParams,
    pub elastic: ElasticParams,
    pub bias_field: BiasFieldParams,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            flip_prob: 0.5,
            affine: AffineParams::default(),
            elastic: ElasticParams::default(),
            bias_field: BiasFieldParams::default(),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip probability must lie in [0, 1]");
        }
        let a = &self.affine;
        if !(a.max_rotation_deg >= 0.0) || !(a.max_translation >= 0.0) {
            return bad("affine rotation and translation bounds must be non-negative");
        }
        if !(a.scale_range[0] > 0.0) || !(a.scale_range[1] >= a.scale_range[0]) {
            return bad("affine scale range must be a positive interval");
        }
        if !(self.elastic.sigma > 0.0) || !(self.elastic.alpha >= 0.0) {
            return bad("elastic sigma must be positive and alpha non-negative");
        }
        if !(self.bias_field.max_coefficient >= 0.0) {
            return bad("bias-field coefficient bound must be non-negative");
        }
        Ok(())
    }
}

/// Applies flip, affine, elastic and bias-field augmentation in that order.
pub fn augment(p: &Patch, cfg: &AugmentConfig, rng: &mut RngState) -> Patch {
    if !cfg.enabled {
        return p.clone();
    }
    let out = flip_lr(p, rng, cfg.flip_prob);
    let out = random_affine(&out, rng, &cfg.affine);
    let out = random_elastic(&out, rng, &cfg.elastic);
    random_bias_field(&out, rng, &cfg.bias_field)
}

/// Resamples every channel and the target at `map(z, y, x)`.
fn warp(p: &Patch, map: impl Fn(usize, usize, usize) -> [f64; 3]) -> Patch {
    let s = p.size;
    let n = p.voxels();
    let dims = [s; 3];
    let mut channels = vec![0.0f32; 2 * n];
    let mut target = vec![0.0f32; n];
    let mut i = 0;
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let [qz, qy, qx] = map(z, y, x);
                channels[i] = trilinear(p.baseline(), dims, qz, qy, qx);
                channels[n + i] = trilinear(p.followup(), dims, qz, qy, qx);
                target[i] = trilinear(&p.target, dims, qz, qy, qx).clamp(0.0, 1.0);
                i += 1;
            }
        }
    }
    let mut out = Patch {
        channels,
        target,
        ..p.clone()
    };
    out.refresh_label();
    out
}

/// Reverses the W axis with probability `prob`.
pub fn flip_lr(p: &Patch, rng: &mut RngState, prob: f64) -> Patch {
    if prob > 0.0 && rng.random::<f64>() < prob {
        flip_w(p)
    } else {
        p.clone()
    }
}

/// Unconditional W-axis reversal.
pub fn flip_w(p: &Patch) -> Patch {
    let s = p.size;
    let mut out = p.clone();
    for row in out
        .channels
        .chunks_exact_mut(s)
        .chain(out.target.chunks_exact_mut(s))
    {
        row.reverse();
    }
    out
}

/// Rotation (degrees, about the z, y and x axes), isotropic scale and
/// translation (voxels) about the patch centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub rotation_deg: [f64; 3],
    pub scale: f64,
    pub translation: [f64; 3],
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            rotation_deg: [0.0; 3],
            scale: 1.0,
            translation: [0.0; 3],
        }
    }

    pub fn sample(rng: &mut RngState, params: &AffineParams) -> Self {
        let mut sym = |m: f64| {
            if m > 0.0 {
                rng.random_range(-m..=m)
            } else {
                0.0
            }
        };
        let rotation_deg = [
            sym(params.max_rotation_deg),
            sym(params.max_rotation_deg),
            sym(params.max_rotation_deg),
        ];
        let translation = [
            sym(params.max_translation),
            sym(params.max_translation),
            sym(params.max_translation),
        ];
        let [lo, hi] = params.scale_range;
        let scale = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        AffineTransform {
            rotation_deg,
            scale,
            translation,
        }
    }

    /// Rotation matrix acting on `(z, y, x)` coordinate vectors.
    fn rotation(&self) -> [[f64; 3]; 3] {
        let rot = |axis: usize, deg: f64| {
            let (s, c) = deg.to_radians().sin_cos();
            let (i, j) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let mut m = [[0.0; 3]; 3];
            m[axis][axis] = 1.0;
            m[i][i] = c;
            m[j][j] = c;
            m[i][j] = -s;
            m[j][i] = s;
            m
        };
        let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
            let mut m = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
                }
            }
            m
        };
        mul(
            mul(rot(0, self.rotation_deg[0]), rot(1, self.rotation_deg[1])),
            rot(2, self.rotation_deg[2]),
        )
    }

    /// Output voxel `p` samples the input at `R^T (p - c - t) / scale + c`.
    pub fn apply(&self, p: &Patch) -> Patch {
        let r = self.rotation();
        let c = (p.size as f64 - 1.0) / 2.0;
        let t = self.translation;
        let inv_s = 1.0 / self.scale;
        warp(p, |z, y, x| {
            let d = [
                z as f64 - c - t[0],
                y as f64 - c - t[1],
                x as f64 - c - t[2],
            ];
            [0, 1, 2].map(|i| (r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2]) * inv_s + c)
        })
    }
}

pub fn random_affine(p: &Patch, rng: &mut RngState, params: &AffineParams) -> Patch {
    AffineTransform::sample(rng, params).apply(p)
}

/// Dense per-voxel displacement, one component per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub size: usize,
    pub components: [Vec<f64>; 3],
}

impl DisplacementField {
    /// Gaussian-smoothed white noise rescaled so its largest vector norm is
    /// exactly `alpha` (or zero when `alpha` is zero).
    pub fn sample(size: usize, rng: &mut RngState, params: &ElasticParams) -> Self {
        let n = size * size * size;
        let mut components: [Vec<f64>; 3] = Default::default();
        for c in components.iter_mut() {
            let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            *c = gaussian_smooth(&noise, size, params.sigma);
        }
        let max = (0..n)
            .map(|i| components.iter().map(|c| c[i] * c[i]).sum::<f64>().sqrt())
            .fold(0.0f64, f64::max);
        let k = if max > 0.0 { params.alpha / max } else { 0.0 };
        for c in components.iter_mut() {
            c.iter_mut().for_each(|v| *v *= k);
        }
        DisplacementField { size, components }
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.components[0].len())
            .map(|i| {
                self.components
                    .iter()
                    .map(|c| c[i] * c[i])
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn apply(&self, p: &Patch) -> Result<Patch> {
        if p.size != self.size {
            return Err(Error::shape(format!(
                "displacement field of size {} applied to patch of size {}",
                self.size, p.size
            )));
        }
        let s = self.size;
        let [dz, dy, dx] = &self.components;
        Ok(warp(p, |z, y, x| {
            let i = (z * s + y) * s + x;
            [z as f64 + dz[i], y as f64 + dy[i], x as f64 + dx[i]]
        }))
    }
}

/// Separable Gaussian filter on a cube with replicated edges.
fn gaussian_smooth(data: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= total);
    let mut cur = data.to_vec();
    let strides = [size * size, size, 1];
    for &stride in &strides {
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / stride % size) as isize;
            let base = i - pos as usize * stride;
            *out = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let q = (pos + k as isize - radius).clamp(0, size as isize - 1) as usize;
                    w * cur[base + q * stride]
                })
                .sum();
        }
        cur = next;
    }
    cur
}

pub fn random_elastic(p: &Patch, rng: &mut RngState, params: &ElasticParams) -> Patch {
    DisplacementField::sample(p.size, rng, params)
        .apply(p)
        .expect("field sampled at the patch size")
}

/// Smooth multiplicative intensity field `exp(sum c_ijk u^i v^j w^k)` over
/// coordinates normalized to `[-1, 1]`, with `i + j + k <= order`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasField {
    pub order: usize,
    /// Coefficients in the order given by [`BiasField::exponents`].
    pub coefficients: Vec<f64>,
}

impl BiasField {
    pub fn exponents(order: usize) -> Vec<[i32; 3]> {
        let mut out = Vec::new();
        for i in 0..=order as i32 {
            for j in 0..=order as i32 - i {
                for k in 0..=order as i32 - i - j {
                    out.push([i, j, k]);
                }
            }
        }
        out
    }

    pub fn sample(rng: &mut RngState, params: &BiasFieldParams) -> Self {
        let m = params.max_coefficient;
        let coefficients = Self::exponents(params.order)
            .iter()
            .map(|_| {
                if m > 0.0 {
                    rng.random_range(-m..=m)
                } else {
                    0.0
                }
            })
            .collect();
        BiasField {
            order: params.order,
            coefficients,
        }
    }

    /// The multiplier at every voxel of a `size³` cube, `x` fastest.
    pub fn multiplier(&self, size: usize) -> Vec<f64> {
        let exps = Self::exponents(self.order);
        let norm = |i: usize| {
            if size > 1 {
                2.0 * i as f64 / (size - 1) as f64 - 1.0
            } else {
                0.0
            }
        };
        let mut out = Vec::with_capacity(size * size * size);
        for z in 0..size {
            for y in 0..size {
                for x in 0..size {
                    let (u, v, w) = (norm(z), norm(y), norm(x));
                    let poly: f64 = exps
                        .iter()
                        .zip(&self.coefficients)
                        .map(|(e, c)| c * u.powi(e[0]) * v.powi(e[1]) * w.powi(e[2]))
                        .sum();
                    out.push(poly.exp());
                }
            }
        }
        out
    }

    /// Scales both image channels; the target is untouched.
    pub fn apply(&self, p: &Patch) -> Patch {
        let field = self.multiplier(p.size);
        let mut out = p.clone();
        for block in out.channels.chunks_exact_mut(field.len()) {
            for (v, m) in block.iter_mut().zip(&field) {
                *v = (*v as f64 * m) as f32;
            }
        }
        out
    }
}

pub fn random_bias_field(p: &Patch, rng: &mut RngState, params: &BiasFieldParams) -> Patch {
    BiasField::sample(rng, params).apply(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn marker_patch(size: usize, at: [usize; 3]) -> Patch {
        let n = size * size * size;
        let idx = (at[0] * size + at[1]) * size + at[2];
        let mut channels: Vec<f32> = (0..2 * n).map(|i| (i % 7) as f32 * 0.01).collect();
        channels[idx] = 10.0;
        channels[n + idx] = 20.0;
        let mut target = vec![0.0; n];
        target[idx] = 1.0;
        Patch::new("m", [0; 3], size, channels, target).unwrap()
    }

    fn argmax(v: &[f32]) -> usize {
        (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
    }

    #[test]
    fn flip_cases() {
        let p = marker_patch(16, [3, 4, 5]);
        assert_eq!(flip_w(&flip_w(&p)), p);
        assert_eq!(flip_lr(&p, &mut rng_from_seed(0), 0.0), p);
        let f = flip_lr(&p, &mut rng_from_seed(0), 1.0);
        let want = (3 * 16 + 4) * 16 + (16 - 1 - 5);
        assert_eq!(argmax(f.baseline()), want);
        assert_eq!(argmax(f.followup()), want);
        assert_eq!(argmax(&f.target), want);
    }

    #[test]
    fn affine_identity_and_translation() {
        let p = marker_patch(16, [7, 8, 9]);
        assert_eq!(AffineTransform::identity().apply(&p), p);
        let t = AffineTransform {
            translation: [2.0, -1.0, 3.0],
            ..AffineTransform::identity()
        };
        let q = t.apply(&p);
        let s = 16;
        for z in 2..s {
            for y in 0..s - 1 {
                for x in 3..s {
                    let dst = (z * s + y) * s + x;
                    let src = ((z - 2) * s + (y + 1)) * s + (x - 3);
                    assert_eq!(q.channels[dst], p.channels[src]);
                    assert_eq!(q.target[dst], p.target[src]);
                }
            }
        }
        assert_eq!(argmax(&q.target), (9 * s + 7) * s + 12);
    }

    #[test]
    fn affine_rotation_keeps_pairing_and_range() {
        let mut rng = rng_from_seed(5);
        let mut p = marker_patch(16, [6, 7, 8]);
        p.target
            .iter_mut()
            .enumerate()
            .for_each(|(i, t)| *t = ((i * 37) % 11) as f32 / 10.0);
        for _ in 0..5 {
            let q = random_affine(&p, &mut rng, &AffineParams::default());
            assert!(q.target.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let p = marker_patch(16, [6, 7, 8]);
        let t = AffineTransform {
            rotation_deg: [90.0, 0.0, 0.0],
            ..AffineTransform::identity()
        };
        let q = t.apply(&p);
        assert_eq!(argmax(q.baseline()), argmax(&q.target));
        assert_eq!(argmax(q.followup()), argmax(&q.target));
    }

    #[test]
    fn elastic_cases() {
        let p = marker_patch(16, [8, 8, 8]);
        let none = ElasticParams {
            alpha: 0.0,
            ..Default::default()
        };
        assert_eq!(random_elastic(&p, &mut rng_from_seed(1), &none), p);

        let params = ElasticParams::default();
        let field = DisplacementField::sample(16, &mut rng_from_seed(2), &params);
        assert!(field.max_norm() <= params.alpha + 1e-12);
        assert!(field.max_norm() > params.alpha * 0.999);

        let a = random_elastic(&p, &mut rng_from_seed(3), &params);
        let b = random_elastic(&p, &mut rng_from_seed(3), &params);
        assert_eq!(a, b);
        assert_eq!(argmax(a.baseline()), argmax(&a.target));
        assert_eq!(argmax(a.followup()), argmax(&a.target));
    }

    #[test]
    fn bias_field_cases() {
        let p = marker_patch(16, [1, 2, 3]);
        let zero = BiasField {
            order: 3,
            coefficients: vec![0.0; 20],
        };
        assert_eq!(zero.apply(&p), p);
        assert_eq!(BiasField::exponents(3).len(), 20);
        let mut rng = rng_from_seed(4);
        for _ in 0..5 {
            let f = BiasField::sample(&mut rng, &BiasFieldParams::default());
            assert!(f.multiplier(16).iter().all(|&m| m > 0.0));
            let q = f.apply(&p);
            assert_eq!(q.target, p.target);
        }
    }

    #[test]
    fn full_chain_is_seeded() {
        let p = marker_patch(16, [4, 5, 6]);
        let cfg = AugmentConfig::default();
        assert_eq!(
            augment(&p, &cfg, &mut rng_from_seed(9)),
            augment(&p, &cfg, &mut rng_from_seed(9))
        );
        assert_eq!(
            augment(&p, &AugmentConfig::disabled(), &mut rng_from_seed(9)),
            p
        );
        assert!(cfg.validate().is_ok());
        assert!(AugmentConfig {
            flip_prob: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}

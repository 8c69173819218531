use super::Volume;

/// Linear interpolation with edge clamping along one axis: returns the lower
/// index, the upper index and the fractional weight of the upper one.
#[inline]
fn axis(coord: f64, extent: usize) -> (usize, usize, f64) {
    let max = (extent - 1) as f64;
    let c = coord.clamp(0.0, max);
    let lo = c.floor();
    let i0 = lo as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, c - lo)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Trilinear sample of a `dims` grid stored `x` fastest at continuous voxel
/// coordinates `(z, y, x)`; coordinates outside the grid are clamped.
pub(crate) fn trilinear(data: &[f32], dims: [usize; 3], z: f64, y: f64, x: f64) -> f32 {
    let (z0, z1, tz) = axis(z, dims[0]);
    let (y0, y1, ty) = axis(y, dims[1]);
    let (x0, x1, tx) = axis(x, dims[2]);
    let at = |zz: usize, yy: usize, xx: usize| data[(zz * dims[1] + yy) * dims[2] + xx] as f64;
    let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), tx);
    let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), tx);
    let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), tx);
    let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), tx);
    lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz) as f32
}

pub(crate) fn sample_volume(v: &Volume, z: f64, y: f64, x: f64) -> f32 {
    trilinear(v.data(), v.dims(), z, y, x)
}

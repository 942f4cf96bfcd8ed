//! Differentiable trilinear warping by dense displacement fields.
//!
//! A field stores one displacement per voxel, in voxel units of its own grid,
//! ordered `(Δd, Δh, Δw)` as three planar channels. Warping samples the
//! moving image at `v + disp(v)`; coordinates outside the grid are clamped to
//! the border.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Dims, LabelVolume, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField<T> {
    dims: Dims,
    disp: Vec<T>,
    /// Pyramid level: 0 is full resolution.
    pub level: usize,
}

impl<T: Scalar> DeformationField<T> {
    pub fn new(dims: Dims, disp: Vec<T>, level: usize) -> Result<Self> {
        if disp.len() != 3 * dims.voxels() {
            return Err(Error::DimMismatch(format!(
                "field {dims} needs {} displacement values, got {}",
                3 * dims.voxels(),
                disp.len()
            )));
        }
        if let Some(i) = disp.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(DeformationField { dims, disp, level })
    }

    pub fn zeros(dims: Dims, level: usize) -> Self {
        DeformationField {
            dims,
            disp: vec![T::zero(); 3 * dims.voxels()],
            level,
        }
    }

    /// Same displacement at every voxel.
    pub fn uniform(dims: Dims, level: usize, disp: [T; 3]) -> Self {
        let n = dims.voxels();
        let mut data = Vec::with_capacity(3 * n);
        for v in disp {
            data.extend(std::iter::repeat_n(v, n));
        }
        DeformationField {
            dims,
            disp: data,
            level,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Planar displacement data, channel `c` at `[c * N, (c + 1) * N)`.
    pub fn disp(&self) -> &[T] {
        &self.disp
    }

    pub fn disp_mut(&mut self) -> &mut [T] {
        &mut self.disp
    }

    pub fn into_disp(self) -> Vec<T> {
        self.disp
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.dims.voxels();
        &self.disp[c * n..(c + 1) * n]
    }

    /// Displacement vector at raster index `i`.
    pub fn at(&self, i: usize) -> [T; 3] {
        let n = self.dims.voxels();
        [self.disp[i], self.disp[n + i], self.disp[2 * n + i]]
    }

    pub fn cast<U: Scalar>(&self) -> DeformationField<U> {
        DeformationField {
            dims: self.dims,
            disp: self.disp.iter().map(|v| U::of(v.as_f64())).collect(),
            level: self.level,
        }
    }

    /// Mean Euclidean displacement length.
    pub fn mean_magnitude(&self) -> f64 {
        let n = self.dims.voxels();
        let total: f64 = (0..n)
            .map(|i| {
                let [a, b, c] = self.at(i).map(|v| v.as_f64());
                (a * a + b * b + c * c).sqrt()
            })
            .sum();
        total / n as f64
    }
}

/// Clamped cell lookup along one axis: `(i0, i1, frac, moves)`.
/// `moves` is false where the coordinate is clamped, so the derivative is 0.
#[inline]
fn axis_cell<T: Scalar>(p: T, n: usize) -> (usize, usize, T, bool) {
    if n == 1 {
        return (0, 0, T::zero(), false);
    }
    let hi = T::of((n - 1) as f64);
    let inside = p >= T::zero() && p <= hi;
    let pc = p.max(T::zero()).min(hi);
    let i0 = (pc.floor().to_usize().unwrap_or(0)).min(n - 2);
    let frac = pc - T::of(i0 as f64);
    (i0, i0 + 1, frac, inside)
}

/// Trilinear sample of `data` at continuous position `p` and its gradient
/// with respect to `p`.
#[inline]
pub(crate) fn sample_trilinear<T: Scalar>(data: &[T], dims: Dims, p: [T; 3]) -> (T, [T; 3]) {
    let (d0, d1, fd, md) = axis_cell(p[0], dims.d());
    let (h0, h1, fh, mh) = axis_cell(p[1], dims.h());
    let (w0, w1, fw, mw) = axis_cell(p[2], dims.w());
    let at = |d, h, w| data[dims.index(d, h, w)];
    let (v000, v001, v010, v011) = (at(d0, h0, w0), at(d0, h0, w1), at(d0, h1, w0), at(d0, h1, w1));
    let (v100, v101, v110, v111) = (at(d1, h0, w0), at(d1, h0, w1), at(d1, h1, w0), at(d1, h1, w1));
    let one = T::one();
    let c00 = v000 * (one - fw) + v001 * fw;
    let c01 = v010 * (one - fw) + v011 * fw;
    let c10 = v100 * (one - fw) + v101 * fw;
    let c11 = v110 * (one - fw) + v111 * fw;
    let c0 = c00 * (one - fh) + c01 * fh;
    let c1 = c10 * (one - fh) + c11 * fh;
    let value = c0 * (one - fd) + c1 * fd;

    let gd = if md { c1 - c0 } else { T::zero() };
    let gh = if mh {
        (c01 - c00) * (one - fd) + (c11 - c10) * fd
    } else {
        T::zero()
    };
    let gw = if mw {
        (((v001 - v000) * (one - fh) + (v011 - v010) * fh) * (one - fd))
            + (((v101 - v100) * (one - fh) + (v111 - v110) * fh) * fd)
    } else {
        T::zero()
    };
    (value, [gd, gh, gw])
}

#[inline]
fn sample_position<T: Scalar>(dims: Dims, disp: &[T], i: usize, d: usize, h: usize, w: usize) -> [T; 3] {
    let n = dims.voxels();
    [
        T::of(d as f64) + disp[i],
        T::of(h as f64) + disp[n + i],
        T::of(w as f64) + disp[2 * n + i],
    ]
}

/// Warps one raster channel by a planar displacement buffer.
pub(crate) fn warp_channel<T: Scalar>(moving: &[T], dims: Dims, disp: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(dims.voxels());
    let mut i = 0;
    for d in 0..dims.d() {
        for h in 0..dims.h() {
            for w in 0..dims.w() {
                let p = sample_position(dims, disp, i, d, h, w);
                out.push(sample_trilinear(moving, dims, p).0);
                i += 1;
            }
        }
    }
    out
}

/// Gradient of `Σ grad_out · warp(moving, disp)` with respect to `disp`.
pub(crate) fn warp_channel_backward<T: Scalar>(
    moving: &[T],
    dims: Dims,
    disp: &[T],
    grad_out: &[T],
) -> Vec<T> {
    let n = dims.voxels();
    let mut grad = vec![T::zero(); 3 * n];
    let mut i = 0;
    for d in 0..dims.d() {
        for h in 0..dims.h() {
            for w in 0..dims.w() {
                let g = grad_out[i];
                if g != T::zero() {
                    let p = sample_position(dims, disp, i, d, h, w);
                    let (_, dp) = sample_trilinear(moving, dims, p);
                    grad[i] = g * dp[0];
                    grad[n + i] = g * dp[1];
                    grad[2 * n + i] = g * dp[2];
                }
                i += 1;
            }
        }
    }
    grad
}

fn check_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::DimMismatch(format!("volume {a} vs field {b}")));
    }
    Ok(())
}

/// The deformed moving image `moving(v + disp(v))`.
pub fn warp_trilinear<T: Scalar>(moving: &Volume<T>, field: &DeformationField<T>) -> Result<Volume<T>> {
    check_dims(moving.dims(), field.dims())?;
    let mut out = Volume::new(moving.dims(), warp_channel(moving.data(), moving.dims(), field.disp()))?;
    out.spacing = moving.spacing;
    Ok(out)
}

/// Gradient of a scalar loss with respect to the field, given the loss
/// gradient `grad_out` with respect to the warped image.
pub fn warp_trilinear_backward<T: Scalar>(
    moving: &Volume<T>,
    field: &DeformationField<T>,
    grad_out: &[T],
) -> Result<Vec<T>> {
    check_dims(moving.dims(), field.dims())?;
    if grad_out.len() != moving.dims().voxels() {
        return Err(Error::DimMismatch(format!(
            "warp upstream gradient has {} values for {}",
            grad_out.len(),
            moving.dims()
        )));
    }
    Ok(warp_channel_backward(
        moving.data(),
        moving.dims(),
        field.disp(),
        grad_out,
    ))
}

/// Nearest-neighbour label warping; labels are never blended.
pub fn warp_labels_nearest<T: Scalar>(
    labels: &LabelVolume,
    field: &DeformationField<T>,
) -> Result<LabelVolume> {
    let dims = labels.dims();
    check_dims(dims, field.dims())?;
    let src = labels.data();
    let round = |p: T, n: usize| -> usize {
        let r = p.as_f64().round();
        r.clamp(0.0, (n - 1) as f64) as usize
    };
    let mut out = Vec::with_capacity(dims.voxels());
    let mut i = 0;
    for d in 0..dims.d() {
        for h in 0..dims.h() {
            for w in 0..dims.w() {
                let p = sample_position(dims, field.disp(), i, d, h, w);
                let (sd, sh, sw) = (round(p[0], dims.d()), round(p[1], dims.h()), round(p[2], dims.w()));
                out.push(src[dims.index(sd, sh, sw)]);
                i += 1;
            }
        }
    }
    LabelVolume::new(dims, out)
}

/// Interpolation stencil of target coordinate `t` on a source axis of length `s`
/// (cell-centre alignment). Border cells extrapolate linearly, so linear
/// functions are reproduced exactly.
fn upsample_stencil(t: usize, s: usize, target: usize) -> (usize, usize, f64, f64) {
    if s == 1 {
        return (0, 0, 1.0, 0.0);
    }
    let src = (t as f64 + 0.5) * s as f64 / target as f64 - 0.5;
    let i0 = (src.floor().max(0.0) as usize).min(s - 2);
    let frac = src - i0 as f64;
    (i0, i0 + 1, 1.0 - frac, frac)
}

fn upsample_stencils(src: Dims, target: Dims) -> [Vec<(usize, usize, f64, f64)>; 3] {
    std::array::from_fn(|a| {
        (0..target.0[a])
            .map(|t| upsample_stencil(t, src.0[a], target.0[a]))
            .collect()
    })
}

fn upsample_check(src: Dims, target: Dims) -> Result<()> {
    if (0..3).any(|a| target.0[a] < src.0[a]) {
        return Err(Error::InvalidShape(format!(
            "cannot upsample field {src} to smaller grid {target}"
        )));
    }
    Ok(())
}

fn level_after_upsampling(level: usize, src: Dims, target: Dims) -> usize {
    let mut d = target;
    for steps in 0..=level {
        if d == src {
            return level - steps;
        }
        d = d.halved();
    }
    0
}

/// Trilinearly resamples every displacement channel onto `target` and rescales
/// it by the axis-wise grid ratio, converting to target-grid voxel units.
pub fn upsample_field_trilinear<T: Scalar>(
    field: &DeformationField<T>,
    target: Dims,
) -> Result<DeformationField<T>> {
    let src = field.dims();
    upsample_check(src, target)?;
    let st = upsample_stencils(src, target);
    let n = target.voxels();
    let mut disp = vec![T::zero(); 3 * n];
    for c in 0..3 {
        let ratio = target.0[c] as f64 / src.0[c] as f64;
        let ch = field.channel(c);
        let dst = &mut disp[c * n..(c + 1) * n];
        let mut i = 0;
        for &(d0, d1, wd0, wd1) in &st[0] {
            for &(h0, h1, wh0, wh1) in &st[1] {
                for &(x0, x1, ww0, ww1) in &st[2] {
                    let at = |d, h, w| ch[src.index(d, h, w)].as_f64();
                    let v = wd0 * (wh0 * (ww0 * at(d0, h0, x0) + ww1 * at(d0, h0, x1))
                        + wh1 * (ww0 * at(d0, h1, x0) + ww1 * at(d0, h1, x1)))
                        + wd1 * (wh0 * (ww0 * at(d1, h0, x0) + ww1 * at(d1, h0, x1))
                            + wh1 * (ww0 * at(d1, h1, x0) + ww1 * at(d1, h1, x1)));
                    dst[i] = T::of(v * ratio);
                    i += 1;
                }
            }
        }
    }
    Ok(DeformationField {
        dims: target,
        disp,
        level: level_after_upsampling(field.level, src, target),
    })
}

/// Adjoint of [`upsample_field_trilinear`]: maps a gradient on the target grid
/// back onto the planar source displacement buffer.
pub fn upsample_field_backward<T: Scalar>(src: Dims, target: Dims, grad_target: &[T]) -> Result<Vec<T>> {
    upsample_check(src, target)?;
    let n = target.voxels();
    if grad_target.len() != 3 * n {
        return Err(Error::DimMismatch(format!(
            "upsample gradient has {} values, expected {}",
            grad_target.len(),
            3 * n
        )));
    }
    let st = upsample_stencils(src, target);
    let ns = src.voxels();
    let mut grad = vec![0.0f64; 3 * ns];
    for c in 0..3 {
        let ratio = target.0[c] as f64 / src.0[c] as f64;
        let g = &grad_target[c * n..(c + 1) * n];
        let dst = &mut grad[c * ns..(c + 1) * ns];
        let mut i = 0;
        for &(d0, d1, wd0, wd1) in &st[0] {
            for &(h0, h1, wh0, wh1) in &st[1] {
                for &(x0, x1, ww0, ww1) in &st[2] {
                    let gv = g[i].as_f64() * ratio;
                    i += 1;
                    for (d, wd) in [(d0, wd0), (d1, wd1)] {
                        for (h, wh) in [(h0, wh0), (h1, wh1)] {
                            for (x, ww) in [(x0, ww0), (x1, ww1)] {
                                dst[src.index(d, h, x)] += gv * wd * wh * ww;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad.into_iter().map(T::of).collect())
}

//! 3D pooling with edge-replicating padding.
//!
//! Padding is `(k - 1) / 2` per side, so kernel 3 / stride 2 yields
//! ceil-halved dims. Out-of-range taps read the nearest edge voxel.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Dims, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolKind {
    #[default]
    Max,
    Avg,
}

impl PoolKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoolKind::Max => "max",
            PoolKind::Avg => "avg",
        }
    }
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolKind::Max),
            "avg" => Ok(PoolKind::Avg),
            _ => Err(Error::InvalidArgument(format!("unknown pool kind '{s}'"))),
        }
    }
}

pub fn pool_output_dims(dims: Dims, kernel: usize, stride: usize) -> Dims {
    let pad = (kernel - 1) / 2;
    Dims(dims.0.map(|n| (n + 2 * pad - kernel) / stride + 1))
}

/// Clamped input coordinates of every tap of output position `o` along one axis.
fn taps(o: usize, n: usize, kernel: usize, stride: usize) -> impl Iterator<Item = usize> {
    let pad = ((kernel - 1) / 2) as isize;
    let start = (o * stride) as isize - pad;
    (0..kernel as isize).map(move |t| (start + t).clamp(0, n as isize - 1) as usize)
}

/// Records, per output voxel, the input voxel (channel-local raster index) that won.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    pub input_dims: Dims,
    pub argmax: Vec<u32>,
}

fn check(dims: Dims, kernel: usize, stride: usize) -> Result<()> {
    if kernel == 0 || kernel % 2 == 0 || stride == 0 {
        return Err(Error::InvalidShape(format!(
            "pool kernel {kernel} must be odd and stride {stride} positive"
        )));
    }
    if dims.is_empty() {
        return Err(Error::InvalidShape("pooling an empty grid".into()));
    }
    Ok(())
}

/// Window maximum; ties resolve to the first tap in raster order.
pub fn maxpool3d<T: Scalar>(
    x: &FeatureMap<T>,
    kernel: usize,
    stride: usize,
) -> Result<(FeatureMap<T>, MaxPoolCache)> {
    check(x.dims, kernel, stride)?;
    let od = pool_output_dims(x.dims, kernel, stride);
    let [nd, nh, nw] = x.dims.0;
    let mut y = FeatureMap::zeros(x.batch, x.channels, od);
    let mut argmax = Vec::with_capacity(y.len());
    let mut out_idx = 0;
    for b in 0..x.batch {
        for c in 0..x.channels {
            let src = x.channel(b, c);
            for d in 0..od.d() {
                for h in 0..od.h() {
                    for w in 0..od.w() {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0usize;
                        for id in taps(d, nd, kernel, stride) {
                            for ih in taps(h, nh, kernel, stride) {
                                for iw in taps(w, nw, kernel, stride) {
                                    let i = x.dims.index(id, ih, iw);
                                    if src[i] > best {
                                        best = src[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        y.data[out_idx] = best;
                        argmax.push(best_i as u32);
                        out_idx += 1;
                    }
                }
            }
        }
    }
    Ok((
        y,
        MaxPoolCache {
            input_dims: x.dims,
            argmax,
        },
    ))
}

/// Routes each upstream gradient to the recorded argmax voxel.
pub fn maxpool3d_backward<T: Scalar>(
    grad_out: &FeatureMap<T>,
    cache: &MaxPoolCache,
) -> Result<FeatureMap<T>> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::DimMismatch(format!(
            "maxpool gradient has {} values, cache has {}",
            grad_out.len(),
            cache.argmax.len()
        )));
    }
    let mut dx = FeatureMap::zeros(grad_out.batch, grad_out.channels, cache.input_dims);
    let in_vox = cache.input_dims.voxels();
    let out_vox = grad_out.dims.voxels();
    for bc in 0..grad_out.batch * grad_out.channels {
        let dst = &mut dx.data[bc * in_vox..(bc + 1) * in_vox];
        let g = &grad_out.data[bc * out_vox..(bc + 1) * out_vox];
        let am = &cache.argmax[bc * out_vox..(bc + 1) * out_vox];
        for (&gv, &i) in g.iter().zip(am) {
            dst[i as usize] += gv;
        }
    }
    Ok(dx)
}

/// Window mean over all `k^3` (edge-replicated) taps.
pub fn avgpool3d<T: Scalar>(x: &FeatureMap<T>, kernel: usize, stride: usize) -> Result<FeatureMap<T>> {
    check(x.dims, kernel, stride)?;
    let od = pool_output_dims(x.dims, kernel, stride);
    let [nd, nh, nw] = x.dims.0;
    let scale = T::one() / T::of(kernel.pow(3) as f64);
    let mut y = FeatureMap::zeros(x.batch, x.channels, od);
    let mut out_idx = 0;
    for b in 0..x.batch {
        for c in 0..x.channels {
            let src = x.channel(b, c);
            for d in 0..od.d() {
                for h in 0..od.h() {
                    for w in 0..od.w() {
                        let mut s = T::zero();
                        for id in taps(d, nd, kernel, stride) {
                            for ih in taps(h, nh, kernel, stride) {
                                for iw in taps(w, nw, kernel, stride) {
                                    s += src[x.dims.index(id, ih, iw)];
                                }
                            }
                        }
                        y.data[out_idx] = s * scale;
                        out_idx += 1;
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn avgpool3d_backward<T: Scalar>(
    grad_out: &FeatureMap<T>,
    input_dims: Dims,
    kernel: usize,
    stride: usize,
) -> Result<FeatureMap<T>> {
    check(input_dims, kernel, stride)?;
    let od = pool_output_dims(input_dims, kernel, stride);
    if od != grad_out.dims {
        return Err(Error::DimMismatch(format!(
            "avgpool gradient dims {} vs expected {od}",
            grad_out.dims
        )));
    }
    let [nd, nh, nw] = input_dims.0;
    let scale = T::one() / T::of(kernel.pow(3) as f64);
    let mut dx = FeatureMap::zeros(grad_out.batch, grad_out.channels, input_dims);
    let mut out_idx = 0;
    for b in 0..grad_out.batch {
        for c in 0..grad_out.channels {
            let dst = dx.channel_mut(b, c);
            for d in 0..od.d() {
                for h in 0..od.h() {
                    for w in 0..od.w() {
                        let g = grad_out.data[out_idx] * scale;
                        out_idx += 1;
                        for id in taps(d, nd, kernel, stride) {
                            for ih in taps(h, nh, kernel, stride) {
                                for iw in taps(w, nw, kernel, stride) {
                                    dst[input_dims.index(id, ih, iw)] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

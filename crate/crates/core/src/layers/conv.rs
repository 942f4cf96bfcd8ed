//! 3D convolution and transposed convolution via im2col and GEMM.
//!
//! Convolution is cross-correlation (no kernel flip). Both operators share a
//! single index map: image coordinate `i = q * stride + tap - pad` along each
//! axis, where `q` indexes the coarse grid and `tap` the kernel offset.
//! `conv3d` gathers along that map, `transposed_conv3d` scatters along it,
//! which makes the two exact adjoints of each other.

use crate::error::{Error, Result};
use crate::scalar::{MatMut, MatRef, Scalar};
use crate::volume::{Dims, FeatureMap};

/// Weights `(out, in, k, k, k)` row-major plus per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: [usize; 3],
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Parameter gradients of a conv or transposed-conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidShape(format!(
                "kernel size must be odd, got {kernel}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidShape("stride must be at least 1".into()));
        }
        Ok(ConvParams {
            out_channels,
            in_channels,
            kernel,
            stride,
            padding: [padding; 3],
            weight: vec![T::zero(); out_channels * in_channels * kernel.pow(3)],
            bias: vec![T::zero(); out_channels],
        })
    }

    pub fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let k = self.kernel;
        [self.out_channels, self.in_channels, k, k, k]
    }

    #[inline]
    pub fn weight_at(&self, o: usize, i: usize, tap: usize) -> T {
        self.weight[(o * self.in_channels + i) * self.taps() + tap]
    }

    pub fn zero_grads(&self) -> ConvGrads<T> {
        ConvGrads {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
        }
    }

    /// Output dims of `conv3d` on an input of `dims`.
    pub fn output_dims(&self, dims: Dims) -> Result<Dims> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims.0[a] + 2 * self.padding[a];
            if padded < self.kernel {
                return Err(Error::InvalidShape(format!(
                    "input {dims} with padding {:?} is smaller than kernel {}",
                    self.padding, self.kernel
                )));
            }
            out[a] = (padded - self.kernel) / self.stride + 1;
        }
        Ok(Dims(out))
    }

    /// Checks that a transposed convolution from `input` can produce `target`.
    pub fn check_transposed_target(&self, input: Dims, target: Dims) -> Result<()> {
        for a in 0..3 {
            let (n, t) = (input.0[a], target.0[a]);
            let lo = (n.max(1) - 1) * self.stride + 1;
            let hi = n * self.stride + 1;
            if n == 0 || t < lo || t > hi {
                return Err(Error::InvalidShape(format!(
                    "transposed conv cannot map {input} to {target}: axis {a} target must lie in [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Geometry shared by `im2col` and `col2im`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ColGeom {
    pub channels: usize,
    /// Fine image grid.
    pub image: Dims,
    /// Coarse grid, one column per position.
    pub grid: Dims,
    pub kernel: usize,
    pub stride: usize,
    pub pad: [usize; 3],
}

impl ColGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    pub fn cols(&self) -> usize {
        self.grid.voxels()
    }
}

/// Range of grid positions `q` with `0 <= q * stride + offset < len`.
#[inline]
fn valid_range(grid: usize, len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { (-offset + s - 1) / s } else { 0 };
    let last = len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = lo.max(0) as usize;
    let hi = (hi as usize).min(grid);
    (lo, hi.max(lo))
}

/// Grid depth slices per column chunk, sized so a chunk holds about
/// `COL_CHUNK_ELEMS` entries and stays cache-resident.
const COL_CHUNK_ELEMS: usize = 1 << 19;

fn slab_ranges(g: &ColGeom) -> impl Iterator<Item = (usize, usize)> {
    let [gd, gh, gw] = g.grid.0;
    let per_slice = (g.rows() * gh * gw).max(1);
    let step = (COL_CHUNK_ELEMS / per_slice).clamp(1, gd.max(1));
    (0..gd).step_by(step).map(move |d0| (d0, (d0 + step).min(gd)))
}

/// Gathers image patches for grid depth slices `slab` into a
/// `(channels * k^3) x slab_cols` column matrix.
pub(crate) fn im2col<T: Scalar>(image: &[T], g: &ColGeom, slab: (usize, usize), col: &mut [T]) {
    let k = g.kernel;
    let [_, gh, gw] = g.grid.0;
    let [id_n, ih_n, iw_n] = g.image.0;
    let ncols = (slab.1 - slab.0) * gh * gw;
    let img_vox = g.image.voxels();
    debug_assert_eq!(col.len(), g.rows() * ncols);
    for c in 0..g.channels {
        let img = &image[c * img_vox..(c + 1) * img_vox];
        for kd in 0..k {
            let off_d = kd as isize - g.pad[0] as isize;
            let (d_lo, d_hi) = valid_range(slab.1, id_n, g.stride, off_d);
            let d_lo = d_lo.max(slab.0);
            let d_hi = d_hi.max(d_lo);
            for kh in 0..k {
                let off_h = kh as isize - g.pad[1] as isize;
                let (h_lo, h_hi) = valid_range(gh, ih_n, g.stride, off_h);
                for kw in 0..k {
                    let off_w = kw as isize - g.pad[2] as isize;
                    let (w_lo, w_hi) = valid_range(gw, iw_n, g.stride, off_w);
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    for qd in slab.0..slab.1 {
                        let plane = &mut dst[(qd - slab.0) * gh * gw..(qd - slab.0 + 1) * gh * gw];
                        if qd < d_lo || qd >= d_hi || w_lo >= w_hi {
                            plane.fill(T::zero());
                            continue;
                        }
                        let id = (qd * g.stride) as isize + off_d;
                        for qh in 0..gh {
                            let out_row = &mut plane[qh * gw..(qh + 1) * gw];
                            if qh < h_lo || qh >= h_hi {
                                out_row.fill(T::zero());
                                continue;
                            }
                            let ih = (qh * g.stride) as isize + off_h;
                            let src_row = (id as usize * ih_n + ih as usize) * iw_n;
                            out_row[..w_lo].fill(T::zero());
                            out_row[w_hi..].fill(T::zero());
                            if g.stride == 1 {
                                let iw0 = (w_lo as isize + off_w) as usize;
                                let n = w_hi - w_lo;
                                out_row[w_lo..w_hi]
                                    .copy_from_slice(&img[src_row + iw0..src_row + iw0 + n]);
                            } else {
                                for qw in w_lo..w_hi {
                                    let iw = ((qw * g.stride) as isize + off_w) as usize;
                                    out_row[qw] = img[src_row + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a slab column matrix back onto the image grid (adjoint of [`im2col`]).
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ColGeom, slab: (usize, usize), image: &mut [T]) {
    let k = g.kernel;
    let [_, gh, gw] = g.grid.0;
    let [id_n, ih_n, iw_n] = g.image.0;
    let ncols = (slab.1 - slab.0) * gh * gw;
    let img_vox = g.image.voxels();
    for c in 0..g.channels {
        let img = &mut image[c * img_vox..(c + 1) * img_vox];
        for kd in 0..k {
            let off_d = kd as isize - g.pad[0] as isize;
            let (d_lo, d_hi) = valid_range(slab.1, id_n, g.stride, off_d);
            let d_lo = d_lo.max(slab.0);
            let d_hi = d_hi.max(d_lo);
            for kh in 0..k {
                let off_h = kh as isize - g.pad[1] as isize;
                let (h_lo, h_hi) = valid_range(gh, ih_n, g.stride, off_h);
                for kw in 0..k {
                    let off_w = kw as isize - g.pad[2] as isize;
                    let (w_lo, w_hi) = valid_range(gw, iw_n, g.stride, off_w);
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let src = &col[row * ncols..(row + 1) * ncols];
                    for qd in d_lo..d_hi {
                        let id = (qd * g.stride) as isize + off_d;
                        for qh in h_lo..h_hi {
                            let ih = (qh * g.stride) as isize + off_h;
                            let img_row = (id as usize * ih_n + ih as usize) * iw_n;
                            let src_row = ((qd - slab.0) * gh + qh) * gw;
                            for qw in w_lo..w_hi {
                                let iw = ((qw * g.stride) as isize + off_w) as usize;
                                img[img_row + iw] += src[src_row + qw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Scalar>(p: &ConvParams<T>, image: Dims, grid: Dims, channels: usize) -> ColGeom {
    ColGeom {
        channels,
        image,
        grid,
        kernel: p.kernel,
        stride: p.stride,
        pad: p.padding,
    }
}

fn check_input<T: Scalar>(x: &FeatureMap<T>, p: &ConvParams<T>) -> Result<()> {
    if x.channels != p.in_channels {
        return Err(Error::ChannelMismatch {
            expected: p.in_channels,
            got: x.channels,
        });
    }
    Ok(())
}

/// Below this many output channels the weight gradient is formed transposed.
const NARROW_OUT: usize = 8;

fn slab_cols(g: &ColGeom, slab: (usize, usize)) -> (usize, usize) {
    let plane = g.grid.h() * g.grid.w();
    (slab.0 * plane, (slab.1 - slab.0) * plane)
}

/// Columns `[c0, c0 + n)` of a row-major matrix with `cols` columns.
fn col_block<T>(data: &[T], cols: usize, c0: usize) -> MatRef<'_, T> {
    MatRef::row_major(&data[c0..], cols)
}

fn col_block_t<T>(data: &[T], cols: usize, c0: usize) -> MatRef<'_, T> {
    MatRef::row_major_t(&data[c0..], cols)
}

fn col_block_mut<T>(data: &mut [T], cols: usize, c0: usize) -> MatMut<'_, T> {
    MatMut::row_major(&mut data[c0..], cols)
}

/// Strided, zero-padded 3D cross-correlation.
pub fn conv3d<T: Scalar>(x: &FeatureMap<T>, p: &ConvParams<T>) -> Result<FeatureMap<T>> {
    check_input(x, p)?;
    let out_dims = p.output_dims(x.dims)?;
    let g = conv_geom(p, x.dims, out_dims, p.in_channels);
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = FeatureMap::zeros(x.batch, p.out_channels, out_dims);
    if p.out_channels < NARROW_OUT {
        narrow_conv3d(x, p, &g, &mut out);
        return Ok(out);
    }
    let mut col = Vec::new();
    for b in 0..x.batch {
        let y = out.sample_mut(b);
        for (o, chunk) in y.chunks_mut(cols).enumerate() {
            chunk.fill(p.bias[o]);
        }
        for slab in slab_ranges(&g) {
            let (c0, n) = slab_cols(&g, slab);
            col.resize(rows * n, T::zero());
            im2col(x.sample(b), &g, slab, &mut col);
            T::gemm(
                p.out_channels,
                rows,
                n,
                T::one(),
                MatRef::row_major(&p.weight, rows),
                MatRef::row_major(&col, n),
                T::one(),
                col_block_mut(y, cols, c0),
            );
        }
    }
    Ok(out)
}

/// Few output channels: form every tap's response `Z = W_tap * x` on the
/// input grid, then gather-sum the shifted taps. This avoids a column matrix
/// with `in * k^3` rows.
fn narrow_conv3d<T: Scalar>(x: &FeatureMap<T>, p: &ConvParams<T>, g: &ColGeom, out: &mut FeatureMap<T>) {
    let taps = p.taps();
    let k = p.kernel;
    let wt = tap_major_weights(p);
    let vox = x.dims.voxels();
    let [id_n, ih_n, iw_n] = x.dims.0;
    let [gd, gh, gw] = g.grid.0;
    let mut z = vec![T::zero(); p.out_channels * taps * vox];
    for b in 0..x.batch {
        T::gemm(
            p.out_channels * taps,
            p.in_channels,
            vox,
            T::one(),
            MatRef::row_major(&wt, p.in_channels),
            MatRef::row_major(x.sample(b), vox),
            T::zero(),
            MatMut::row_major(&mut z, vox),
        );
        let y = out.sample_mut(b);
        for (o, yo) in y.chunks_mut(g.cols()).enumerate() {
            yo.fill(p.bias[o]);
            for t in 0..taps {
                let (kd, kh, kw) = (t / (k * k), (t / k) % k, t % k);
                let zt = &z[(o * taps + t) * vox..(o * taps + t + 1) * vox];
                let off_d = kd as isize - g.pad[0] as isize;
                let off_h = kh as isize - g.pad[1] as isize;
                let off_w = kw as isize - g.pad[2] as isize;
                let (d_lo, d_hi) = valid_range(gd, id_n, g.stride, off_d);
                let (h_lo, h_hi) = valid_range(gh, ih_n, g.stride, off_h);
                let (w_lo, w_hi) = valid_range(gw, iw_n, g.stride, off_w);
                for qd in d_lo..d_hi {
                    let id = ((qd * g.stride) as isize + off_d) as usize;
                    for qh in h_lo..h_hi {
                        let ih = ((qh * g.stride) as isize + off_h) as usize;
                        let src = (id * ih_n + ih) * iw_n;
                        let dst = &mut yo[(qd * gh + qh) * gw..(qd * gh + qh + 1) * gw];
                        if g.stride == 1 {
                            let iw0 = (w_lo as isize + off_w) as usize;
                            for (yv, &zv) in dst[w_lo..w_hi].iter_mut().zip(&zt[src + iw0..]) {
                                *yv += zv;
                            }
                        } else {
                            for qw in w_lo..w_hi {
                                let iw = ((qw * g.stride) as isize + off_w) as usize;
                                dst[qw] += zt[src + iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv3d`]: returns `(d input, d params)`. The input gradient
/// is skipped when `need_input_grad` is false (first layer).
pub fn conv3d_backward<T: Scalar>(
    x: &FeatureMap<T>,
    p: &ConvParams<T>,
    grad_out: &FeatureMap<T>,
    need_input_grad: bool,
) -> Result<(Option<FeatureMap<T>>, ConvGrads<T>)> {
    check_input(x, p)?;
    let out_dims = p.output_dims(x.dims)?;
    if grad_out.shape() != (x.batch, p.out_channels, out_dims) {
        return Err(Error::DimMismatch(format!(
            "conv3d upstream gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            (x.batch, p.out_channels, out_dims)
        )));
    }
    if p.out_channels < NARROW_OUT {
        if let Some(adj) = flipped_adjoint(p) {
            return Ok(narrow_conv3d_backward(x, p, &adj, grad_out, need_input_grad));
        }
    }
    let g = conv_geom(p, x.dims, out_dims, p.in_channels);
    let (rows, cols) = (g.rows(), g.cols());
    let mut col = Vec::new();
    let mut grads = p.zero_grads();
    let mut dx = need_input_grad.then(|| FeatureMap::zeros(x.batch, x.channels, x.dims));
    for b in 0..x.batch {
        let gy = grad_out.sample(b);
        for (o, chunk) in gy.chunks(cols).enumerate() {
            grads.bias[o] += chunk.iter().copied().sum::<T>();
        }
        for slab in slab_ranges(&g) {
            let (c0, n) = slab_cols(&g, slab);
            col.resize(rows * n, T::zero());
            im2col(x.sample(b), &g, slab, &mut col);
            // dW += dY * col^T
            T::gemm(
                p.out_channels,
                n,
                rows,
                T::one(),
                col_block(gy, cols, c0),
                MatRef::row_major_t(&col, n),
                T::one(),
                MatMut::row_major(&mut grads.weight, rows),
            );
            if let Some(dx) = dx.as_mut() {
                // dcol = W^T * dY
                T::gemm(
                    rows,
                    p.out_channels,
                    n,
                    T::one(),
                    MatRef::row_major_t(&p.weight, rows),
                    col_block(gy, cols, c0),
                    T::zero(),
                    MatMut::row_major(&mut col, n),
                );
                col2im(&col, &g, slab, dx.sample_mut(b));
            }
        }
    }
    Ok((dx, grads))
}

/// Stride-1 backward for few output channels. The columns of the upstream
/// gradient under the flipped adjoint kernel (`out * k^3` rows) serve both
/// products: `dx = W_adj * col` and `dW_flipped = col * x^T`.
fn narrow_conv3d_backward<T: Scalar>(
    x: &FeatureMap<T>,
    p: &ConvParams<T>,
    adj: &ConvParams<T>,
    grad_out: &FeatureMap<T>,
    need_input_grad: bool,
) -> (Option<FeatureMap<T>>, ConvGrads<T>) {
    let g = conv_geom(adj, grad_out.dims, x.dims, p.out_channels);
    let (rows, cols) = (g.rows(), g.cols());
    let taps = p.taps();
    let mut col = Vec::new();
    let mut dw_flip = vec![T::zero(); rows * p.in_channels];
    let mut grads = p.zero_grads();
    let mut dx = need_input_grad.then(|| FeatureMap::zeros(x.batch, x.channels, x.dims));
    let out_vox = grad_out.dims.voxels();
    for b in 0..x.batch {
        let gy = grad_out.sample(b);
        for (o, chunk) in gy.chunks(out_vox).enumerate() {
            grads.bias[o] += chunk.iter().copied().sum::<T>();
        }
        for slab in slab_ranges(&g) {
            let (c0, n) = slab_cols(&g, slab);
            col.resize(rows * n, T::zero());
            im2col(gy, &g, slab, &mut col);
            T::gemm(
                rows,
                n,
                p.in_channels,
                T::one(),
                MatRef::row_major(&col, n),
                col_block_t(x.sample(b), cols, c0),
                T::one(),
                MatMut::row_major(&mut dw_flip, p.in_channels),
            );
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    p.in_channels,
                    rows,
                    n,
                    T::one(),
                    MatRef::row_major(&adj.weight, rows),
                    MatRef::row_major(&col, n),
                    T::zero(),
                    col_block_mut(dx.sample_mut(b), cols, c0),
                );
            }
        }
    }
    for o in 0..p.out_channels {
        for i in 0..p.in_channels {
            for t in 0..taps {
                grads.weight[(o * p.in_channels + i) * taps + t] =
                    dw_flip[(o * taps + taps - 1 - t) * p.in_channels + i];
            }
        }
    }
    (dx, grads)
}

/// For stride 1 the adjoint of a convolution is a convolution of the upstream
/// gradient with the spatially flipped, channel-transposed kernel and padding
/// `k - 1 - pad`. `None` when that padding would be negative.
fn flipped_adjoint<T: Scalar>(p: &ConvParams<T>) -> Option<ConvParams<T>> {
    let k = p.kernel;
    if p.stride != 1 || p.padding.iter().any(|&pd| pd + 1 > k) {
        return None;
    }
    let taps = p.taps();
    let mut weight = vec![T::zero(); p.weight.len()];
    for o in 0..p.out_channels {
        for i in 0..p.in_channels {
            for t in 0..taps {
                weight[(i * p.out_channels + o) * taps + (taps - 1 - t)] = p.weight_at(o, i, t);
            }
        }
    }
    Some(ConvParams {
        out_channels: p.in_channels,
        in_channels: p.out_channels,
        kernel: k,
        stride: 1,
        padding: p.padding.map(|pd| k - 1 - pd),
        weight,
        bias: vec![T::zero(); p.in_channels],
    })
}

/// `(out * k^3) x in` matrix with rows `(o, tap)`, built from `(out, in, k^3)` weights.
fn tap_major_weights<T: Scalar>(p: &ConvParams<T>) -> Vec<T> {
    let taps = p.taps();
    let mut wt = vec![T::zero(); p.weight.len()];
    for o in 0..p.out_channels {
        for i in 0..p.in_channels {
            for t in 0..taps {
                wt[(o * taps + t) * p.in_channels + i] = p.weight_at(o, i, t);
            }
        }
    }
    wt
}

/// Transposed convolution (scatter-add adjoint of [`conv3d`]) onto an explicit
/// output grid `target`. Contributions landing outside `target` are dropped.
pub fn transposed_conv3d<T: Scalar>(
    x: &FeatureMap<T>,
    p: &ConvParams<T>,
    target: Dims,
) -> Result<FeatureMap<T>> {
    check_input(x, p)?;
    p.check_transposed_target(x.dims, target)?;
    let g = conv_geom(p, target, x.dims, p.out_channels);
    let (rows, cols) = (g.rows(), g.cols());
    let wt = tap_major_weights(p);
    let mut col = Vec::new();
    let mut out = FeatureMap::zeros(x.batch, p.out_channels, target);
    let tvox = target.voxels();
    for b in 0..x.batch {
        let y = out.sample_mut(b);
        for (o, chunk) in y.chunks_mut(tvox).enumerate() {
            chunk.fill(p.bias[o]);
        }
        for slab in slab_ranges(&g) {
            let (c0, n) = slab_cols(&g, slab);
            col.resize(rows * n, T::zero());
            T::gemm(
                rows,
                p.in_channels,
                n,
                T::one(),
                MatRef::row_major(&wt, p.in_channels),
                col_block(x.sample(b), cols, c0),
                T::zero(),
                MatMut::row_major(&mut col, n),
            );
            col2im(&col, &g, slab, y);
        }
    }
    Ok(out)
}

/// Gradients of [`transposed_conv3d`].
pub fn transposed_conv3d_backward<T: Scalar>(
    x: &FeatureMap<T>,
    p: &ConvParams<T>,
    grad_out: &FeatureMap<T>,
    need_input_grad: bool,
) -> Result<(Option<FeatureMap<T>>, ConvGrads<T>)> {
    check_input(x, p)?;
    let target = grad_out.dims;
    p.check_transposed_target(x.dims, target)?;
    if grad_out.batch != x.batch || grad_out.channels != p.out_channels {
        return Err(Error::DimMismatch(format!(
            "transposed conv upstream gradient has shape {:?}",
            grad_out.shape()
        )));
    }
    let g = conv_geom(p, target, x.dims, p.out_channels);
    let (rows, cols) = (g.rows(), g.cols());
    let taps = p.taps();
    let wt = tap_major_weights(p);
    let mut col = Vec::new();
    let mut dwt = vec![T::zero(); wt.len()];
    let mut grads = p.zero_grads();
    let mut dx = need_input_grad.then(|| FeatureMap::zeros(x.batch, x.channels, x.dims));
    let tvox = target.voxels();
    for b in 0..x.batch {
        let gy = grad_out.sample(b);
        for (o, chunk) in gy.chunks(tvox).enumerate() {
            grads.bias[o] += chunk.iter().copied().sum::<T>();
        }
        for slab in slab_ranges(&g) {
            let (c0, n) = slab_cols(&g, slab);
            col.resize(rows * n, T::zero());
            im2col(gy, &g, slab, &mut col);
            // dWt += col * x^T
            T::gemm(
                rows,
                n,
                p.in_channels,
                T::one(),
                MatRef::row_major(&col, n),
                col_block_t(x.sample(b), cols, c0),
                T::one(),
                MatMut::row_major(&mut dwt, p.in_channels),
            );
            if let Some(dx) = dx.as_mut() {
                // dx = Wt^T * col
                T::gemm(
                    p.in_channels,
                    rows,
                    n,
                    T::one(),
                    MatRef::row_major_t(&wt, p.in_channels),
                    MatRef::row_major(&col, n),
                    T::zero(),
                    col_block_mut(dx.sample_mut(b), cols, c0),
                );
            }
        }
    }
    for o in 0..p.out_channels {
        for i in 0..p.in_channels {
            for t in 0..taps {
                grads.weight[(o * p.in_channels + i) * taps + t] =
                    dwt[(o * taps + t) * p.in_channels + i];
            }
        }
    }
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(b: usize, c: usize, dims: Dims, rng: &mut ChaCha8Rng) -> FeatureMap<f64> {
        let n = b * c * dims.voxels();
        FeatureMap::new(b, c, dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn random_params(o: usize, i: usize, stride: usize, rng: &mut ChaCha8Rng) -> ConvParams<f64> {
        let mut p = ConvParams::zeros(o, i, 3, stride, 1).unwrap();
        p.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        p.bias.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        p
    }

    #[test]
    fn valid_range_bounds() {
        assert_eq!(valid_range(4, 4, 1, -1), (1, 4));
        assert_eq!(valid_range(4, 4, 1, 1), (0, 3));
        assert_eq!(valid_range(3, 5, 2, -1), (1, 3));
        assert_eq!(valid_range(2, 1, 1, 2), (0, 0));
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut p = ConvParams::<f32>::zeros(2, 1, 3, 1, 1).unwrap();
        p.weight.iter_mut().for_each(|w| *w = 0.3);
        p.bias = vec![1.5, -2.0];
        let x = FeatureMap::zeros(1, 1, Dims::new(3, 4, 5));
        let y = conv3d(&x, &p).unwrap();
        assert_eq!(y.dims, Dims::new(3, 4, 5));
        assert!(y.channel(0, 0).iter().all(|&v| v == 1.5));
        assert!(y.channel(0, 1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_map(2, 1, Dims::new(4, 3, 5), &mut rng);
        let mut p = ConvParams::zeros(1, 1, 3, 1, 1).unwrap();
        p.weight[13] = 1.0;
        assert_eq!(conv3d(&x, &p).unwrap(), x);
    }

    #[test]
    fn channel_mismatch_and_tiny_input() {
        let p = ConvParams::<f32>::zeros(1, 2, 3, 1, 0).unwrap();
        let x = FeatureMap::zeros(1, 1, Dims::new(4, 4, 4));
        assert!(matches!(
            conv3d(&x, &p),
            Err(Error::ChannelMismatch { expected: 2, got: 1 })
        ));
        let x = FeatureMap::zeros(1, 2, Dims::new(2, 4, 4));
        assert!(matches!(conv3d(&x, &p), Err(Error::InvalidShape(_))));
        assert!(ConvParams::<f32>::zeros(1, 1, 2, 1, 0).is_err());
    }

    #[test]
    fn transposed_zero_input_gives_bias() {
        let mut p = ConvParams::<f32>::zeros(2, 3, 3, 2, 1).unwrap();
        p.bias = vec![0.25, 4.0];
        let x = FeatureMap::zeros(1, 3, Dims::new(2, 3, 2));
        let y = transposed_conv3d(&x, &p, Dims::new(4, 5, 3)).unwrap();
        assert_eq!(y.dims, Dims::new(4, 5, 3));
        assert!(y.channel(0, 0).iter().all(|&v| v == 0.25));
        assert!(y.channel(0, 1).iter().all(|&v| v == 4.0));
    }

    #[test]
    fn transposed_rejects_infeasible_target() {
        let p = ConvParams::<f32>::zeros(1, 1, 3, 2, 1).unwrap();
        let x = FeatureMap::zeros(1, 1, Dims::new(4, 4, 4));
        assert!(transposed_conv3d(&x, &p, Dims::new(6, 8, 8)).is_err());
        assert!(transposed_conv3d(&x, &p, Dims::new(10, 8, 8)).is_err());
        assert!(transposed_conv3d(&x, &p, Dims::new(7, 8, 9)).is_ok());
    }

    #[test]
    fn backward_skips_input_grad_when_asked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_map(1, 2, Dims::new(3, 3, 3), &mut rng);
        let p = random_params(2, 2, 1, &mut rng);
        let gy = random_map(1, 2, Dims::new(3, 3, 3), &mut rng);
        let (dx, grads) = conv3d_backward(&x, &p, &gy, false).unwrap();
        assert!(dx.is_none());
        assert_eq!(grads.weight.len(), p.weight.len());
    }

    #[test]
    fn flipped_and_scatter_input_grads_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = Dims::new(4, 5, 3);
        let x = random_map(2, 4, dims, &mut rng);
        let narrow = random_params(2, 4, 1, &mut rng);
        assert!(flipped_adjoint(&narrow).is_some());
        let gy = random_map(2, 2, dims, &mut rng);
        let (dx, _) = conv3d_backward(&x, &narrow, &gy, true).unwrap();
        let dx = dx.unwrap();
        // <conv(x) - bias, gy> == <x, dx> for every x, so probe with unit vectors.
        for probe in [0, 7, 33, dx.data.len() - 1] {
            let mut e = FeatureMap::zeros(2, 4, dims);
            e.data[probe] = 1.0;
            let y = conv3d(&e, &narrow).unwrap();
            let vox = dims.voxels();
            let lhs: f64 = y
                .data
                .iter()
                .zip(&gy.data)
                .enumerate()
                .map(|(j, (a, b))| (a - narrow.bias[(j / vox) % 2]) * b)
                .sum();
            assert!((lhs - dx.data[probe]).abs() < 1e-12, "{lhs} vs {}", dx.data[probe]);
        }
    }

    /// Direct loops over `y[o, q] = b[o] + sum_{i,t} w[o,i,t] x[i, q*s + t - p]`.
    fn naive_conv(x: &FeatureMap<f64>, p: &ConvParams<f64>) -> FeatureMap<f64> {
        let od = p.output_dims(x.dims).unwrap();
        let k = p.kernel as isize;
        let mut y = FeatureMap::zeros(x.batch, p.out_channels, od);
        for b in 0..x.batch {
            for o in 0..p.out_channels {
                for q in 0..od.voxels() {
                    let (qd, qh, qw) = (q / (od.h() * od.w()), (q / od.w()) % od.h(), q % od.w());
                    let mut acc = p.bias[o];
                    for i in 0..p.in_channels {
                        for t in 0..k * k * k {
                            let pos = [
                                (qd * p.stride) as isize + t / (k * k) - p.padding[0] as isize,
                                (qh * p.stride) as isize + (t / k) % k - p.padding[1] as isize,
                                (qw * p.stride) as isize + t % k - p.padding[2] as isize,
                            ];
                            if pos.iter().zip(x.dims.0).all(|(&v, n)| v >= 0 && (v as usize) < n) {
                                let v = x.dims.index(pos[0] as usize, pos[1] as usize, pos[2] as usize);
                                acc += p.weight_at(o, i, t as usize) * x.channel(b, i)[v];
                            }
                        }
                    }
                    y.channel_mut(b, o)[q] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn forward_and_backward_match_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (o, i, stride) in [(2, 5, 1), (3, 4, 2), (9, 3, 1), (10, 2, 2)] {
            let dims = Dims::new(5, 4, 6);
            let x = random_map(2, i, dims, &mut rng);
            let p = random_params(o, i, stride, &mut rng);
            let y = conv3d(&x, &p).unwrap();
            let want = naive_conv(&x, &p);
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
            // Backward through the linear map: probe parameter and input
            // gradients against the forward oracle with unit perturbations.
            let gy = random_map(2, o, y.dims, &mut rng);
            let (dx, grads) = conv3d_backward(&x, &p, &gy, true).unwrap();
            let dx = dx.unwrap();
            let dot = |m: &FeatureMap<f64>| -> f64 { m.data.iter().zip(&gy.data).map(|(a, b)| a * b).sum() };
            let base = dot(&want);
            for wi in [0, p.weight.len() / 2, p.weight.len() - 1] {
                let mut q = p.clone();
                q.weight[wi] += 1.0;
                let d = dot(&naive_conv(&x, &q)) - base;
                assert!((d - grads.weight[wi]).abs() < 1e-9, "dW[{wi}] {d} vs {}", grads.weight[wi]);
            }
            for xi in [0, x.data.len() / 3, x.data.len() - 1] {
                let mut xx = x.clone();
                xx.data[xi] += 1.0;
                let d = dot(&naive_conv(&xx, &p)) - base;
                assert!((d - dx.data[xi]).abs() < 1e-9, "dx[{xi}] {d} vs {}", dx.data[xi]);
            }
            let db: f64 = gy.channel(1, 0).iter().chain(gy.channel(0, 0)).sum();
            assert!((db - grads.bias[0]).abs() < 1e-9);
        }
    }
}

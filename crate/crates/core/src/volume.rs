//! Dense 3D containers and the preprocessing the registration pipeline needs.
//!
//! All grids are stored row-major with `W` varying fastest, then `H`, then `D`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Spatial extent `(D, H, W)` of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Dims([d, h, w])
    }

    pub fn d(&self) -> usize {
        self.0[0]
    }

    pub fn h(&self) -> usize {
        self.0[1]
    }

    pub fn w(&self) -> usize {
        self.0[2]
    }

    pub fn voxels(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels() == 0
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.0[1] + h) * self.0[2] + w
    }

    /// Raster stride of each axis.
    pub fn strides(&self) -> [usize; 3] {
        [self.0[1] * self.0[2], self.0[2], 1]
    }

    /// Dims of the next pyramid level: every axis ceil-halved.
    pub fn halved(&self) -> Dims {
        Dims(self.0.map(|n| n.div_ceil(2)))
    }

    /// Dims of pyramid levels `0..levels`, level 0 being `self`.
    pub fn pyramid(&self, levels: usize) -> Vec<Dims> {
        let mut out = Vec::with_capacity(levels);
        let mut cur = *self;
        for _ in 0..levels {
            out.push(cur);
            cur = cur.halved();
        }
        out
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

impl std::str::FromStr for Dims {
    type Err = Error;

    /// Parses `D,H,W`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad dims '{s}': {e}")))?;
        match parts.as_slice() {
            [d, h, w] => Ok(Dims::new(*d, *h, *w)),
            _ => Err(Error::InvalidArgument(format!(
                "dims '{s}' must have exactly three comma-separated entries"
            ))),
        }
    }
}

/// A scalar intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    data: Vec<T>,
    /// Physical voxel size in mm `(d, h, w)`; carried as metadata only.
    pub spacing: Option<[f32; 3]>,
}

impl<T: Scalar> Volume<T> {
    /// Builds a volume, rejecting wrong lengths and non-finite intensities.
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.voxels() {
            return Err(Error::DimMismatch(format!(
                "volume {dims} needs {} voxels, got {}",
                dims.voxels(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Volume {
            dims,
            data,
            spacing: None,
        })
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Volume {
            dims,
            data: vec![value; dims.voxels()],
            spacing: None,
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.voxels());
        for d in 0..dims.d() {
            for h in 0..dims.h() {
                for w in 0..dims.w() {
                    data.push(f(d, h, w));
                }
            }
        }
        Volume {
            dims,
            data,
            spacing: None,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> T {
        self.data[self.dims.index(d, h, w)]
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            spacing: self.spacing,
        }
    }

    /// 2x2x2 block-average downsampling with ceil-halved dims.
    pub fn downsample_avg2(&self) -> Volume<T> {
        let (dims, data) = downsample_avg2_channel(&self.data, self.dims);
        Volume {
            dims,
            data,
            spacing: self.spacing.map(|s| s.map(|v| v * 2.0)),
        }
    }

    /// Levels `0..levels` of the block-average pyramid; level 0 is a clone.
    pub fn pyramid(&self, levels: usize) -> Vec<Volume<T>> {
        let mut out: Vec<Volume<T>> = Vec::with_capacity(levels);
        for l in 0..levels {
            let next = if l == 0 {
                self.clone()
            } else {
                out[l - 1].downsample_avg2()
            };
            out.push(next);
        }
        out
    }
}

/// Block-average one raster channel. Edge blocks average only in-bounds voxels.
pub fn downsample_avg2_channel<T: Scalar>(src: &[T], dims: Dims) -> (Dims, Vec<T>) {
    let out_dims = dims.halved();
    let mut out = Vec::with_capacity(out_dims.voxels());
    for od in 0..out_dims.d() {
        for oh in 0..out_dims.h() {
            for ow in 0..out_dims.w() {
                let mut sum = T::zero();
                let mut count = 0usize;
                for d in 2 * od..(2 * od + 2).min(dims.d()) {
                    for h in 2 * oh..(2 * oh + 2).min(dims.h()) {
                        for w in 2 * ow..(2 * ow + 2).min(dims.w()) {
                            sum += src[dims.index(d, h, w)];
                            count += 1;
                        }
                    }
                }
                out.push(sum / T::of(count as f64));
            }
        }
    }
    (out_dims, out)
}

/// Batched multi-channel activations, laid out batch-major, then channel, then `D,H,W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub batch: usize,
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(batch: usize, channels: usize, dims: Dims, data: Vec<T>) -> Result<Self> {
        let expected = batch * channels * dims.voxels();
        if data.len() != expected {
            return Err(Error::DimMismatch(format!(
                "feature map {batch}x{channels}x{dims} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(FeatureMap {
            batch,
            channels,
            dims,
            data,
        })
    }

    pub fn zeros(batch: usize, channels: usize, dims: Dims) -> Self {
        FeatureMap {
            batch,
            channels,
            dims,
            data: vec![T::zero(); batch * channels * dims.voxels()],
        }
    }

    /// Stacks same-sized volumes into a single-channel batch.
    pub fn from_volumes(volumes: &[&Volume<T>]) -> Result<Self> {
        let dims = volumes
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty volume list".into()))?
            .dims();
        let mut data = Vec::with_capacity(volumes.len() * dims.voxels());
        for v in volumes {
            if v.dims() != dims {
                return Err(Error::DimMismatch(format!("{} vs {}", v.dims(), dims)));
            }
            data.extend_from_slice(v.data());
        }
        Ok(FeatureMap {
            batch: volumes.len(),
            channels: 1,
            dims,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, Dims) {
        (self.batch, self.channels, self.dims)
    }

    /// All channels of batch element `b`.
    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.channels * self.dims.voxels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.channels * self.dims.voxels();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let v = self.dims.voxels();
        let start = (b * self.channels + c) * v;
        &self.data[start..start + v]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let v = self.dims.voxels();
        let start = (b * self.channels + c) * v;
        &mut self.data[start..start + v]
    }

    pub fn downsample_avg2(&self) -> FeatureMap<T> {
        let out_dims = self.dims.halved();
        let mut data = Vec::with_capacity(self.batch * self.channels * out_dims.voxels());
        for b in 0..self.batch {
            for c in 0..self.channels {
                data.extend(downsample_avg2_channel(self.channel(b, c), self.dims).1);
            }
        }
        FeatureMap {
            batch: self.batch,
            channels: self.channels,
            dims: out_dims,
            data,
        }
    }
}

/// Integer label grid with the same layout as [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    data: Vec<u32>,
}

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u32>) -> Result<Self> {
        if data.len() != dims.voxels() {
            return Err(Error::DimMismatch(format!(
                "label volume {dims} needs {} voxels, got {}",
                dims.voxels(),
                data.len()
            )));
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        LabelVolume {
            dims,
            data: vec![0; dims.voxels()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    /// Sorted distinct labels present.
    pub fn label_set(&self) -> Vec<u32> {
        let mut set: Vec<u32> = self.data.clone();
        set.sort_unstable();
        set.dedup();
        set
    }
}

/// Default bin count for [`histogram_match`].
pub const DEFAULT_HISTOGRAM_BINS: usize = 256;

/// Piecewise-linear CDF over `bins` equal-width bins spanning `[lo, hi]`.
struct Cdf {
    lo: f64,
    width: f64,
    /// `knots[k]` is the fraction of voxels below edge `lo + k * width`.
    knots: Vec<f64>,
}

impl Cdf {
    fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &v in values {
            let idx = (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
            counts[idx] += 1;
        }
        let total = values.len() as f64;
        let mut knots = Vec::with_capacity(bins + 1);
        let mut acc = 0usize;
        knots.push(0.0);
        for c in counts {
            acc += c;
            knots.push(acc as f64 / total);
        }
        Cdf { lo, width, knots }
    }

    fn eval(&self, v: f64) -> f64 {
        let bins = self.knots.len() - 1;
        let t = ((v - self.lo) / self.width).clamp(0.0, bins as f64);
        let k = (t.floor() as usize).min(bins - 1);
        let frac = t - k as f64;
        self.knots[k] + frac * (self.knots[k + 1] - self.knots[k])
    }

    /// Smallest intensity whose CDF reaches `q`, interpolating inside the bin.
    fn inverse(&self, q: f64) -> f64 {
        let bins = self.knots.len() - 1;
        let k = self.knots[1..]
            .iter()
            .position(|&c| c >= q)
            .unwrap_or(bins - 1);
        let (c0, c1) = (self.knots[k], self.knots[k + 1]);
        let frac = if c1 > c0 {
            ((q - c0) / (c1 - c0)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        self.lo + (k as f64 + frac) * self.width
    }
}

/// Remaps `source` intensities so its cumulative histogram follows `reference`.
///
/// A constant source is returned unchanged; a constant reference maps every
/// voxel to that constant.
pub fn histogram_match<T: Scalar>(
    source: &Volume<T>,
    reference: &Volume<T>,
    bins: usize,
) -> Result<Volume<T>> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "histogram matching needs at least 2 bins, got {bins}"
        )));
    }
    if source.dims().is_empty() || reference.dims().is_empty() {
        return Err(Error::InvalidArgument(
            "histogram matching needs non-empty volumes".into(),
        ));
    }
    let (s_lo, s_hi) = source.min_max();
    let (r_lo, r_hi) = reference.min_max();
    if s_lo == s_hi {
        return Ok(source.clone());
    }
    if r_lo == r_hi {
        let mut out = Volume::filled(source.dims(), r_lo);
        out.spacing = source.spacing;
        return Ok(out);
    }
    let src: Vec<f64> = source.data().iter().map(|v| v.as_f64()).collect();
    let rf: Vec<f64> = reference.data().iter().map(|v| v.as_f64()).collect();
    let s_cdf = Cdf::build(&src, s_lo.as_f64(), s_hi.as_f64(), bins);
    let r_cdf = Cdf::build(&rf, r_lo.as_f64(), r_hi.as_f64(), bins);
    let data = src
        .iter()
        .map(|&v| T::of(r_cdf.inverse(s_cdf.eval(v))))
        .collect();
    let mut out = Volume::new(source.dims(), data)?;
    out.spacing = source.spacing;
    Ok(out)
}

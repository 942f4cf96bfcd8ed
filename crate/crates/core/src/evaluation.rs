//! Registration quality metrics and a synthetic-deformation generator.
//!
//! The generator produces a textured base image, a smooth random field `g`,
//! the moving image `base(v + g(v))` and spherical labels warped the same
//! way. Registering the moving image back onto the base should recover the
//! approximate inverse of `g`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Dims, LabelVolume, Volume};
use crate::warp::{sample_trilinear, warp_labels_nearest, warp_trilinear, DeformationField};

/// Per-label Dice overlap plus the mean over the requested labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub labels: Vec<u32>,
    pub dice: Vec<f64>,
    pub mean: f64,
}

impl DiceReport {
    pub fn get(&self, label: u32) -> Option<f64> {
        self.labels.iter().position(|&l| l == label).map(|i| self.dice[i])
    }

    /// `label,dice` rows followed by `mean,<value>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,dice\n");
        for (l, d) in self.labels.iter().zip(&self.dice) {
            let _ = writeln!(s, "{l},{d}");
        }
        let _ = writeln!(s, "mean,{}", self.mean);
        s
    }
}

/// Dice overlap `2|A∩B| / (|A| + |B|)` for each label. Both sets empty
/// counts as perfect overlap (1); exactly one empty counts as 0.
pub fn dice(a: &LabelVolume, b: &LabelVolume, labels: &[u32]) -> Result<DiceReport> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!(
            "label volumes {} vs {}",
            a.dims(),
            b.dims()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("dice needs at least one label".into()));
    }
    let dice: Vec<f64> = labels
        .iter()
        .map(|&l| {
            let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
            for (&x, &y) in a.data().iter().zip(b.data()) {
                na += (x == l) as usize;
                nb += (y == l) as usize;
                both += (x == l && y == l) as usize;
            }
            if na + nb == 0 {
                1.0
            } else {
                2.0 * both as f64 / (na + nb) as f64
            }
        })
        .collect();
    let mean = dice.iter().sum::<f64>() / dice.len() as f64;
    Ok(DiceReport {
        labels: labels.to_vec(),
        dice,
        mean,
    })
}

/// Mean and max per-voxel Euclidean norm of `f - g`, in voxels.
pub fn endpoint_error<T: Scalar>(f: &DeformationField<T>, g: &DeformationField<T>) -> Result<(f64, f64)> {
    if f.dims() != g.dims() || f.level != g.level {
        return Err(Error::DimMismatch(format!(
            "fields {} (level {}) vs {} (level {})",
            f.dims(),
            f.level,
            g.dims(),
            g.level
        )));
    }
    let n = f.dims().voxels();
    let (mut sum, mut max) = (0.0f64, 0.0f64);
    for i in 0..n {
        let (a, b) = (f.at(i), g.at(i));
        let e = (0..3)
            .map(|c| (a[c].as_f64() - b[c].as_f64()).powi(2))
            .sum::<f64>()
            .sqrt();
        sum += e;
        max = max.max(e);
    }
    Ok((sum / n as f64, max))
}

/// Voxelwise arithmetic mean of equally sized volumes.
pub fn mean_volume<T: Scalar>(volumes: &[&Volume<T>]) -> Result<Volume<T>> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean of an empty volume list".into()))?;
    let dims = first.dims();
    // Running mean: exact when every input agrees, unlike sum-then-divide.
    let mut acc = vec![0.0f64; dims.voxels()];
    for (k, v) in volumes.iter().enumerate() {
        if v.dims() != dims {
            return Err(Error::DimMismatch(format!("volume {} vs {}", v.dims(), dims)));
        }
        let k = (k + 1) as f64;
        for (a, &x) in acc.iter_mut().zip(v.data()) {
            *a += (x.as_f64() - *a) / k;
        }
    }
    let mut out = Volume::new(dims, acc.into_iter().map(T::of).collect())?;
    out.spacing = first.spacing;
    Ok(out)
}

/// Separable Gaussian smoothing of one raster channel, replicate borders,
/// kernel truncated at 3 sigma.
fn gaussian_smooth(data: &mut [f64], dims: Dims, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let strides = dims.strides();
    let mut line = Vec::new();
    for axis in 0..3 {
        let len = dims.0[axis];
        let stride = strides[axis];
        for start in 0..dims.voxels() {
            // Each line starts where the axis coordinate is 0.
            if (start / stride) % len != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|i| data[start + i * stride]));
            for i in 0..len {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let src = (i as isize + j as isize - radius).clamp(0, len as isize - 1);
                    acc += k * line[src as usize];
                }
                data[start + i * stride] = acc;
            }
        }
    }
}

/// Smooth random displacement field: per-channel white noise, Gaussian
/// smoothed, rescaled so the largest displacement norm equals `amplitude`.
pub fn synth_deformation<T: Scalar>(
    dims: Dims,
    amplitude: f64,
    sigma: f64,
    seed: u64,
) -> Result<DeformationField<T>> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "amplitude must be non-negative, got {amplitude}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let n = dims.voxels();
    if amplitude == 0.0 {
        return Ok(DeformationField::zeros(dims, 0));
    }
    // Smooth on a grid padded by the kernel radius, then crop, so border
    // voxels average as much noise as interior ones.
    let r = (3.0 * sigma).ceil() as usize;
    let padded = Dims(dims.0.map(|x| x + 2 * r));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disp = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        let mut noise: Vec<f64> = (0..padded.voxels()).map(|_| rng.sample(StandardNormal)).collect();
        gaussian_smooth(&mut noise, padded, sigma);
        for d in 0..dims.d() {
            for h in 0..dims.h() {
                let start = padded.index(d + r, h + r, r);
                disp.extend_from_slice(&noise[start..start + dims.w()]);
            }
        }
    }
    let max_norm = (0..n)
        .map(|i| (disp[i].powi(2) + disp[n + i].powi(2) + disp[2 * n + i].powi(2)).sqrt())
        .fold(0.0f64, f64::max);
    let scale = if max_norm > 0.0 { amplitude / max_norm } else { 0.0 };
    DeformationField::new(dims, disp.into_iter().map(|x| T::of(x * scale)).collect(), 0)
}

/// Blob count of [`synth_base`]. Dense, fine blobs leave few flat regions,
/// where a displacement cannot be observed at all.
pub const SYNTH_BLOBS: usize = 96;

/// Textured base image: randomly placed Gaussian blobs over a gentle
/// low-frequency ramp. Values are positive; overlapping blobs can stack
/// above 1, so callers that need a fixed range should rescale.
pub fn synth_base<T: Scalar>(dims: Dims, seed: u64) -> Volume<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
    let min_axis = dims.0.iter().copied().min().unwrap_or(1) as f64;
    let blobs: Vec<([f64; 3], f64, f64)> = (0..SYNTH_BLOBS)
        .map(|_| {
            let c = [0, 1, 2].map(|a| rng.random_range(0.0..dims.0[a] as f64));
            let s = rng.random_range(min_axis / 24.0..min_axis / 10.0).max(0.75);
            let amp = rng.random_range(0.4..1.0);
            (c, s, amp)
        })
        .collect();
    let ramp = [0, 1, 2].map(|_| rng.random_range(-0.3..0.3));
    Volume::from_fn(dims, |d, h, w| {
        let p = [d as f64, h as f64, w as f64];
        let mut v = 0.25;
        for a in 0..3 {
            v += ramp[a] * p[a] / dims.0[a].max(1) as f64;
        }
        for (c, s, amp) in &blobs {
            let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            v += amp * (-r2 / (2.0 * s * s)).exp();
        }
        T::of(v)
    })
}

/// `count` labelled spheres (labels `1..=count`) on a zero background, kept
/// inside the grid; later spheres overwrite earlier ones where they overlap.
pub fn spherical_labels(dims: Dims, count: u32, seed: u64) -> LabelVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1abe1);
    let min_axis = dims.0.iter().copied().min().unwrap_or(1) as f64;
    let mut labels = LabelVolume::zeros(dims);
    for label in 1..=count {
        let r = rng.random_range(min_axis / 8.0..min_axis / 5.0).max(1.0);
        let c = [0, 1, 2].map(|a| {
            let n = dims.0[a] as f64;
            if n > 2.0 * r + 1.0 {
                rng.random_range(r..n - 1.0 - r)
            } else {
                (n - 1.0) / 2.0
            }
        });
        let data = labels.data_mut();
        for d in 0..dims.d() {
            for h in 0..dims.h() {
                for w in 0..dims.w() {
                    let p = [d as f64, h as f64, w as f64];
                    let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                    if r2 <= r * r {
                        data[dims.index(d, h, w)] = label;
                    }
                }
            }
        }
    }
    labels
}

/// The field `f` with `f(v) = -g(v + f(v))`, found by fixed-point
/// iteration. Warping `base(v + g(v))` by `f` gives back `base` wherever the
/// iteration converges, so `f` is the registration target.
pub fn approximate_inverse<T: Scalar>(g: &DeformationField<T>, iterations: usize) -> DeformationField<T> {
    let dims = g.dims();
    let n = dims.voxels();
    let mut f = vec![T::zero(); 3 * n];
    let mut next = f.clone();
    for _ in 0..iterations {
        let mut i = 0;
        for d in 0..dims.d() {
            for h in 0..dims.h() {
                for w in 0..dims.w() {
                    let p = [
                        T::of(d as f64) + f[i],
                        T::of(h as f64) + f[n + i],
                        T::of(w as f64) + f[2 * n + i],
                    ];
                    for c in 0..3 {
                        next[c * n + i] = -sample_trilinear(g.channel(c), dims, p).0;
                    }
                    i += 1;
                }
            }
        }
        std::mem::swap(&mut f, &mut next);
    }
    DeformationField::new(dims, f, g.level).expect("finite inverse of a finite field")
}

/// Fixed-point iterations used for [`SynthPair::target`].
pub const INVERSE_ITERATIONS: usize = 30;

/// A synthetic registration problem with known ground truth.
#[derive(Debug, Clone)]
pub struct SynthPair<T> {
    pub fixed: Volume<T>,
    pub moving: Volume<T>,
    pub fixed_labels: LabelVolume,
    pub moving_labels: LabelVolume,
    /// The deformation applied to produce the moving image.
    pub applied: DeformationField<T>,
    /// The field that maps the moving image back onto the fixed image.
    pub target: DeformationField<T>,
}

/// `fixed = base`, `moving = warp(base, field)`, and the labels warped by the
/// same field with nearest-neighbour sampling.
pub fn synth_pair<T: Scalar>(
    base: &Volume<T>,
    field: &DeformationField<T>,
    labels: &LabelVolume,
) -> Result<SynthPair<T>> {
    if labels.dims() != base.dims() {
        return Err(Error::DimMismatch(format!(
            "labels {} vs base {}",
            labels.dims(),
            base.dims()
        )));
    }
    let moving = warp_trilinear(base, field)?;
    let moving_labels = warp_labels_nearest(labels, field)?;
    Ok(SynthPair {
        fixed: base.clone(),
        moving,
        fixed_labels: labels.clone(),
        moving_labels,
        applied: field.clone(),
        target: approximate_inverse(field, INVERSE_ITERATIONS),
    })
}

/// Number of spheres in generated label volumes.
pub const SYNTH_LABELS: u32 = 4;

/// Base image, field and labels all derived from one seed.
pub fn synth_case<T: Scalar>(dims: Dims, amplitude: f64, sigma: f64, seed: u64) -> Result<SynthPair<T>> {
    let base = synth_base(dims, seed);
    let field = synth_deformation(dims, amplitude, sigma, seed)?;
    let labels = spherical_labels(dims, SYNTH_LABELS, seed);
    synth_pair(&base, &field, &labels)
}

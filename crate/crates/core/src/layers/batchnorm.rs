//! Per-channel batch normalization over `(batch, D, H, W)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::FeatureMap;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Stored running statistics.
    Infer,
}

/// Learnable affine parameters plus running statistics.
///
/// Running statistics follow `running = momentum * running + (1 - momentum) * batch`
/// with the biased batch variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BnParams<T> {
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::of(DEFAULT_BN_EPS),
            momentum: T::of(DEFAULT_BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds one set of batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BnBatchStats<T>) {
        let m = self.momentum;
        let one_m = T::one() - m;
        for c in 0..self.channels() {
            self.running_mean[c] = m * self.running_mean[c] + one_m * stats.mean[c];
            self.running_var[c] = m * self.running_var[c] + one_m * stats.var[c];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// What the train-mode backward pass needs.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub stats: BnBatchStats<T>,
    pub inv_std: Vec<T>,
    pub xhat: FeatureMap<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn check<T: Scalar>(x: &FeatureMap<T>, p: &BnParams<T>) -> Result<()> {
    if x.channels != p.channels() {
        return Err(Error::ChannelMismatch {
            expected: p.channels(),
            got: x.channels,
        });
    }
    Ok(())
}

/// Train-mode normalization with batch statistics. Running statistics are not
/// touched here; apply [`BnParams::update_running`] with the returned stats.
pub fn batchnorm_train<T: Scalar>(
    x: &FeatureMap<T>,
    p: &BnParams<T>,
) -> Result<(FeatureMap<T>, BnCache<T>)> {
    check(x, p)?;
    let channels = x.channels;
    let n = (x.batch * x.dims.voxels()) as f64;
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    let mut inv_std = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..x.batch {
            s += x.channel(b, c).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / n;
        let mut ss = 0.0;
        for b in 0..x.batch {
            ss += x
                .channel(b, c)
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = T::of(mu);
        var[c] = T::of(ss / n);
        inv_std[c] = T::one() / (var[c] + p.eps).sqrt();
    }
    let mut xhat = FeatureMap::zeros(x.batch, channels, x.dims);
    let mut y = FeatureMap::zeros(x.batch, channels, x.dims);
    for b in 0..x.batch {
        for c in 0..channels {
            let (mu, is, g, be) = (mean[c], inv_std[c], p.gamma[c], p.beta[c]);
            let src = x.channel(b, c);
            let xh = xhat.channel_mut(b, c);
            for (dst, &v) in xh.iter_mut().zip(src) {
                *dst = (v - mu) * is;
            }
            let xh = xhat.channel(b, c).to_vec();
            for (dst, v) in y.channel_mut(b, c).iter_mut().zip(xh) {
                *dst = g * v + be;
            }
        }
    }
    Ok((
        y,
        BnCache {
            stats: BnBatchStats { mean, var },
            inv_std,
            xhat,
        },
    ))
}

/// Inference-mode normalization with the stored running statistics.
pub fn batchnorm_infer<T: Scalar>(x: &FeatureMap<T>, p: &BnParams<T>) -> Result<FeatureMap<T>> {
    check(x, p)?;
    let mut y = x.clone();
    for b in 0..x.batch {
        for c in 0..x.channels {
            let scale = p.gamma[c] / (p.running_var[c] + p.eps).sqrt();
            let shift = p.beta[c] - p.running_mean[c] * scale;
            for v in y.channel_mut(b, c) {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(y)
}

/// Train-mode backward pass: returns `(d input, d gamma/beta)`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &FeatureMap<T>,
    cache: &BnCache<T>,
    p: &BnParams<T>,
) -> Result<(FeatureMap<T>, BnGrads<T>)> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::DimMismatch(format!(
            "batchnorm upstream gradient {:?} vs cached {:?}",
            grad_out.shape(),
            cache.xhat.shape()
        )));
    }
    let channels = grad_out.channels;
    let n = (grad_out.batch * grad_out.dims.voxels()) as f64;
    let mut grads = BnGrads {
        gamma: vec![T::zero(); channels],
        beta: vec![T::zero(); channels],
    };
    let mut dx = FeatureMap::zeros(grad_out.batch, channels, grad_out.dims);
    for c in 0..channels {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..grad_out.batch {
            for (&g, &xh) in grad_out.channel(b, c).iter().zip(cache.xhat.channel(b, c)) {
                sum_g += g.as_f64();
                sum_gx += (g * xh).as_f64();
            }
        }
        grads.beta[c] = T::of(sum_g);
        grads.gamma[c] = T::of(sum_gx);
        let k = p.gamma[c] * cache.inv_std[c];
        let mean_g = T::of(sum_g / n);
        let mean_gx = T::of(sum_gx / n);
        for b in 0..grad_out.batch {
            let gsrc = grad_out.channel(b, c);
            let xsrc = cache.xhat.channel(b, c);
            for ((dst, &g), &xh) in dx.channel_mut(b, c).iter_mut().zip(gsrc).zip(xsrc) {
                *dst = k * (g - mean_g - xh * mean_gx);
            }
        }
    }
    Ok((dx, grads))
}

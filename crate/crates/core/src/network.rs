//! The registration FCN: parameters, forward pass with cached activations,
//! hand-scheduled backpropagation, and the two ablation variants.
//!
//! `multires` wiring (all convs k3 s1 same-padded, pools k3 s2, deconvs k3 s2
//! onto the stored pyramid dims):
//!
//! ```text
//! [fixed, moving] -> conv1(32) -> pool1 -> conv2(64) -> pool2 -> conv3(128) -> reg3 (level 2)
//!                                                                  |
//!                                           deconv1(64) <----------+ -> reg2 (level 1)
//!                                                |
//!                                           deconv2(32) -> conv4(64) -> reg1 (level 0)
//! ```
//!
//! Every conv/deconv except the regression heads is followed by batch norm
//! and ReLU. `no_pool` keeps conv1..conv3 at full resolution with a single
//! head; `coarse_interp` keeps the pooled trunk up to reg3 and upsamples its
//! field trilinearly to full resolution.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::{
    avgpool3d, avgpool3d_backward, batchnorm_backward, batchnorm_infer, batchnorm_train, conv3d,
    conv3d_backward, maxpool3d, maxpool3d_backward, relu, relu_backward, transposed_conv3d,
    transposed_conv3d_backward, BnBatchStats, BnCache, BnMode, BnParams, ConvGrads, ConvParams,
    MaxPoolCache, PoolKind,
};
use crate::losses::{multi_res_loss, LossConfig, LossReport};
use crate::scalar::Scalar;
use crate::volume::{Dims, FeatureMap, Volume};
use crate::warp::{
    upsample_field_backward, upsample_field_trilinear, warp_channel, warp_channel_backward,
    DeformationField,
};

pub const POOL_KERNEL: usize = 3;
pub const POOL_STRIDE: usize = 2;
/// Smallest spatial extent accepted by the pooled variants.
pub const MIN_POOLED_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ArchitectureVariant {
    #[default]
    MultiRes,
    NoPool,
    CoarseInterp,
}

impl ArchitectureVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchitectureVariant::MultiRes => "multires",
            ArchitectureVariant::NoPool => "no_pool",
            ArchitectureVariant::CoarseInterp => "coarse_interp",
        }
    }

    /// Pyramid levels at which the loss is evaluated.
    pub fn loss_levels(&self) -> &'static [usize] {
        match self {
            ArchitectureVariant::MultiRes => &[0, 1, 2],
            ArchitectureVariant::NoPool | ArchitectureVariant::CoarseInterp => &[0],
        }
    }

    fn pooled(&self) -> bool {
        !matches!(self, ArchitectureVariant::NoPool)
    }

    fn layer_ids(&self) -> &'static [LayerId] {
        use LayerId::*;
        match self {
            ArchitectureVariant::MultiRes => {
                &[Conv1, Conv2, Conv3, Reg3, Deconv1, Reg2, Deconv2, Conv4, Reg1]
            }
            ArchitectureVariant::NoPool => &[Conv1, Conv2, Conv3, Reg1],
            ArchitectureVariant::CoarseInterp => &[Conv1, Conv2, Conv3, Reg3],
        }
    }
}

impl std::fmt::Display for ArchitectureVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multires" => Ok(ArchitectureVariant::MultiRes),
            "no_pool" => Ok(ArchitectureVariant::NoPool),
            "coarse_interp" => Ok(ArchitectureVariant::CoarseInterp),
            _ => Err(Error::InvalidArgument(format!(
                "unknown variant '{s}' (expected multires, no_pool or coarse_interp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerId {
    Conv1,
    Conv2,
    Conv3,
    Conv4,
    Deconv1,
    Deconv2,
    Reg1,
    Reg2,
    Reg3,
}

impl LayerId {
    pub fn name(&self) -> &'static str {
        match self {
            LayerId::Conv1 => "conv1",
            LayerId::Conv2 => "conv2",
            LayerId::Conv3 => "conv3",
            LayerId::Conv4 => "conv4",
            LayerId::Deconv1 => "deconv1",
            LayerId::Deconv2 => "deconv2",
            LayerId::Reg1 => "reg1",
            LayerId::Reg2 => "reg2",
            LayerId::Reg3 => "reg3",
        }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, LayerId::Reg1 | LayerId::Reg2 | LayerId::Reg3)
    }

    pub fn is_transposed(&self) -> bool {
        matches!(self, LayerId::Deconv1 | LayerId::Deconv2)
    }

    /// `(out, in)` channels in a given variant.
    fn channels(&self, variant: ArchitectureVariant) -> (usize, usize) {
        match (self, variant) {
            (LayerId::Conv1, _) => (32, 2),
            (LayerId::Conv2, _) => (64, 32),
            (LayerId::Conv3, _) => (128, 64),
            (LayerId::Deconv1, _) => (64, 128),
            (LayerId::Deconv2, _) => (32, 64),
            (LayerId::Conv4, _) => (64, 32),
            (LayerId::Reg3, _) => (3, 128),
            (LayerId::Reg2, _) => (3, 64),
            (LayerId::Reg1, ArchitectureVariant::NoPool) => (3, 128),
            (LayerId::Reg1, _) => (3, 64),
        }
    }
}

/// One conv or transposed-conv layer, with batch norm unless it is a head.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub id: LayerId,
    pub conv: ConvParams<T>,
    pub bn: Option<BnParams<T>>,
}

/// A named view of one parameter tensor.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
    pub trainable: bool,
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
    pub trainable: bool,
}

/// All learnable weights (and batch-norm buffers) of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct RegNetParams<T> {
    variant: ArchitectureVariant,
    pub pool: PoolKind,
    pub layers: Vec<Layer<T>>,
    generation: u64,
}

impl<T: Scalar> RegNetParams<T> {
    /// Zero-valued parameters with the variant's shapes.
    pub fn zeros(variant: ArchitectureVariant) -> Self {
        let layers = variant
            .layer_ids()
            .iter()
            .map(|&id| {
                let (out, inp) = id.channels(variant);
                let stride = if id.is_transposed() { 2 } else { 1 };
                let conv = ConvParams::zeros(out, inp, 3, stride, 1).expect("static layer shapes");
                let bn = (!id.is_head()).then(|| BnParams::new(out));
                Layer { id, conv, bn }
            })
            .collect();
        RegNetParams {
            variant,
            pool: PoolKind::Max,
            layers,
            generation: 0,
        }
    }

    pub fn variant(&self) -> ArchitectureVariant {
        self.variant
    }

    /// Bumped whenever an optimizer step changes the weights.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub(crate) fn bump_generation(&mut self) {
        self.generation += 1;
    }

    pub fn layer(&self, id: LayerId) -> Option<&Layer<T>> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_mut(&mut self, id: LayerId) -> Option<&mut Layer<T>> {
        self.layers.iter_mut().find(|l| l.id == id)
    }

    fn get(&self, id: LayerId) -> Result<&Layer<T>> {
        self.layer(id).ok_or_else(|| {
            Error::InvalidShape(format!("variant {} has no layer {}", self.variant, id.name()))
        })
    }

    /// Every tensor in canonical order: weight, bias, then gamma, beta,
    /// running mean and running variance per layer.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            let n = l.id.name();
            out.push(TensorRef {
                name: format!("{n}.weight"),
                shape: l.conv.weight_shape().to_vec(),
                data: &l.conv.weight,
                trainable: true,
            });
            out.push(TensorRef {
                name: format!("{n}.bias"),
                shape: vec![l.conv.bias.len()],
                data: &l.conv.bias,
                trainable: true,
            });
            if let Some(bn) = &l.bn {
                let c = bn.channels();
                for (suffix, data, trainable) in [
                    ("bn.gamma", &bn.gamma, true),
                    ("bn.beta", &bn.beta, true),
                    ("bn.running_mean", &bn.running_mean, false),
                    ("bn.running_var", &bn.running_var, false),
                ] {
                    out.push(TensorRef {
                        name: format!("{n}.{suffix}"),
                        shape: vec![c],
                        data,
                        trainable,
                    });
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            let n = l.id.name();
            let wshape = l.conv.weight_shape().to_vec();
            let blen = l.conv.bias.len();
            out.push(TensorMut {
                name: format!("{n}.weight"),
                shape: wshape,
                data: &mut l.conv.weight,
                trainable: true,
            });
            out.push(TensorMut {
                name: format!("{n}.bias"),
                shape: vec![blen],
                data: &mut l.conv.bias,
                trainable: true,
            });
            if let Some(bn) = &mut l.bn {
                let c = bn.channels();
                let BnParams {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } = bn;
                for (suffix, data, trainable) in [
                    ("bn.gamma", gamma, true),
                    ("bn.beta", beta, true),
                    ("bn.running_mean", running_mean, false),
                    ("bn.running_var", running_var, false),
                ] {
                    out.push(TensorMut {
                        name: format!("{n}.{suffix}"),
                        shape: vec![c],
                        data,
                        trainable,
                    });
                }
            }
        }
        out
    }

    /// Trainable tensors only, in canonical order.
    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        self.tensors_mut()
            .into_iter()
            .filter(|t| t.trainable)
            .map(|t| t.data)
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.data.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> RegNetParams<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        RegNetParams {
            variant: self.variant,
            pool: self.pool,
            generation: self.generation,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    id: l.id,
                    conv: ConvParams {
                        out_channels: l.conv.out_channels,
                        in_channels: l.conv.in_channels,
                        kernel: l.conv.kernel,
                        stride: l.conv.stride,
                        padding: l.conv.padding,
                        weight: cv(&l.conv.weight),
                        bias: cv(&l.conv.bias),
                    },
                    bn: l.bn.as_ref().map(|b| BnParams {
                        gamma: cv(&b.gamma),
                        beta: cv(&b.beta),
                        running_mean: cv(&b.running_mean),
                        running_var: cv(&b.running_var),
                        eps: U::of(b.eps.as_f64()),
                        momentum: U::of(b.momentum.as_f64()),
                    }),
                })
                .collect(),
        }
    }
}

/// He-initialized parameters: conv weights ~ N(0, 2 / fan_in), zero biases,
/// unit BN scale, and all-zero regression heads so the initial field is the
/// identity transform.
pub fn init_params<T: Scalar>(variant: ArchitectureVariant, seed: u64) -> RegNetParams<T> {
    let mut params = RegNetParams::zeros(variant);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut params.layers {
        if layer.id.is_head() {
            continue;
        }
        let fan_in = (layer.conv.in_channels * layer.conv.taps()) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in &mut layer.conv.weight {
            *w = T::of(normal.sample(&mut rng));
        }
    }
    params
}

/// Gradients aligned with [`RegNetParams::trainable_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct RegNetGrads<T> {
    pub layers: Vec<LayerGrads<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub id: LayerId,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
}

impl<T: Scalar> RegNetGrads<T> {
    pub fn zeros_like(params: &RegNetParams<T>) -> Self {
        RegNetGrads {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    id: l.id,
                    weight: vec![T::zero(); l.conv.weight.len()],
                    bias: vec![T::zero(); l.conv.bias.len()],
                    gamma: l.bn.as_ref().map(|b| vec![T::zero(); b.channels()]),
                    beta: l.bn.as_ref().map(|b| vec![T::zero(); b.channels()]),
                })
                .collect(),
        }
    }

    pub fn layer(&self, id: LayerId) -> Option<&LayerGrads<T>> {
        self.layers.iter().find(|l| l.id == id)
    }

    fn layer_mut(&mut self, id: LayerId) -> &mut LayerGrads<T> {
        self.layers
            .iter_mut()
            .find(|l| l.id == id)
            .expect("grads built from the same variant")
    }

    /// Gradient slices in the order of [`RegNetParams::trainable_mut`].
    pub fn trainable(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let (Some(g), Some(b)) = (&l.gamma, &l.beta) {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.trainable()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn add_assign(&mut self, other: &RegNetGrads<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            add_into(&mut a.weight, &b.weight);
            add_into(&mut a.bias, &b.bias);
            if let (Some(x), Some(y)) = (a.gamma.as_mut(), b.gamma.as_ref()) {
                add_into(x, y);
            }
            if let (Some(x), Some(y)) = (a.beta.as_mut(), b.beta.as_ref()) {
                add_into(x, y);
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Intermediate state of one conv/deconv + BN + ReLU block.
#[derive(Debug, Clone)]
struct BlockCache<T> {
    id: LayerId,
    input: FeatureMap<T>,
    bn: Option<BnCache<T>>,
    output: FeatureMap<T>,
}

#[derive(Debug, Clone)]
enum PoolCache {
    Max(MaxPoolCache),
    Avg(Dims),
}

/// Activations of a train-mode forward pass needed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    variant: ArchitectureVariant,
    generation: u64,
    train: bool,
    batch: usize,
    blocks: Vec<BlockCache<T>>,
    pools: Vec<PoolCache>,
    /// Raw coarse field of `coarse_interp` before upsampling.
    coarse_dims: Option<Dims>,
}

impl<T: Scalar> ForwardCache<T> {
    fn block(&self, id: LayerId) -> Result<&BlockCache<T>> {
        self.blocks
            .iter()
            .find(|b| b.id == id)
            .ok_or_else(|| Error::StaleCache(format!("no cached activations for {}", id.name())))
    }
}

/// Predicted fields and warped images at one loss level, one entry per pair.
#[derive(Debug, Clone)]
pub struct LevelOutput<T> {
    pub level: usize,
    pub fields: Vec<DeformationField<T>>,
    pub fixed: Vec<Volume<T>>,
    pub moving: Vec<Volume<T>>,
    pub warped: Vec<Volume<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub levels: Vec<LevelOutput<T>>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn level(&self, level: usize) -> Option<&LevelOutput<T>> {
        self.levels.iter().find(|l| l.level == level)
    }
}

struct Runner<'p, T> {
    params: &'p RegNetParams<T>,
    mode: BnMode,
    blocks: Vec<BlockCache<T>>,
    pools: Vec<PoolCache>,
    stats: Vec<(LayerId, BnBatchStats<T>)>,
}

impl<'p, T: Scalar> Runner<'p, T> {
    /// conv/deconv -> BN -> ReLU. `target` selects the transposed path.
    fn block(&mut self, id: LayerId, x: FeatureMap<T>, target: Option<Dims>) -> Result<FeatureMap<T>> {
        let layer = self.params.get(id)?;
        let z = match target {
            Some(t) => transposed_conv3d(&x, &layer.conv, t)?,
            None => conv3d(&x, &layer.conv)?,
        };
        let bn = layer.bn.as_ref().expect("non-head layers carry batch norm");
        let (z, cache) = match self.mode {
            BnMode::Train => {
                let (y, c) = batchnorm_train(&z, bn)?;
                self.stats.push((id, c.stats.clone()));
                (y, Some(c))
            }
            BnMode::Infer => (batchnorm_infer(&z, bn)?, None),
        };
        let y = relu(&z);
        if self.mode == BnMode::Train {
            self.blocks.push(BlockCache {
                id,
                input: x,
                bn: cache,
                output: y.clone(),
            });
        }
        Ok(y)
    }

    fn head(&mut self, id: LayerId, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        conv3d(x, &self.params.get(id)?.conv)
    }

    fn pool(&mut self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        match self.params.pool {
            PoolKind::Max => {
                let (y, c) = maxpool3d(x, POOL_KERNEL, POOL_STRIDE)?;
                if self.mode == BnMode::Train {
                    self.pools.push(PoolCache::Max(c));
                }
                Ok(y)
            }
            PoolKind::Avg => {
                if self.mode == BnMode::Train {
                    self.pools.push(PoolCache::Avg(x.dims));
                }
                avgpool3d(x, POOL_KERNEL, POOL_STRIDE)
            }
        }
    }
}

fn check_inputs<T: Scalar>(
    variant: ArchitectureVariant,
    fixed: &[&Volume<T>],
    moving: &[&Volume<T>],
) -> Result<Dims> {
    if fixed.is_empty() || fixed.len() != moving.len() {
        return Err(Error::InvalidArgument(format!(
            "need a non-empty batch of pairs, got {} fixed and {} moving",
            fixed.len(),
            moving.len()
        )));
    }
    let dims = fixed[0].dims();
    for v in fixed.iter().chain(moving) {
        if v.dims() != dims {
            return Err(Error::DimMismatch(format!(
                "all images in a batch must share dims: {} vs {}",
                v.dims(),
                dims
            )));
        }
    }
    if variant.pooled() && dims.0.iter().any(|&n| n < MIN_POOLED_DIM) {
        return Err(Error::InvalidShape(format!(
            "{dims} is too small for two pooling stages (need >= {MIN_POOLED_DIM} per axis)"
        )));
    }
    if dims.voxels() < 2 {
        return Err(Error::InvalidShape(format!("{dims} has fewer than 2 voxels")));
    }
    Ok(dims)
}

fn fields_from_map<T: Scalar>(map: &FeatureMap<T>, level: usize) -> Result<Vec<DeformationField<T>>> {
    (0..map.batch)
        .map(|b| DeformationField::new(map.dims, map.sample(b).to_vec(), level))
        .collect()
}

fn forward_impl<T: Scalar>(
    params: &RegNetParams<T>,
    fixed: &[&Volume<T>],
    moving: &[&Volume<T>],
    mode: BnMode,
) -> Result<(ForwardOutput<T>, ForwardCache<T>, Vec<(LayerId, BnBatchStats<T>)>)> {
    let variant = params.variant;
    let dims = check_inputs(variant, fixed, moving)?;
    let batch = fixed.len();
    let pyr = dims.pyramid(3);

    let mut x0 = FeatureMap::zeros(batch, 2, dims);
    for b in 0..batch {
        x0.channel_mut(b, 0).copy_from_slice(fixed[b].data());
        x0.channel_mut(b, 1).copy_from_slice(moving[b].data());
    }

    let mut run = Runner {
        params,
        mode,
        blocks: Vec::new(),
        pools: Vec::new(),
        stats: Vec::new(),
    };

    // raw head outputs keyed by pyramid level
    let mut heads: Vec<(usize, FeatureMap<T>)> = Vec::new();
    let mut coarse_dims = None;
    match variant {
        ArchitectureVariant::NoPool => {
            let c1 = run.block(LayerId::Conv1, x0, None)?;
            let c2 = run.block(LayerId::Conv2, c1, None)?;
            let c3 = run.block(LayerId::Conv3, c2, None)?;
            heads.push((0, run.head(LayerId::Reg1, &c3)?));
        }
        ArchitectureVariant::MultiRes | ArchitectureVariant::CoarseInterp => {
            let c1 = run.block(LayerId::Conv1, x0, None)?;
            let p1 = run.pool(&c1)?;
            let c2 = run.block(LayerId::Conv2, p1, None)?;
            let p2 = run.pool(&c2)?;
            let c3 = run.block(LayerId::Conv3, p2, None)?;
            let f2 = run.head(LayerId::Reg3, &c3)?;
            if variant == ArchitectureVariant::CoarseInterp {
                coarse_dims = Some(f2.dims);
                let mut up = FeatureMap::zeros(batch, 3, pyr[0]);
                for b in 0..batch {
                    let coarse = DeformationField::new(f2.dims, f2.sample(b).to_vec(), 2)?;
                    let fine = upsample_field_trilinear(&coarse, pyr[0])?;
                    up.sample_mut(b).copy_from_slice(fine.disp());
                }
                heads.push((0, up));
            } else {
                let u1 = run.block(LayerId::Deconv1, c3, Some(pyr[1]))?;
                let f1 = run.head(LayerId::Reg2, &u1)?;
                let u2 = run.block(LayerId::Deconv2, u1, Some(pyr[0]))?;
                let c4 = run.block(LayerId::Conv4, u2, None)?;
                let f0 = run.head(LayerId::Reg1, &c4)?;
                heads.push((0, f0));
                heads.push((1, f1));
                heads.push((2, f2));
            }
        }
    }

    let mut fixed_pyr: Vec<Vec<Volume<T>>> = fixed.iter().map(|v| v.pyramid(3)).collect();
    let mut moving_pyr: Vec<Vec<Volume<T>>> = moving.iter().map(|v| v.pyramid(3)).collect();
    let mut levels = Vec::with_capacity(heads.len());
    for (level, map) in heads {
        let fields = fields_from_map(&map, level)?;
        let mut warped = Vec::with_capacity(batch);
        let mut fx = Vec::with_capacity(batch);
        let mut mv = Vec::with_capacity(batch);
        for b in 0..batch {
            let m = std::mem::replace(&mut moving_pyr[b][level], Volume::zeros(Dims::new(0, 0, 0)));
            let f = std::mem::replace(&mut fixed_pyr[b][level], Volume::zeros(Dims::new(0, 0, 0)));
            let w = Volume::new(m.dims(), warp_channel(m.data(), m.dims(), fields[b].disp()))?;
            warped.push(w);
            fx.push(f);
            mv.push(m);
        }
        levels.push(LevelOutput {
            level,
            fields,
            fixed: fx,
            moving: mv,
            warped,
        });
    }

    let cache = ForwardCache {
        variant,
        generation: params.generation,
        train: mode == BnMode::Train,
        batch,
        blocks: run.blocks,
        pools: run.pools,
        coarse_dims,
    };
    Ok((ForwardOutput { levels }, cache, run.stats))
}

/// Train-mode forward: batch statistics in BN, running statistics updated.
pub fn forward_train<T: Scalar>(
    params: &mut RegNetParams<T>,
    fixed: &[&Volume<T>],
    moving: &[&Volume<T>],
) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
    let (out, cache, stats) = forward_impl(params, fixed, moving, BnMode::Train)?;
    for (id, s) in stats {
        if let Some(bn) = params.layer_mut(id).and_then(|l| l.bn.as_mut()) {
            bn.update_running(&s);
        }
    }
    Ok((out, cache))
}

/// Inference-mode forward; pure in `params`.
pub fn forward_infer<T: Scalar>(
    params: &RegNetParams<T>,
    fixed: &[&Volume<T>],
    moving: &[&Volume<T>],
) -> Result<ForwardOutput<T>> {
    Ok(forward_impl(params, fixed, moving, BnMode::Infer)?.0)
}

/// Loss weight of each pyramid level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelWeights(pub [f64; 3]);

impl LevelWeights {
    pub fn get(&self, level: usize) -> f64 {
        self.0[level]
    }
}

/// d total / d field for every loss level, one `(batch, 3, dims)` map each,
/// ordered like [`ForwardOutput::levels`].
#[derive(Debug, Clone)]
pub struct FieldGrads<T> {
    pub levels: Vec<FeatureMap<T>>,
}

impl<T: Scalar> FieldGrads<T> {
    pub fn zeros_like(out: &ForwardOutput<T>) -> Self {
        FieldGrads {
            levels: out
                .levels
                .iter()
                .map(|l| FeatureMap::zeros(l.fields.len(), 3, l.fields[0].dims()))
                .collect(),
        }
    }
}

/// Batch-averaged composite loss of a forward output plus its gradient with
/// respect to every predicted field (through the warp).
pub fn loss<T: Scalar>(
    out: &ForwardOutput<T>,
    weights: LevelWeights,
    config: &LossConfig,
) -> Result<(LossReport, FieldGrads<T>)> {
    let batch = out.levels[0].fields.len();
    let scale = T::one() / T::of(batch as f64);
    let w: Vec<f64> = out.levels.iter().map(|l| weights.get(l.level)).collect();
    let mut grads = FieldGrads::zeros_like(out);
    let mut reports = Vec::with_capacity(batch);
    for b in 0..batch {
        let fixed: Vec<&Volume<T>> = out.levels.iter().map(|l| &l.fixed[b]).collect();
        let warped: Vec<&Volume<T>> = out.levels.iter().map(|l| &l.warped[b]).collect();
        let fields: Vec<&DeformationField<T>> = out.levels.iter().map(|l| &l.fields[b]).collect();
        let (rep, g) = multi_res_loss(&fixed, &warped, &fields, &w, config)?;
        for (i, lvl) in out.levels.iter().enumerate() {
            let m = &lvl.moving[b];
            let through_warp =
                warp_channel_backward(m.data(), m.dims(), lvl.fields[b].disp(), &g.warped[i]);
            let dst = grads.levels[i].sample_mut(b);
            for ((d, &a), &t) in dst.iter_mut().zip(&through_warp).zip(&g.fields[i]) {
                *d = (a + t) * scale;
            }
        }
        reports.push(rep);
    }
    Ok((LossReport::mean(&reports)?, grads))
}

fn block_backward<T: Scalar>(
    params: &RegNetParams<T>,
    cache: &BlockCache<T>,
    grad_out: &FeatureMap<T>,
    grads: &mut RegNetGrads<T>,
    need_input_grad: bool,
) -> Result<Option<FeatureMap<T>>> {
    let layer = params.get(cache.id)?;
    let g = relu_backward(&cache.output, grad_out)?;
    let bn = layer.bn.as_ref().expect("block has batch norm");
    let bn_cache = cache
        .bn
        .as_ref()
        .ok_or_else(|| Error::StaleCache("block cached without batch statistics".into()))?;
    let (g, bng) = batchnorm_backward(&g, bn_cache, bn)?;
    let (dx, cg) = if cache.id.is_transposed() {
        transposed_conv3d_backward(&cache.input, &layer.conv, &g, need_input_grad)?
    } else {
        conv3d_backward(&cache.input, &layer.conv, &g, need_input_grad)?
    };
    let lg = grads.layer_mut(cache.id);
    add_into(&mut lg.weight, &cg.weight);
    add_into(&mut lg.bias, &cg.bias);
    add_into(lg.gamma.as_mut().expect("bn grads"), &bng.gamma);
    add_into(lg.beta.as_mut().expect("bn grads"), &bng.beta);
    Ok(dx)
}

fn head_backward<T: Scalar>(
    params: &RegNetParams<T>,
    id: LayerId,
    input: &FeatureMap<T>,
    grad_out: &FeatureMap<T>,
    grads: &mut RegNetGrads<T>,
) -> Result<FeatureMap<T>> {
    let (dx, cg): (Option<FeatureMap<T>>, ConvGrads<T>) =
        conv3d_backward(input, &params.get(id)?.conv, grad_out, true)?;
    let lg = grads.layer_mut(id);
    add_into(&mut lg.weight, &cg.weight);
    add_into(&mut lg.bias, &cg.bias);
    Ok(dx.expect("input grad requested"))
}

fn pool_backward<T: Scalar>(cache: &PoolCache, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    match cache {
        PoolCache::Max(c) => maxpool3d_backward(grad_out, c),
        PoolCache::Avg(dims) => avgpool3d_backward(grad_out, *dims, POOL_KERNEL, POOL_STRIDE),
    }
}

fn add_map<T: Scalar>(a: &mut FeatureMap<T>, b: &FeatureMap<T>) {
    add_into(&mut a.data, &b.data);
}

/// Reverse-mode gradients of the loss with respect to every trainable
/// parameter, given d loss / d field for every loss level.
pub fn backward<T: Scalar>(
    params: &RegNetParams<T>,
    cache: &ForwardCache<T>,
    field_grads: &FieldGrads<T>,
) -> Result<RegNetGrads<T>> {
    if !cache.train {
        return Err(Error::StaleCache(
            "cache comes from an inference-mode forward pass".into(),
        ));
    }
    if cache.variant != params.variant || cache.generation != params.generation {
        return Err(Error::StaleCache(format!(
            "cache from {} generation {}, params are {} generation {}",
            cache.variant, cache.generation, params.variant, params.generation
        )));
    }
    let expected_levels = cache.variant.loss_levels().len();
    if field_grads.levels.len() != expected_levels
        || field_grads.levels.iter().any(|g| g.batch != cache.batch)
    {
        return Err(Error::DimMismatch(format!(
            "expected {expected_levels} field gradients for a batch of {}",
            cache.batch
        )));
    }
    let mut grads = RegNetGrads::zeros_like(params);
    let c1 = cache.block(LayerId::Conv1)?;
    let c2 = cache.block(LayerId::Conv2)?;
    let c3 = cache.block(LayerId::Conv3)?;

    let d_c3 = match cache.variant {
        ArchitectureVariant::NoPool => {
            head_backward(params, LayerId::Reg1, &c3.output, &field_grads.levels[0], &mut grads)?
        }
        ArchitectureVariant::CoarseInterp => {
            let coarse = cache
                .coarse_dims
                .ok_or_else(|| Error::StaleCache("missing coarse field dims".into()))?;
            let g0 = &field_grads.levels[0];
            let mut gc = FeatureMap::zeros(cache.batch, 3, coarse);
            for b in 0..cache.batch {
                let back = upsample_field_backward(coarse, g0.dims, g0.sample(b))?;
                gc.sample_mut(b).copy_from_slice(&back);
            }
            head_backward(params, LayerId::Reg3, &c3.output, &gc, &mut grads)?
        }
        ArchitectureVariant::MultiRes => {
            let c4 = cache.block(LayerId::Conv4)?;
            let u2 = cache.block(LayerId::Deconv2)?;
            let u1 = cache.block(LayerId::Deconv1)?;
            let d_c4 =
                head_backward(params, LayerId::Reg1, &c4.output, &field_grads.levels[0], &mut grads)?;
            let d_u2 = block_backward(params, c4, &d_c4, &mut grads, true)?.expect("input grad");
            let mut d_u1 = block_backward(params, u2, &d_u2, &mut grads, true)?.expect("input grad");
            let from_reg2 =
                head_backward(params, LayerId::Reg2, &u1.output, &field_grads.levels[1], &mut grads)?;
            add_map(&mut d_u1, &from_reg2);
            let mut d_c3 = block_backward(params, u1, &d_u1, &mut grads, true)?.expect("input grad");
            let from_reg3 =
                head_backward(params, LayerId::Reg3, &c3.output, &field_grads.levels[2], &mut grads)?;
            add_map(&mut d_c3, &from_reg3);
            d_c3
        }
    };

    let d_in3 = block_backward(params, c3, &d_c3, &mut grads, true)?.expect("input grad");
    let d_c2 = if cache.variant.pooled() {
        pool_backward(&cache.pools[1], &d_in3)?
    } else {
        d_in3
    };
    let d_in2 = block_backward(params, c2, &d_c2, &mut grads, true)?.expect("input grad");
    let d_c1 = if cache.variant.pooled() {
        pool_backward(&cache.pools[0], &d_in2)?
    } else {
        d_in2
    };
    block_backward(params, c1, &d_c1, &mut grads, false)?;
    Ok(grads)
}

/// Feedforward registration: inference-mode BN, full-resolution field only.
pub fn predict_field<T: Scalar>(
    params: &RegNetParams<T>,
    fixed: &Volume<T>,
    moving: &Volume<T>,
) -> Result<DeformationField<T>> {
    let mut out = forward_infer(params, &[fixed], &[moving])?;
    let level0 = out
        .levels
        .iter_mut()
        .find(|l| l.level == 0)
        .expect("every variant predicts a full-resolution field");
    Ok(level0.fields.swap_remove(0))
}

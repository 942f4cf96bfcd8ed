//! Central finite-difference checks of every backward pass, in f64.

use fcnreg::layers::activation::{relu, relu_backward};
use fcnreg::layers::batchnorm::{batchnorm_backward, batchnorm_train, BnParams};
use fcnreg::layers::conv::{
    conv3d, conv3d_backward, transposed_conv3d, transposed_conv3d_backward, ConvParams,
};
use fcnreg::layers::pool::{avgpool3d, avgpool3d_backward, maxpool3d, maxpool3d_backward};
use fcnreg::losses::{multi_res_loss, ncc, tv_l1, LossConfig, TvNorm, DEFAULT_LEVEL_WEIGHTS, TV_EPSILON};
use fcnreg::network::{
    backward, forward_train, init_params, loss, ArchitectureVariant, LevelWeights, RegNetParams,
};
use fcnreg::warp::{upsample_field_backward, upsample_field_trilinear, warp_trilinear, warp_trilinear_backward};
use fcnreg::{DeformationField, Dims, FeatureMap, Volume};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{dot, rng, uniform_map, uniform_vec, uniform_volume, Check};

pub const FD_STEP: f64 = 1e-5;
/// The composed network has thousands of ReLU and pooling decisions; a step
/// of 1e-5 lets some activations cross their kink, so it uses a finer step.
pub const NET_FD_STEP: f64 = 1e-6;
/// Operation-level tolerance.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the full composed network.
pub const NET_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely: below it the
/// central difference is dominated by rounding of the loss.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Worst relative error of `analytic[i]` against the central difference of `f`
/// in coordinate `i`, over `indices`.
pub fn fd_worst(
    x: &[f64],
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    fd_worst_with_step(FD_STEP, x, analytic, indices, f)
}

pub fn fd_worst_with_step(
    step: f64,
    x: &[f64],
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in indices {
        let x0 = probe[i];
        probe[i] = x0 + step;
        let up = f(&probe);
        probe[i] = x0 - step;
        let down = f(&probe);
        probe[i] = x0;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * step)));
    }
    worst
}

fn check(name: &str, tolerance: f64, parts: &[f64]) -> Check {
    Check {
        name: name.to_string(),
        worst: parts.iter().copied().fold(0.0, f64::max),
        tolerance,
    }
}

fn random_conv(o: usize, i: usize, stride: usize, rng: &mut ChaCha8Rng) -> ConvParams<f64> {
    let mut p = ConvParams::zeros(o, i, 3, stride, 1).unwrap();
    p.weight = uniform_vec(p.weight.len(), -0.5, 0.5, rng);
    p.bias = uniform_vec(o, -0.5, 0.5, rng);
    p
}

fn with_data(m: &FeatureMap<f64>, data: &[f64]) -> FeatureMap<f64> {
    FeatureMap::new(m.batch, m.channels, m.dims, data.to_vec()).unwrap()
}

pub fn conv3d_check(stride: usize) -> Check {
    let mut r = rng(100 + stride as u64);
    let x = uniform_map(2, 3, Dims::new(5, 4, 6), &mut r);
    let p = random_conv(4, 3, stride, &mut r);
    let y = conv3d(&x, &p).unwrap();
    let gy = uniform_map(2, 4, y.dims, &mut r);
    let (dx, g) = conv3d_backward(&x, &p, &gy, true).unwrap();
    let dx = dx.unwrap();
    let l = |x: &FeatureMap<f64>, p: &ConvParams<f64>| dot(&conv3d(x, p).unwrap().data, &gy.data);
    let ex = fd_worst(&x.data, &dx.data, 0..x.data.len(), |d| l(&with_data(&x, d), &p));
    let ew = fd_worst(&p.weight, &g.weight, 0..p.weight.len(), |w| {
        l(&x, &ConvParams { weight: w.to_vec(), ..p.clone() })
    });
    let eb = fd_worst(&p.bias, &g.bias, 0..p.bias.len(), |b| {
        l(&x, &ConvParams { bias: b.to_vec(), ..p.clone() })
    });
    check(&format!("conv3d stride {stride}"), OP_TOL, &[ex, ew, eb])
}

pub fn transposed_conv3d_check() -> Check {
    let mut r = rng(110);
    let x = uniform_map(2, 4, Dims::new(3, 2, 3), &mut r);
    let p = random_conv(3, 4, 2, &mut r);
    let target = Dims::new(5, 4, 6);
    let y = transposed_conv3d(&x, &p, target).unwrap();
    let gy = uniform_map(2, 3, y.dims, &mut r);
    let (dx, g) = transposed_conv3d_backward(&x, &p, &gy, true).unwrap();
    let dx = dx.unwrap();
    let l = |x: &FeatureMap<f64>, p: &ConvParams<f64>| {
        dot(&transposed_conv3d(x, p, target).unwrap().data, &gy.data)
    };
    let ex = fd_worst(&x.data, &dx.data, 0..x.data.len(), |d| l(&with_data(&x, d), &p));
    let ew = fd_worst(&p.weight, &g.weight, 0..p.weight.len(), |w| {
        l(&x, &ConvParams { weight: w.to_vec(), ..p.clone() })
    });
    let eb = fd_worst(&p.bias, &g.bias, 0..p.bias.len(), |b| {
        l(&x, &ConvParams { bias: b.to_vec(), ..p.clone() })
    });
    check("transposed_conv3d", OP_TOL, &[ex, ew, eb])
}

pub fn batchnorm_check() -> Check {
    let mut r = rng(120);
    let x = uniform_map(2, 3, Dims::new(4, 3, 5), &mut r);
    let mut p = BnParams::<f64>::new(3);
    p.gamma = uniform_vec(3, 0.5, 1.5, &mut r);
    p.beta = uniform_vec(3, -0.5, 0.5, &mut r);
    let gy = uniform_map(2, 3, x.dims, &mut r);
    let (_, cache) = batchnorm_train(&x, &p).unwrap();
    let (dx, g) = batchnorm_backward(&gy, &cache, &p).unwrap();
    let l = |x: &FeatureMap<f64>, p: &BnParams<f64>| dot(&batchnorm_train(x, p).unwrap().0.data, &gy.data);
    let ex = fd_worst(&x.data, &dx.data, 0..x.data.len(), |d| l(&with_data(&x, d), &p));
    let eg = fd_worst(&p.gamma, &g.gamma, 0..3, |v| l(&x, &BnParams { gamma: v.to_vec(), ..p.clone() }));
    let eb = fd_worst(&p.beta, &g.beta, 0..3, |v| l(&x, &BnParams { beta: v.to_vec(), ..p.clone() }));
    check("batchnorm", OP_TOL, &[ex, eg, eb])
}

pub fn relu_check() -> Check {
    let mut r = rng(130);
    let x = uniform_map(1, 2, Dims::new(4, 4, 4), &mut r);
    let gy = uniform_map(1, 2, x.dims, &mut r);
    let dx = relu_backward(&relu(&x), &gy).unwrap();
    // The kink at 0 has no derivative; skip inputs the central difference straddles.
    let away: Vec<usize> = (0..x.data.len()).filter(|&i| x.data[i].abs() > 10.0 * FD_STEP).collect();
    let e = fd_worst(&x.data, &dx.data, away, |d| dot(&relu(&with_data(&x, d)).data, &gy.data));
    check("relu", OP_TOL, &[e])
}

pub fn maxpool_check() -> Check {
    let mut r = rng(140);
    let x = uniform_map(2, 2, Dims::new(6, 5, 7), &mut r);
    let (y, cache) = maxpool3d(&x, 3, 2).unwrap();
    let gy = uniform_map(2, 2, y.dims, &mut r);
    let dx = maxpool3d_backward(&gy, &cache).unwrap();
    let e = fd_worst(&x.data, &dx.data, 0..x.data.len(), |d| {
        dot(&maxpool3d(&with_data(&x, d), 3, 2).unwrap().0.data, &gy.data)
    });
    check("maxpool routing", OP_TOL, &[e])
}

pub fn avgpool_check() -> Check {
    let mut r = rng(150);
    let x = uniform_map(1, 2, Dims::new(5, 6, 4), &mut r);
    let y = avgpool3d(&x, 3, 2).unwrap();
    let gy = uniform_map(1, 2, y.dims, &mut r);
    let dx = avgpool3d_backward(&gy, x.dims, 3, 2).unwrap();
    let e = fd_worst(&x.data, &dx.data, 0..x.data.len(), |d| {
        dot(&avgpool3d(&with_data(&x, d), 3, 2).unwrap().data, &gy.data)
    });
    check("avgpool", OP_TOL, &[e])
}

/// A field whose sample positions all lie inside the volume and at least
/// 0.25 voxel away from integer coordinates, where trilinear sampling is smooth.
pub fn off_lattice_field(dims: Dims, level: usize, rng: &mut ChaCha8Rng) -> DeformationField<f64> {
    let n = dims.voxels();
    let mut disp = vec![0.0; 3 * n];
    for d in 0..dims.d() {
        for h in 0..dims.h() {
            for w in 0..dims.w() {
                let i = dims.index(d, h, w);
                for (c, v) in [d, h, w].into_iter().enumerate() {
                    let extent = dims.0[c];
                    let cell = rng.random_range(0..extent - 1) as f64;
                    let target = cell + rng.random_range(0.25..0.75);
                    disp[c * n + i] = target - v as f64;
                }
            }
        }
    }
    DeformationField::new(dims, disp, level).unwrap()
}

fn field_with(f: &DeformationField<f64>, disp: &[f64]) -> DeformationField<f64> {
    DeformationField::new(f.dims(), disp.to_vec(), f.level).unwrap()
}

pub fn warp_check() -> Check {
    let mut r = rng(11);
    let dims = Dims::new(6, 6, 6);
    let moving = uniform_volume(dims, &mut r);
    let field = off_lattice_field(dims, 0, &mut r);
    let gy = uniform_vec(dims.voxels(), -1.0, 1.0, &mut r);
    let g = warp_trilinear_backward(&moving, &field, &gy).unwrap();
    let e = fd_worst(field.disp(), &g, 0..g.len(), |d| {
        dot(warp_trilinear(&moving, &field_with(&field, d)).unwrap().data(), &gy)
    });
    check("warp_trilinear", OP_TOL, &[e])
}

pub fn upsample_check() -> Check {
    let mut r = rng(160);
    let src = Dims::new(3, 2, 4);
    let target = Dims::new(5, 4, 7);
    let f = DeformationField::new(src, uniform_vec(3 * src.voxels(), -1.0, 1.0, &mut r), 1).unwrap();
    let gy = uniform_vec(3 * target.voxels(), -1.0, 1.0, &mut r);
    let g = upsample_field_backward(src, target, &gy).unwrap();
    let e = fd_worst(f.disp(), &g, 0..g.len(), |d| {
        dot(upsample_field_trilinear(&field_with(&f, d), target).unwrap().disp(), &gy)
    });
    check("upsample_field_trilinear", OP_TOL, &[e])
}

pub fn ncc_check() -> Check {
    let mut r = rng(9);
    let dims = Dims::new(5, 5, 5);
    let a = uniform_volume(dims, &mut r);
    let b = uniform_volume(dims, &mut r);
    let g = ncc(&a, &b).unwrap().grad_b;
    let e = fd_worst(b.data(), &g, 0..g.len(), |d| {
        ncc(&a, &Volume::new(dims, d.to_vec()).unwrap()).unwrap().value
    });
    check("ncc", 1e-5, &[e])
}

pub fn tv_check(norm: TvNorm) -> Check {
    let mut r = rng(170);
    let dims = Dims::new(4, 4, 4);
    let f = DeformationField::new(dims, uniform_vec(3 * dims.voxels(), -2.0, 2.0, &mut r), 0).unwrap();
    let g = tv_l1(&f, TV_EPSILON, norm).unwrap().grad;
    let e = fd_worst(f.disp(), &g, 0..g.len(), |d| {
        tv_l1(&field_with(&f, d), TV_EPSILON, norm).unwrap().value
    });
    check(&format!("tv_l1 {}", norm.as_str()), OP_TOL, &[e])
}

/// Three-level objective composed with warping, differentiated per field voxel.
pub fn multi_res_loss_check() -> Check {
    let mut r = rng(180);
    let fixed = uniform_volume(Dims::new(6, 6, 6), &mut r).pyramid(3);
    let moving = uniform_volume(Dims::new(6, 6, 6), &mut r).pyramid(3);
    let fields: Vec<DeformationField<f64>> = fixed
        .iter()
        .enumerate()
        .map(|(l, v)| off_lattice_field(v.dims(), l, &mut r))
        .collect();
    let cfg = LossConfig::default();
    let total = |fields: &[DeformationField<f64>]| -> f64 {
        let warped: Vec<Volume<f64>> =
            moving.iter().zip(fields).map(|(m, f)| warp_trilinear(m, f).unwrap()).collect();
        let (rep, _) = multi_res_loss(
            &fixed.iter().collect::<Vec<_>>(),
            &warped.iter().collect::<Vec<_>>(),
            &fields.iter().collect::<Vec<_>>(),
            &DEFAULT_LEVEL_WEIGHTS,
            &cfg,
        )
        .unwrap();
        rep.total
    };
    let warped: Vec<Volume<f64>> =
        moving.iter().zip(&fields).map(|(m, f)| warp_trilinear(m, f).unwrap()).collect();
    let (_, g) = multi_res_loss(
        &fixed.iter().collect::<Vec<_>>(),
        &warped.iter().collect::<Vec<_>>(),
        &fields.iter().collect::<Vec<_>>(),
        &DEFAULT_LEVEL_WEIGHTS,
        &cfg,
    )
    .unwrap();
    let mut worst = Vec::new();
    for l in 0..3 {
        let through = warp_trilinear_backward(&moving[l], &fields[l], &g.warped[l]).unwrap();
        let analytic: Vec<f64> = through.iter().zip(&g.fields[l]).map(|(a, b)| a + b).collect();
        worst.push(fd_worst(fields[l].disp(), &analytic, 0..analytic.len(), |d| {
            let mut fs = fields.clone();
            fs[l] = field_with(&fields[l], d);
            total(&fs)
        }));
    }
    check("multi_res_loss through warp", OP_TOL, &worst)
}

/// Parameters with live heads whose fields stay near half a voxel (in
/// full-resolution units), so no sample position comes within reach of the
/// trilinear kinks at integer coordinates while the checks perturb weights.
pub fn live_params(variant: ArchitectureVariant, seed: u64) -> RegNetParams<f64> {
    let mut p = init_params::<f64>(variant, seed);
    let mut r = rng(seed ^ 0xfeed);
    // coarse_interp upsamples its level-2 field, multiplying it by 4 and
    // extrapolating linearly at the borders.
    let (offset, scale) = match variant {
        ArchitectureVariant::CoarseInterp => (0.125, HEAD_SCALE / 8.0),
        _ => (0.5, HEAD_SCALE),
    };
    for l in &mut p.layers {
        if l.id.is_head() {
            l.conv.weight = uniform_vec(l.conv.weight.len(), -scale, scale, &mut r);
            l.conv.bias = vec![offset; l.conv.bias.len()];
        }
    }
    p
}

const HEAD_SCALE: f64 = 0.002;

/// Loss of the whole network in train mode on one pair.
fn network_total(p: &RegNetParams<f64>, fixed: &Volume<f64>, moving: &Volume<f64>) -> f64 {
    let mut p = p.clone();
    let (out, _) = forward_train(&mut p, &[fixed], &[moving]).unwrap();
    let w = LevelWeights(DEFAULT_LEVEL_WEIGHTS);
    loss(&out, w, &LossConfig::default()).unwrap().0.total
}

/// Spot-checks up to `per_tensor` coordinates of every trainable tensor.
pub fn network_check(variant: ArchitectureVariant, per_tensor: usize) -> Check {
    let seed = 7;
    let mut r = rng(190);
    let dims = Dims::new(8, 8, 8);
    let fixed = uniform_volume(dims, &mut r);
    let moving = uniform_volume(dims, &mut r);
    let params = live_params(variant, seed);

    let mut p = params.clone();
    let (out, cache) = forward_train(&mut p, &[&fixed], &[&moving]).unwrap();
    let (_, fg) = loss(&out, LevelWeights(DEFAULT_LEVEL_WEIGHTS), &LossConfig::default()).unwrap();
    let grads = backward(&p, &cache, &fg).unwrap();
    let analytic: Vec<Vec<f64>> = grads.trainable().iter().map(|t| t.to_vec()).collect();

    let mut worst = Vec::new();
    let n_tensors = analytic.len();
    for t in 0..n_tensors {
        let len = analytic[t].len();
        let picks = sample(&mut r, len, per_tensor.min(len)).into_vec();
        let base = {
            let mut q = params.clone();
            q.trainable_mut()[t].to_vec()
        };
        worst.push(fd_worst_with_step(NET_FD_STEP, &base, &analytic[t], picks, |v| {
            let mut q = params.clone();
            q.trainable_mut()[t].copy_from_slice(v);
            network_total(&q, &fixed, &moving)
        }));
    }
    check(&format!("network {}", variant.as_str()), NET_TOL, &worst)
}

pub fn all_op_checks() -> Vec<Check> {
    vec![
        conv3d_check(1),
        conv3d_check(2),
        transposed_conv3d_check(),
        batchnorm_check(),
        relu_check(),
        maxpool_check(),
        avgpool_check(),
        warp_check(),
        upsample_check(),
        ncc_check(),
        tv_check(TvNorm::Anisotropic),
        tv_check(TvNorm::Isotropic),
        multi_res_loss_check(),
    ]
}

pub fn all_network_checks() -> Vec<Check> {
    [
        ArchitectureVariant::MultiRes,
        ArchitectureVariant::NoPool,
        ArchitectureVariant::CoarseInterp,
    ]
    .into_iter()
    .map(|v| network_check(v, 20))
    .collect()
}

//! Naive nested-loop oracles and the seeded cases that compare against them.
//!
//! Inputs are small integers and displacements are multiples of 1/8, so every
//! intermediate value is exactly representable in f32: any summation order
//! gives the same bits, and the comparisons can demand exact equality.

use fcnreg::layers::conv::{conv3d, transposed_conv3d, ConvParams};
use fcnreg::layers::pool::{avgpool3d, maxpool3d, pool_output_dims};
use fcnreg::warp::warp_trilinear;
use fcnreg::{DeformationField, Dims, FeatureMap, Volume};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{dot, rng, uniform_map, uniform_vec, Check};

pub const CASES: u64 = 24;
pub const ADJOINT_TOL: f64 = 1e-6;

fn small_ints(n: usize, bound: i32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..=bound) as f32).collect()
}

fn random_dims(lo: usize, hi: usize, rng: &mut ChaCha8Rng) -> Dims {
    Dims::new(
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
    )
}

fn int_map(batch: usize, channels: usize, dims: Dims, rng: &mut ChaCha8Rng) -> FeatureMap<f32> {
    FeatureMap::new(batch, channels, dims, small_ints(batch * channels * dims.voxels(), 4, rng)).unwrap()
}

fn int_conv(o: usize, i: usize, stride: usize, rng: &mut ChaCha8Rng) -> ConvParams<f32> {
    let mut p = ConvParams::zeros(o, i, 3, stride, 1).unwrap();
    p.weight = small_ints(p.weight.len(), 3, rng);
    p.bias = small_ints(o, 5, rng);
    p
}

fn bits_differ(a: &[f32], b: &[f32]) -> usize {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).filter(|(x, y)| x.to_bits() != y.to_bits()).count()
}

fn coords(dims: Dims, i: usize) -> [usize; 3] {
    [i / (dims.h() * dims.w()), (i / dims.w()) % dims.h(), i % dims.w()]
}

/// `y[o, q] = b[o] + Σ_{i,t} w[o,i,t] x[i, q·s + t - pad]`, zero outside.
pub fn naive_conv(x: &FeatureMap<f32>, p: &ConvParams<f32>) -> FeatureMap<f32> {
    let od = p.output_dims(x.dims).unwrap();
    let k = p.kernel;
    let mut y = FeatureMap::zeros(x.batch, p.out_channels, od);
    for b in 0..x.batch {
        for o in 0..p.out_channels {
            for q in 0..od.voxels() {
                let qc = coords(od, q);
                let mut acc = p.bias[o];
                for i in 0..p.in_channels {
                    for t in 0..k * k * k {
                        let tc = [t / (k * k), (t / k) % k, t % k];
                        let pos: Vec<isize> = (0..3)
                            .map(|a| (qc[a] * p.stride + tc[a]) as isize - p.padding[a] as isize)
                            .collect();
                        if (0..3).all(|a| pos[a] >= 0 && (pos[a] as usize) < x.dims.0[a]) {
                            let v = x.dims.index(pos[0] as usize, pos[1] as usize, pos[2] as usize);
                            acc += p.weight_at(o, i, t) * x.channel(b, i)[v];
                        }
                    }
                }
                y.channel_mut(b, o)[q] = acc;
            }
        }
    }
    y
}

/// Scatter form: every input voxel `q` adds `w[o,i,t] x[i,q]` at `q·s + t - pad`.
pub fn naive_transposed_conv(x: &FeatureMap<f32>, p: &ConvParams<f32>, target: Dims) -> FeatureMap<f32> {
    let k = p.kernel;
    let mut y = FeatureMap::zeros(x.batch, p.out_channels, target);
    for b in 0..x.batch {
        for o in 0..p.out_channels {
            y.channel_mut(b, o).fill(p.bias[o]);
            for i in 0..p.in_channels {
                for q in 0..x.dims.voxels() {
                    let qc = coords(x.dims, q);
                    for t in 0..k * k * k {
                        let tc = [t / (k * k), (t / k) % k, t % k];
                        let pos: Vec<isize> = (0..3)
                            .map(|a| (qc[a] * p.stride + tc[a]) as isize - p.padding[a] as isize)
                            .collect();
                        if (0..3).all(|a| pos[a] >= 0 && (pos[a] as usize) < target.0[a]) {
                            let v = target.index(pos[0] as usize, pos[1] as usize, pos[2] as usize);
                            y.channel_mut(b, o)[v] += p.weight_at(o, i, t) * x.channel(b, i)[q];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Window reduction with edge-replicating padding of `(k-1)/2`.
pub fn naive_pool(x: &FeatureMap<f32>, k: usize, s: usize, max: bool) -> FeatureMap<f32> {
    let od = pool_output_dims(x.dims, k, s);
    let pad = ((k - 1) / 2) as isize;
    let mut y = FeatureMap::zeros(x.batch, x.channels, od);
    for b in 0..x.batch {
        for c in 0..x.channels {
            for q in 0..od.voxels() {
                let qc = coords(od, q);
                let mut best = f32::NEG_INFINITY;
                let mut sum = 0.0f32;
                for t in 0..k * k * k {
                    let tc = [t / (k * k), (t / k) % k, t % k];
                    let pos: Vec<usize> = (0..3)
                        .map(|a| {
                            let v = (qc[a] * s + tc[a]) as isize - pad;
                            v.clamp(0, x.dims.0[a] as isize - 1) as usize
                        })
                        .collect();
                    let v = x.channel(b, c)[x.dims.index(pos[0], pos[1], pos[2])];
                    best = best.max(v);
                    sum += v;
                }
                y.channel_mut(b, c)[q] = if max { best } else { sum * (1.0 / (k * k * k) as f32) };
            }
        }
    }
    y
}

/// Corner-weighted trilinear sample with coordinates clamped to the grid.
pub fn naive_warp(moving: &Volume<f32>, field: &DeformationField<f32>) -> Volume<f32> {
    let dims = moving.dims();
    let n = dims.voxels();
    Volume::from_fn(dims, |d, h, w| {
        let i = dims.index(d, h, w);
        let mut lo = [0usize; 3];
        let mut frac = [0.0f32; 3];
        for (a, v) in [d, h, w].into_iter().enumerate() {
            let len = dims.0[a];
            if len == 1 {
                continue;
            }
            let p = (v as f32 + field.disp()[a * n + i]).clamp(0.0, (len - 1) as f32);
            lo[a] = (p.floor() as usize).min(len - 2);
            frac[a] = p - lo[a] as f32;
        }
        let mut acc = 0.0f32;
        for corner in 0..8 {
            let mut weight = 1.0f32;
            let mut at = [0usize; 3];
            for a in 0..3 {
                let up = (corner >> (2 - a)) & 1 == 1;
                at[a] = if up { (lo[a] + 1).min(dims.0[a] - 1) } else { lo[a] };
                weight *= if up { frac[a] } else { 1.0 - frac[a] };
            }
            acc += weight * moving.get(at[0], at[1], at[2]);
        }
        acc
    })
}

/// Mean of each 2×2×2 block, truncated at the far edges.
pub fn naive_downsample(v: &Volume<f32>) -> Volume<f32> {
    let dims = v.dims();
    let out = Dims(dims.0.map(|n| n.div_ceil(2)));
    Volume::from_fn(out, |d, h, w| {
        let mut sum = 0.0f32;
        let mut count = 0.0f32;
        for dd in 0..2 {
            for hh in 0..2 {
                for ww in 0..2 {
                    let p = [2 * d + dd, 2 * h + hh, 2 * w + ww];
                    if (0..3).all(|a| p[a] < dims.0[a]) {
                        sum += v.get(p[0], p[1], p[2]);
                        count += 1.0;
                    }
                }
            }
        }
        sum / count
    })
}

fn exact(name: &str, mismatches: usize) -> Check {
    Check {
        name: name.to_string(),
        worst: mismatches as f64,
        tolerance: 0.0,
    }
}

pub fn conv_cases() -> Check {
    let mut bad = 0;
    for seed in 0..CASES {
        let mut r = rng(1000 + seed);
        let stride = r.random_range(1..=2);
        let (o, i) = (r.random_range(1..=12), r.random_range(1..=5));
        let batch = r.random_range(1..=2);
        let x = int_map(batch, i, random_dims(2, 7, &mut r), &mut r);
        let p = int_conv(o, i, stride, &mut r);
        bad += bits_differ(&conv3d(&x, &p).unwrap().data, &naive_conv(&x, &p).data);
    }
    exact("conv3d vs nested loops", bad)
}

pub fn transposed_conv_cases() -> Check {
    let mut bad = 0;
    for seed in 0..CASES {
        let mut r = rng(2000 + seed);
        let stride = r.random_range(1..=2);
        let (o, i) = (r.random_range(1..=10), r.random_range(1..=5));
        let x = int_map(1, i, random_dims(1, 5, &mut r), &mut r);
        let target = Dims(x.dims.0.map(|n| {
            let lo = (n - 1) * stride + 1;
            r.random_range(lo..=n * stride + 1)
        }));
        let p = int_conv(o, i, stride, &mut r);
        bad += bits_differ(
            &transposed_conv3d(&x, &p, target).unwrap().data,
            &naive_transposed_conv(&x, &p, target).data,
        );
    }
    exact("transposed_conv3d vs scatter loops", bad)
}

pub fn pool_cases(max: bool) -> Check {
    let mut bad = 0;
    for seed in 0..CASES {
        let mut r = rng(3000 + seed + if max { 0 } else { 500 });
        let x = int_map(r.random_range(1..=2), r.random_range(1..=3), random_dims(1, 9, &mut r), &mut r);
        let got = if max {
            maxpool3d(&x, 3, 2).unwrap().0
        } else {
            avgpool3d(&x, 3, 2).unwrap()
        };
        bad += bits_differ(&got.data, &naive_pool(&x, 3, 2, max).data);
    }
    exact(if max { "maxpool vs nested loops" } else { "avgpool vs nested loops" }, bad)
}

pub fn warp_cases() -> Check {
    let mut bad = 0;
    for seed in 0..CASES {
        let mut r = rng(4000 + seed);
        let dims = random_dims(1, 7, &mut r);
        let moving = Volume::new(dims, small_ints(dims.voxels(), 8, &mut r)).unwrap();
        // Multiples of 1/8 within ±3 voxels, reaching past the borders.
        let disp = (0..3 * dims.voxels()).map(|_| r.random_range(-24..=24) as f32 / 8.0).collect();
        let field = DeformationField::new(dims, disp, 0).unwrap();
        bad += bits_differ(
            warp_trilinear(&moving, &field).unwrap().data(),
            naive_warp(&moving, &field).data(),
        );
    }
    exact("warp_trilinear vs corner-weight loops", bad)
}

pub fn downsample_cases() -> Check {
    let mut bad = 0;
    for seed in 0..CASES {
        let mut r = rng(5000 + seed);
        let dims = random_dims(1, 9, &mut r);
        let v = Volume::new(dims, small_ints(dims.voxels(), 9, &mut r)).unwrap();
        let got = v.downsample_avg2();
        let want = naive_downsample(&v);
        bad += if got.dims() == want.dims() {
            bits_differ(got.data(), want.data())
        } else {
            dims.voxels()
        };
    }
    exact("downsample vs block loops", bad)
}

/// `⟨transposed(x), y⟩ == ⟨x, conv(y)⟩` with the channel roles swapped and
/// zero bias, over several stride and shape configurations.
pub fn adjoint_cases() -> Check {
    let mut worst: f64 = 0.0;
    for (seed, stride, coarse, fine) in [
        (13, 2, Dims::new(3, 4, 2), Dims::new(6, 8, 4)),
        (13, 2, Dims::new(3, 4, 2), Dims::new(5, 7, 3)),
        (13, 1, Dims::new(4, 3, 5), Dims::new(4, 3, 5)),
        (14, 2, Dims::new(1, 2, 3), Dims::new(2, 3, 6)),
        (15, 2, Dims::new(4, 4, 4), Dims::new(8, 7, 8)),
    ] {
        let mut r = rng(seed);
        let (cin, cout) = (3, 5);
        let mut t = ConvParams::<f64>::zeros(cout, cin, 3, stride, 1).unwrap();
        t.weight = uniform_vec(t.weight.len(), -1.0, 1.0, &mut r);
        // The forward conv maps `cout` channels back to `cin`: w'[i,o,t] = w[o,i,t].
        let mut c = ConvParams::<f64>::zeros(cin, cout, 3, stride, 1).unwrap();
        for o in 0..cout {
            for i in 0..cin {
                for k in 0..27 {
                    c.weight[(i * cout + o) * 27 + k] = t.weight_at(o, i, k);
                }
            }
        }
        let x = uniform_map(2, cin, coarse, &mut r);
        let y = uniform_map(2, cout, fine, &mut r);
        let lhs = dot(&transposed_conv3d(&x, &t, fine).unwrap().data, &y.data);
        let rhs = dot(&x.data, &conv3d(&y, &c).unwrap().data);
        worst = worst.max((lhs - rhs).abs());
    }
    Check {
        name: "conv / transposed conv adjoint identity".into(),
        worst,
        tolerance: ADJOINT_TOL,
    }
}

pub fn all_oracle_checks() -> Vec<Check> {
    vec![
        conv_cases(),
        transposed_conv_cases(),
        pool_cases(true),
        pool_cases(false),
        warp_cases(),
        downsample_cases(),
        adjoint_cases(),
    ]
}

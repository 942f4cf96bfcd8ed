//! Self-supervised optimization: Adam, ordered-pair sampling and the
//! training loop shared by dataset training and single-pair registration.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::PoolKind;
use crate::losses::{LossConfig, LossReport, TvNorm, DEFAULT_LAMBDA, DEFAULT_LEVEL_WEIGHTS, TV_EPSILON};
use crate::network::{
    backward, forward_train, init_params, loss, ArchitectureVariant, LevelWeights, RegNetGrads,
    RegNetParams,
};
use crate::scalar::Scalar;
use crate::volume::Volume;

/// Which pyramid level the first entry of `loss_weights` applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LevelOrder {
    /// `loss_weights[0]` weighs full resolution.
    #[default]
    FinestFirst,
    /// `loss_weights[0]` weighs the coarsest level.
    CoarsestFirst,
}

impl LevelOrder {
    pub fn as_str(&self) -> &'static str {
        match self {
            LevelOrder::FinestFirst => "finest_first",
            LevelOrder::CoarsestFirst => "coarsest_first",
        }
    }
}

impl FromStr for LevelOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finest_first" => Ok(LevelOrder::FinestFirst),
            "coarsest_first" => Ok(LevelOrder::CoarsestFirst),
            _ => Err(Error::InvalidArgument(format!("unknown loss level order '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub loss_weights: [f64; 3],
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: ArchitectureVariant,
    pub deterministic: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pool: PoolKind,
    pub tv_norm: TvNorm,
    pub tv_epsilon: f64,
    pub loss_level_order: LevelOrder,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: DEFAULT_LAMBDA,
            loss_weights: DEFAULT_LEVEL_WEIGHTS,
            learning_rate: 1e-3,
            iterations: 10_000,
            batch_size: 1,
            seed: 0,
            variant: ArchitectureVariant::MultiRes,
            deterministic: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            pool: PoolKind::Max,
            tv_norm: TvNorm::Anisotropic,
            tv_epsilon: TV_EPSILON,
            loss_level_order: LevelOrder::FinestFirst,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.iterations < 1 {
            return bad("iterations must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if !(self.tv_epsilon > 0.0) {
            return bad(format!("tv_epsilon must be > 0, got {}", self.tv_epsilon));
        }
        if !(self.lambda >= 0.0) || self.loss_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("lambda and loss_weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn level_weights(&self) -> LevelWeights {
        let w = self.loss_weights;
        match self.loss_level_order {
            LevelOrder::FinestFirst => LevelWeights(w),
            LevelOrder::CoarsestFirst => LevelWeights([w[2], w[1], w[0]]),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            tv_epsilon: self.tv_epsilon,
            tv_norm: self.tv_norm,
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment accumulators, one buffer per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_shapes(lens: &[usize]) -> Self {
        AdamState {
            m: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn new(params: &mut RegNetParams<T>) -> Self {
        let lens: Vec<usize> = params.trainable_mut().iter().map(|t| t.len()).collect();
        Self::for_shapes(&lens)
    }

    /// One bias-corrected Adam update of every tensor in `params`.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], hyper: &AdamHyper) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidShape(format!(
                "adam state tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::InvalidShape(format!(
                    "adam tensor {i}: state {} vs param {} vs grad {}",
                    self.m[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step = T::of(hyper.learning_rate / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(hyper.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                // lr * m_hat / (sqrt(v_hat) + eps)
                p[j] -= step * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to the network parameters.
pub fn adam_step<T: Scalar>(
    params: &mut RegNetParams<T>,
    grads: &RegNetGrads<T>,
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    let g = grads.trainable();
    let mut p = params.trainable_mut();
    state.step(&mut p, &g, hyper)?;
    params.bump_generation();
    Ok(())
}

/// Uniform draw from the `n (n - 1)` ordered `(fixed, moving)` pairs with distinct indices.
pub fn sample_pair<R: Rng>(n_images: usize, rng: &mut R) -> Result<(usize, usize)> {
    if n_images < 2 {
        return Err(Error::InvalidArgument(format!(
            "pair sampling needs at least 2 images, got {n_images}"
        )));
    }
    let k = rng.random_range(0..n_images * (n_images - 1));
    let i = k / (n_images - 1);
    let j = k % (n_images - 1);
    Ok((i, if j >= i { j + 1 } else { j }))
}

/// `count` independent ordered pairs.
pub fn sample_pairs<R: Rng>(n_images: usize, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    (0..count).map(|_| sample_pair(n_images, rng)).collect()
}

/// Receives periodic and final checkpoints during training.
pub trait CheckpointSink<T> {
    fn checkpoint(
        &mut self,
        step: usize,
        params: &RegNetParams<T>,
        adam: &AdamState<T>,
        config: &TrainConfig,
    ) -> Result<()>;
}

/// Discards checkpoints.
pub struct NoCheckpoints;

impl<T> CheckpointSink<T> for NoCheckpoints {
    fn checkpoint(&mut self, _: usize, _: &RegNetParams<T>, _: &AdamState<T>, _: &TrainConfig) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub report: LossReport,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: RegNetParams<T>,
    pub adam: AdamState<T>,
    pub history: Vec<StepRecord>,
}

enum PairSource {
    Dataset { batch: usize },
    Single,
}

fn run<T: Scalar>(
    images: &[&Volume<T>],
    source: PairSource,
    config: &TrainConfig,
    sink: &mut dyn CheckpointSink<T>,
    progress: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let dims = images[0].dims();
    if let Some(v) = images.iter().find(|v| v.dims() != dims) {
        return Err(Error::DimMismatch(format!(
            "training images must share dims: {} vs {}",
            v.dims(),
            dims
        )));
    }
    let mut params = init_params::<T>(config.variant, config.seed);
    params.pool = config.pool;
    let mut adam = AdamState::new(&mut params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_9a12);
    let weights = config.level_weights();
    let loss_cfg = config.loss_config();
    let hyper = config.adam();
    let mut history = Vec::with_capacity(config.iterations);

    for step in 1..=config.iterations {
        let pairs = match source {
            PairSource::Dataset { batch } => sample_pairs(images.len(), batch, &mut rng)?,
            PairSource::Single => vec![(0, 1)],
        };
        let fixed: Vec<&Volume<T>> = pairs.iter().map(|&(i, _)| images[i]).collect();
        let moving: Vec<&Volume<T>> = pairs.iter().map(|&(_, j)| images[j]).collect();
        let (out, cache) = forward_train(&mut params, &fixed, &moving)?;
        let (report, field_grads) = loss(&out, weights, &loss_cfg)?;
        let grads = backward(&params, &cache, &field_grads)?;
        let grad_norm = grads.l2_norm();
        adam_step(&mut params, &grads, &mut adam, &hyper)?;
        let record = StepRecord {
            step,
            report,
            grad_norm,
        };
        progress(&record);
        history.push(record);
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step != config.iterations {
            sink.checkpoint(step, &params, &adam, config)?;
        }
    }
    sink.checkpoint(config.iterations, &params, &adam, config)?;
    Ok(TrainOutcome {
        params,
        adam,
        history,
    })
}

/// Dataset training over uniformly sampled ordered pairs.
pub fn train<T: Scalar>(
    images: &[Volume<T>],
    config: &TrainConfig,
    sink: &mut dyn CheckpointSink<T>,
) -> Result<TrainOutcome<T>> {
    train_with_progress(images, config, sink, &mut |_| {})
}

pub fn train_with_progress<T: Scalar>(
    images: &[Volume<T>],
    config: &TrainConfig,
    sink: &mut dyn CheckpointSink<T>,
    progress: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome<T>> {
    if images.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "dataset training needs at least 2 images, got {}",
            images.len()
        )));
    }
    let refs: Vec<&Volume<T>> = images.iter().collect();
    run(
        &refs,
        PairSource::Dataset {
            batch: config.batch_size,
        },
        config,
        sink,
        progress,
    )
}

/// Single-pair registration: every step optimizes the same `(fixed, moving)` pair.
pub fn optimize_pair<T: Scalar>(
    fixed: &Volume<T>,
    moving: &Volume<T>,
    config: &TrainConfig,
    sink: &mut dyn CheckpointSink<T>,
) -> Result<TrainOutcome<T>> {
    optimize_pair_with_progress(fixed, moving, config, sink, &mut |_| {})
}

pub fn optimize_pair_with_progress<T: Scalar>(
    fixed: &Volume<T>,
    moving: &Volume<T>,
    config: &TrainConfig,
    sink: &mut dyn CheckpointSink<T>,
    progress: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome<T>> {
    run(&[fixed, moving], PairSource::Single, config, sink, progress)
}

pub const LOSS_HISTORY_HEADER: &str = "step,total,ncc_l0,ncc_l1,ncc_l2,tv_l0,tv_l1,tv_l2";

/// Loss history as CSV; levels a variant does not evaluate are left empty.
pub fn loss_history_csv(history: &[StepRecord]) -> String {
    let mut out = String::from(LOSS_HISTORY_HEADER);
    out.push('\n');
    for rec in history {
        let cell = |level: usize, ncc: bool| {
            rec.report
                .level(level)
                .map(|l| if ncc { l.ncc } else { l.tv }.to_string())
                .unwrap_or_default()
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            rec.step,
            rec.report.total,
            cell(0, true),
            cell(1, true),
            cell(2, true),
            cell(0, false),
            cell(1, false),
            cell(2, false)
        );
    }
    out
}

//! Command-line surface of the `fcnreg` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::read_config;
use crate::error::{Error, Result};
use crate::evaluation::{dice, mean_volume, synth_case};
use crate::io::{
    load_checkpoint, nifti, read_labels_any, read_volume_any, save_checkpoint, write_field_any,
    write_labels_any, write_volume_any,
};
use crate::network::{predict_field, ArchitectureVariant, RegNetParams};
use crate::training::{loss_history_csv, optimize_pair, train, AdamState, CheckpointSink, TrainConfig};
use crate::volume::{histogram_match, Dims, Volume, DEFAULT_HISTOGRAM_BINS};
use crate::warp::{warp_labels_nearest, warp_trilinear};

#[derive(Debug, Parser)]
#[command(name = "fcnreg", version, about = "Self-supervised FCN deformable registration of 3D volumes")]
pub struct Cli {
    /// Request bit-reproducible execution (recorded in the run's config).
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Seed for initialization, pair sampling and synthetic data; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Network variant: multires, no_pool or coarse_interp; overrides the config.
    #[arg(long, global = true)]
    pub variant: Option<ArchitectureVariant>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a set of images, sampling ordered (fixed, moving) pairs.
    Train(TrainArgs),
    /// Register one pair by optimizing a network on it alone.
    Optimize(OptimizeArgs),
    /// Feedforward registration with a trained network.
    Register(RegisterArgs),
    /// Dice overlap between two label volumes.
    Evaluate(EvaluateArgs),
    /// Write a synthetic pair with its ground-truth fields and labels.
    Synth(SynthArgs),
    /// Voxelwise mean of several volumes.
    Meanvol(MeanvolArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// A directory of .nii/.raw files, a comma-separated list, or a text file with one path per line.
    #[arg(long)]
    pub images: String,
    /// Checkpoint path, rewritten at every periodic checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss history CSV (default: `<out>.loss.csv`).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Histogram-match every image to this template first.
    #[arg(long)]
    pub match_histogram: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// `fixed` to match the moving image to the fixed one, or a template path to match both.
    #[arg(long)]
    pub match_histogram: Option<String>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    /// Moving image (original intensities) warped onto the fixed grid.
    #[arg(long)]
    pub out_warped: PathBuf,
    /// Displacement field as a 4D NIfTI with 3 frames (Δd, Δh, Δw).
    #[arg(long)]
    pub out_field: Option<PathBuf>,
    #[arg(long, requires = "out_labels")]
    pub moving_labels: Option<PathBuf>,
    #[arg(long, requires = "moving_labels")]
    pub out_labels: Option<PathBuf>,
    /// `fixed` or a template path; applied to the network inputs only.
    #[arg(long)]
    pub match_histogram: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Comma-separated label values.
    #[arg(long)]
    pub labels: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// `D,H,W`.
    #[arg(long)]
    pub dims: Dims,
    /// Largest displacement norm in voxels.
    #[arg(long)]
    pub amplitude: f64,
    /// Gaussian smoothing of the random field, in voxels.
    #[arg(long)]
    pub sigma: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MeanvolArgs {
    #[arg(long)]
    pub images: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let globals = Globals {
        deterministic: cli.deterministic,
        seed: cli.seed,
        variant: cli.variant,
    };
    match cli.command {
        Command::Train(a) => run_train(&globals, a),
        Command::Optimize(a) => run_optimize(&globals, a),
        Command::Register(a) => run_register(&globals, a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Synth(a) => run_synth(&globals, a),
        Command::Meanvol(a) => run_meanvol(a),
    }
}

struct Globals {
    deterministic: bool,
    seed: Option<u64>,
    variant: Option<ArchitectureVariant>,
}

impl Globals {
    fn config(&self, path: Option<&Path>) -> Result<TrainConfig> {
        let mut cfg = match path {
            Some(p) => read_config(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        cfg.deterministic |= self.deterministic;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Expands `--images`: a directory, a comma-separated list, or a list file.
pub fn image_paths(spec: &str) -> Result<Vec<PathBuf>> {
    let p = Path::new(spec);
    let is_volume = |p: &Path| {
        let s = p.to_string_lossy();
        s.ends_with(".nii") || s.ends_with(".raw")
    };
    let paths: Vec<PathBuf> = if p.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_volume(p))
            .collect();
        v.sort();
        v
    } else if spec.contains(',') || is_volume(p) {
        spec.split(',').map(|s| PathBuf::from(s.trim())).filter(|p| !p.as_os_str().is_empty()).collect()
    } else {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(PathBuf::from)
            .collect()
    };
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no images found in '{spec}'")));
    }
    Ok(paths)
}

fn load_all(spec: &str) -> Result<Vec<Volume<f32>>> {
    image_paths(spec)?.iter().map(|p| read_volume_any(p)).collect()
}

fn match_to(v: &Volume<f32>, reference: &Volume<f32>) -> Result<Volume<f32>> {
    histogram_match(v, reference, DEFAULT_HISTOGRAM_BINS)
}

/// Applies `--match-histogram fixed|<template>` to a pair.
fn normalize_pair(
    mode: Option<&str>,
    fixed: Volume<f32>,
    moving: Volume<f32>,
) -> Result<(Volume<f32>, Volume<f32>)> {
    match mode {
        None => Ok((fixed, moving)),
        Some("fixed") => {
            let m = match_to(&moving, &fixed)?;
            Ok((fixed, m))
        }
        Some(template) => {
            let t: Volume<f32> = read_volume_any(Path::new(template))?;
            Ok((match_to(&fixed, &t)?, match_to(&moving, &t)?))
        }
    }
}

fn default_loss_csv(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

/// Writes every checkpoint, periodic and final, to one path.
struct FileSink {
    path: PathBuf,
}

impl CheckpointSink<f32> for FileSink {
    fn checkpoint(
        &mut self,
        _step: usize,
        params: &RegNetParams<f32>,
        adam: &AdamState<f32>,
        config: &TrainConfig,
    ) -> Result<()> {
        save_checkpoint(&self.path, params, Some(adam), config)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_train(g: &Globals, a: TrainArgs) -> Result<()> {
    let cfg = g.config(a.config.as_deref())?;
    let mut images = load_all(&a.images)?;
    if let Some(t) = &a.match_histogram {
        let template: Volume<f32> = read_volume_any(t)?;
        images = images.iter().map(|v| match_to(v, &template)).collect::<Result<_>>()?;
    }
    let outcome = train(&images, &cfg, &mut FileSink { path: a.out.clone() })?;
    let csv = a.loss_csv.unwrap_or_else(|| default_loss_csv(&a.out));
    write_text(&csv, &loss_history_csv(&outcome.history))?;
    if let Some(last) = outcome.history.last() {
        println!(
            "trained {} steps on {} images: final loss {:.6}; checkpoint {}",
            last.step,
            images.len(),
            last.report.total,
            a.out.display()
        );
    }
    Ok(())
}

fn run_optimize(g: &Globals, a: OptimizeArgs) -> Result<()> {
    let cfg = g.config(a.config.as_deref())?;
    let fixed: Volume<f32> = read_volume_any(&a.fixed)?;
    let moving: Volume<f32> = read_volume_any(&a.moving)?;
    let (fixed, moving) = normalize_pair(a.match_histogram.as_deref(), fixed, moving)?;
    let outcome = optimize_pair(&fixed, &moving, &cfg, &mut FileSink { path: a.out.clone() })?;
    let csv = a.loss_csv.unwrap_or_else(|| default_loss_csv(&a.out));
    write_text(&csv, &loss_history_csv(&outcome.history))?;
    if let Some(last) = outcome.history.last() {
        println!(
            "optimized {} steps: final loss {:.6}; checkpoint {}",
            last.step,
            last.report.total,
            a.out.display()
        );
    }
    Ok(())
}

fn run_register(g: &Globals, a: RegisterArgs) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(&a.model)?;
    if let Some(v) = g.variant {
        ckpt.expect_variant(v)?;
    }
    let fixed: Volume<f32> = read_volume_any(&a.fixed)?;
    let moving: Volume<f32> = read_volume_any(&a.moving)?;
    if fixed.dims() != moving.dims() {
        return Err(Error::DimMismatch(format!(
            "fixed {} vs moving {}",
            fixed.dims(),
            moving.dims()
        )));
    }
    let (net_fixed, net_moving) =
        normalize_pair(a.match_histogram.as_deref(), fixed.clone(), moving.clone())?;
    let field = predict_field(&ckpt.params, &net_fixed, &net_moving)?;
    let mut warped = warp_trilinear(&moving, &field)?;
    warped.spacing = fixed.spacing;
    write_volume_any(&warped, &a.out_warped)?;
    if let Some(p) = &a.out_field {
        write_field_any(&field, p)?;
    }
    if let (Some(src), Some(dst)) = (&a.moving_labels, &a.out_labels) {
        let labels = read_labels_any(src)?;
        write_labels_any(&warp_labels_nearest(&labels, &field)?, dst)?;
    }
    println!(
        "registered {}: mean |displacement| {:.4} voxels",
        fixed.dims(),
        field.mean_magnitude()
    );
    Ok(())
}

fn parse_labels(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u32>()
                .map_err(|e| Error::InvalidArgument(format!("bad label '{p}': {e}")))
        })
        .collect()
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let la = read_labels_any(&a.a)?;
    let lb = read_labels_any(&a.b)?;
    let report = dice(&la, &lb, &parse_labels(&a.labels)?)?;
    write_text(&a.out, &report.to_csv())?;
    println!("mean dice {:.6}", report.mean);
    Ok(())
}

fn run_synth(g: &Globals, a: SynthArgs) -> Result<()> {
    let seed = g.seed.unwrap_or(0);
    let pair = synth_case::<f32>(a.dims, a.amplitude, a.sigma, seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let dir = &a.out;
    nifti::write_volume(&pair.fixed, &dir.join("fixed.nii"))?;
    nifti::write_volume(&pair.moving, &dir.join("moving.nii"))?;
    nifti::write_labels(&pair.fixed_labels, &dir.join("fixed_labels.nii"))?;
    nifti::write_labels(&pair.moving_labels, &dir.join("moving_labels.nii"))?;
    nifti::write_field(&pair.applied, &dir.join("applied_field.nii"))?;
    nifti::write_field(&pair.target, &dir.join("target_field.nii"))?;
    println!("wrote synthetic pair {} (seed {seed}) to {}", a.dims, dir.display());
    Ok(())
}

fn run_meanvol(a: MeanvolArgs) -> Result<()> {
    let images = load_all(&a.images)?;
    let refs: Vec<&Volume<f32>> = images.iter().collect();
    write_volume_any(&mean_volume(&refs)?, &a.out)?;
    println!("mean of {} volumes written to {}", images.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from([
            "fcnreg", "synth", "--dims", "8,8,8", "--amplitude", "2", "--sigma", "3", "--seed", "4",
            "--out", "x", "--variant", "no_pool",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(4));
        assert_eq!(cli.variant, Some(ArchitectureVariant::NoPool));
        assert!(matches!(cli.command, Command::Synth(SynthArgs { dims: Dims([8, 8, 8]), .. })));
    }

    #[test]
    fn labels_require_each_other() {
        let r = Cli::try_parse_from([
            "fcnreg", "register", "--model", "m", "--fixed", "f.nii", "--moving", "m.nii",
            "--out-warped", "w.nii", "--moving-labels", "l.nii",
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn image_list_forms() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["b.nii", "a.nii", "notes.txt"] {
            std::fs::write(dir.path().join(n), b"").unwrap();
        }
        let from_dir = image_paths(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(from_dir, vec![dir.path().join("a.nii"), dir.path().join("b.nii")]);
        assert_eq!(image_paths("x.nii, y.raw").unwrap().len(), 2);
        let list = dir.path().join("list.txt");
        std::fs::write(&list, "# images\nx.nii\n\ny.nii\n").unwrap();
        assert_eq!(image_paths(list.to_str().unwrap()).unwrap().len(), 2);
        assert!(image_paths(dir.path().join("empty").to_str().unwrap()).is_err());
    }
}

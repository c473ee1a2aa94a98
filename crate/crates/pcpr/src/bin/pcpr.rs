//! Command-line front end for the reconstruction pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use pcpr::cli::{
    cmd_demo2d, cmd_evaluate, cmd_grad_check, cmd_reconstruct, cmd_rerun, cmd_train_prior,
    Demo2dSettings, EvaluateSettings, GradCheckSettings, ReconstructSettings,
    TrainPriorSettings,
};
use pcpr::error::Error;
use pcpr::geometry::SigmaMode;
use pcpr::prior::LossMode;
use pcpr::specialize::SpecializeMode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pcpr",
    version,
    about = "Point-cloud surface reconstruction via a learned local SDF prior and query prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the local SDF prior from a directory (or single file) of point clouds
    TrainPrior(TrainPriorArgs),
    /// Specialize a prior to one cloud and extract a mesh
    Reconstruct(ReconstructArgs),
    /// Compare a reconstruction against ground truth
    Evaluate(EvaluateArgs),
    /// Self-contained 2D circle-to-square demonstration
    Demo2d(Demo2dArgs),
    /// Finite-difference validation of the gradient engine
    GradCheck(GradCheckArgs),
    /// Re-execute a recorded run from its manifest
    Rerun(RerunArgs),
}

#[derive(Args)]
struct CommonOpt {
    /// JSON settings file; command-line flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for all random sub-streams
    #[arg(long)]
    seed: Option<u64>,
}

fn load_settings<T: serde::de::DeserializeOwned + Default>(
    config: &Option<PathBuf>,
) -> anyhow::Result<T> {
    match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            Ok(serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?)
        }
        None => Ok(T::default()),
    }
}

fn parse_sigma_mode(s: &str) -> Result<SigmaMode, String> {
    match s {
        "variance" => Ok(SigmaMode::Variance),
        "stddev" => Ok(SigmaMode::Stddev),
        _ => Err(format!("unknown sigma mode '{s}' (variance|stddev)")),
    }
}

fn parse_loss_mode(s: &str) -> Result<LossMode, String> {
    match s {
        "squared" => Ok(LossMode::Squared),
        "plain" => Ok(LossMode::Plain),
        _ => Err(format!("unknown loss mode '{s}' (squared|plain)")),
    }
}

fn parse_mode(s: &str) -> Result<SpecializeMode, String> {
    match s {
        "full" => Ok(SpecializeMode::Full),
        "no-shift" => Ok(SpecializeMode::NoShift),
        "direct-q" => Ok(SpecializeMode::DirectQ),
        "fixed-cond" => Ok(SpecializeMode::FixedCond),
        "no-prior" => Ok(SpecializeMode::NoPrior),
        "joint-tune" => Ok(SpecializeMode::JointTune),
        _ => Err(format!(
            "unknown mode '{s}' (full|no-shift|direct-q|fixed-cond|no-prior|joint-tune)"
        )),
    }
}

#[derive(Args)]
struct ArchOpt {
    /// Point dimension (2 or 3)
    #[arg(long)]
    dim: Option<usize>,
    /// Condition feature width
    #[arg(long)]
    feature: Option<usize>,
    /// Encoder hidden widths, comma separated
    #[arg(long)]
    enc_hidden: Option<String>,
    /// Implicit net hidden width
    #[arg(long)]
    imp_hidden: Option<usize>,
    /// Implicit net layer count
    #[arg(long)]
    imp_layers: Option<usize>,
    /// Query net hidden width
    #[arg(long)]
    qnet_hidden: Option<usize>,
    /// Query net layer count
    #[arg(long)]
    qnet_layers: Option<usize>,
}

impl ArchOpt {
    fn apply(&self, arch: &mut pcpr::nets::ArchConfig) -> anyhow::Result<()> {
        if let Some(d) = self.dim {
            arch.dim = d;
        }
        if let Some(f) = self.feature {
            arch.feature = f;
        }
        if let Some(h) = &self.enc_hidden {
            arch.enc_hidden = h
                .split(',')
                .map(|x| x.trim().parse::<usize>().context("parsing --enc-hidden"))
                .collect::<anyhow::Result<_>>()?;
        }
        if let Some(h) = self.imp_hidden {
            arch.imp_hidden = h;
        }
        if let Some(l) = self.imp_layers {
            arch.imp_layers = l;
        }
        if let Some(h) = self.qnet_hidden {
            arch.qnet_hidden = h;
        }
        if let Some(l) = self.qnet_layers {
            arch.qnet_layers = l;
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainPriorArgs {
    /// Input point cloud file or directory of .xyz/.ply/.txt files
    #[arg(long)]
    input: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Grid subdivisions per axis for local regions
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    queries_per_region: Option<usize>,
    #[arg(long)]
    per_point: Option<usize>,
    #[arg(long)]
    k_sigma: Option<usize>,
    #[arg(long, value_parser = parse_sigma_mode)]
    sigma_mode: Option<SigmaMode>,
    #[arg(long, value_parser = parse_loss_mode)]
    loss_mode: Option<LossMode>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    #[command(flatten)]
    arch: ArchOpt,
    #[command(flatten)]
    common: CommonOpt,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Input point cloud (consumed as-is, in its global coordinates)
    #[arg(long)]
    input: PathBuf,
    /// Prior checkpoint; optional only for --mode no-prior
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Output mesh path (.obj or .ply)
    #[arg(long)]
    out: PathBuf,
    /// full | no-shift | direct-q | fixed-cond | no-prior | joint-tune
    #[arg(long, value_parser = parse_mode)]
    mode: Option<SpecializeMode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    queries_per_step: Option<usize>,
    #[arg(long)]
    per_point: Option<usize>,
    #[arg(long)]
    k_sigma: Option<usize>,
    #[arg(long, value_parser = parse_sigma_mode)]
    sigma_mode: Option<SigmaMode>,
    #[arg(long, value_parser = parse_loss_mode)]
    loss_mode: Option<LossMode>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Marching-cubes lattice nodes per axis
    #[arg(long)]
    mc_res: Option<usize>,
    /// Bounding-box inflation fraction for the lattice
    #[arg(long)]
    bounds_inflate: Option<f64>,
    /// Metric-ready surface samples written next to the mesh
    #[arg(long)]
    samples: Option<usize>,
    /// Uniformly pre-scale extreme inputs into a unit box (mesh mapped back)
    #[arg(long)]
    pre_scale: bool,
    #[command(flatten)]
    arch: ArchOpt,
    #[command(flatten)]
    common: CommonOpt,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reconstructed mesh or point set
    #[arg(long)]
    recon: PathBuf,
    /// Ground-truth mesh or point set
    #[arg(long)]
    truth: PathBuf,
    /// Report path (key=value text; a .json twin is written alongside)
    #[arg(long, default_value = "metrics.txt")]
    out: PathBuf,
    /// Surface samples per mesh side
    #[arg(long)]
    samples: Option<usize>,
    /// F-score threshold μ
    #[arg(long)]
    fscore_threshold: Option<f64>,
    #[command(flatten)]
    common: CommonOpt,
}

#[derive(Args)]
struct Demo2dArgs {
    /// Output directory for contour, transport table and report
    #[arg(long, default_value = "demo2d_out")]
    out_dir: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<SpecializeMode>,
    /// Desk-scale network width
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    prior_epochs: Option<usize>,
    #[arg(long)]
    spec_steps: Option<usize>,
    #[arg(long)]
    queries_per_batch: Option<usize>,
    #[arg(long)]
    contour_res: Option<usize>,
    #[command(flatten)]
    common: CommonOpt,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Report path
    #[arg(long, default_value = "gradcheck_report.json")]
    out: PathBuf,
    /// First-order instance count (double-backprop runs a fifth of it)
    #[arg(long)]
    instances: Option<usize>,
    /// Maximum MLP depth
    #[arg(long)]
    layers: Option<usize>,
    /// Maximum MLP width
    #[arg(long)]
    width: Option<usize>,
    #[command(flatten)]
    common: CommonOpt,
}

#[derive(Args)]
struct RerunArgs {
    /// Manifest written by a previous run
    manifest: PathBuf,
    /// Redirect outputs into this directory
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainPrior(a) => {
            let mut s: TrainPriorSettings = load_settings(&a.common.config)?;
            if let Some(v) = a.grid {
                s.grid = v;
            }
            if let Some(v) = a.epochs {
                s.train.epochs = v;
            }
            if let Some(v) = a.queries_per_region {
                s.train.queries_per_region = v;
            }
            if let Some(v) = a.per_point {
                s.train.per_point = v;
            }
            if let Some(v) = a.k_sigma {
                s.train.k_sigma = v;
            }
            if let Some(v) = a.sigma_mode {
                s.train.sigma_mode = v;
            }
            if let Some(v) = a.loss_mode {
                s.train.loss_mode = v;
            }
            if let Some(v) = a.lr {
                s.train.adam.lr = v;
            }
            if let Some(v) = a.common.seed {
                s.train.seed = v;
            }
            a.arch.apply(&mut s.train.arch)?;
            let manifest = cmd_train_prior(&a.input, &a.out, &s)?;
            println!(
                "trained prior over {} input file(s) in {:.1}s -> {}",
                manifest.inputs.len(),
                manifest.duration_secs,
                a.out.display()
            );
            Ok(())
        }
        Command::Reconstruct(a) => {
            let mut s: ReconstructSettings = load_settings(&a.common.config)?;
            if let Some(v) = a.mode {
                s.spec.mode = v;
            }
            if let Some(v) = a.steps {
                s.spec.steps = v;
            }
            if let Some(v) = a.queries_per_step {
                s.spec.queries_per_step = v;
            }
            if let Some(v) = a.per_point {
                s.spec.per_point = v;
            }
            if let Some(v) = a.k_sigma {
                s.spec.k_sigma = v;
            }
            if let Some(v) = a.sigma_mode {
                s.spec.sigma_mode = v;
            }
            if let Some(v) = a.loss_mode {
                s.spec.loss_mode = v;
            }
            if let Some(v) = a.lr {
                s.spec.adam.lr = v;
            }
            if let Some(v) = a.mc_res {
                s.mc_res = v;
            }
            if let Some(v) = a.bounds_inflate {
                s.bounds_inflate = v;
            }
            if let Some(v) = a.samples {
                s.sample_count = v;
            }
            if a.pre_scale {
                s.pre_scale = true;
            }
            if let Some(v) = a.common.seed {
                s.spec.seed = v;
            }
            if s.spec.mode == SpecializeMode::NoPrior && a.prior.is_none() {
                let mut arch = s.spec.arch.take().unwrap_or_default();
                a.arch.apply(&mut arch)?;
                s.spec.arch = Some(arch);
            }
            let manifest = cmd_reconstruct(&a.input, a.prior.as_deref(), &a.out, &s)?;
            println!(
                "reconstructed {} in {:.1}s",
                a.out.display(),
                manifest.duration_secs
            );
            Ok(())
        }
        Command::Evaluate(a) => {
            let mut s: EvaluateSettings = load_settings(&a.common.config)?;
            if let Some(v) = a.samples {
                s.metric.sample_count = v;
            }
            if let Some(v) = a.fscore_threshold {
                s.metric.fscore_threshold = v;
            }
            if let Some(v) = a.common.seed {
                s.metric.seed = v;
            }
            let (_, report) = cmd_evaluate(&a.recon, &a.truth, &a.out, &s)?;
            print!("{}", report.to_kv_text());
            Ok(())
        }
        Command::Demo2d(a) => {
            let mut s: Demo2dSettings = load_settings(&a.common.config)?;
            if let Some(v) = a.mode {
                s.mode = v;
            }
            if let Some(v) = a.width {
                s.width = v;
            }
            if let Some(v) = a.prior_epochs {
                s.prior_epochs = v;
            }
            if let Some(v) = a.spec_steps {
                s.spec_steps = v;
            }
            if let Some(v) = a.queries_per_batch {
                s.queries_per_batch = v;
            }
            if let Some(v) = a.contour_res {
                s.contour_res = v;
            }
            if let Some(v) = a.common.seed {
                s.seed = v;
            }
            let (_, report) = cmd_demo2d(&a.out_dir, &s)?;
            println!(
                "pulled points within {:.3}: {:.1}% ({})",
                s.pass_distance,
                report.pulled_within_fraction * 100.0,
                if report.pulled_pass { "PASS" } else { "FAIL" }
            );
            println!("contour chamfer-L1: {:.5}", report.contour_chamfer_l1);
            Ok(())
        }
        Command::GradCheck(a) => {
            let mut s: GradCheckSettings = load_settings(&a.common.config)?;
            if let Some(v) = a.instances {
                s.first_order_instances = v;
                s.double_backprop_instances = (v / 5).max(1);
            }
            if let Some(v) = a.layers {
                s.max_layers = v;
            }
            if let Some(v) = a.width {
                s.max_width = v;
            }
            if let Some(v) = a.common.seed {
                s.seed = v;
            }
            cmd_grad_check(&a.out, &s)?;
            println!("gradient checks passed -> {}", a.out.display());
            Ok(())
        }
        Command::Rerun(a) => {
            let manifest = cmd_rerun(&a.manifest, a.out_dir.as_deref())?;
            println!(
                "reran '{}' in {:.1}s",
                manifest.command, manifest.duration_secs
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<Error>()
                .map(|pe| pe.exit_code())
                .unwrap_or(2);
            ExitCode::from(code as u8)
        }
    }
}

//! `dualview` command line.
//!
//! Settings are resolved in this order, later winning: built-in defaults, the
//! `--config` TOML file, then flags given on the command line. Verbosity is
//! controlled with `RUST_LOG` (default `info`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use dualview::commands::{self, AugmentOptions};
use dualview::config::RunConfig;
use dualview::Result;
use dualview_core::frequency::FilterGeometry;

#[derive(Parser)]
#[command(name = "dualview", version, about = "Dual-view volumetric segmentation with frequency-masked views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom image/label pairs and a manifest.
    Synth(SynthArgs),
    /// Write high-frequency views (and difference maps) of images.
    Augment(AugmentArgs),
    /// Train both views and the critic.
    Train(TrainArgs),
    /// Segment images with a trained checkpoint.
    Infer(InferArgs),
    /// Score predicted label masks against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Run configuration file; its [synth] table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of cases.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Seed of the first case; case i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid extent along every axis.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Standard deviation of the additive noise.
    #[arg(long, default_value_t = 0.05)]
    noise_std: f32,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    /// Directory of input images.
    #[arg(long = "in")]
    input: PathBuf,
    /// Cutoff as a fraction of the Nyquist radius.
    #[arg(long, default_value_t = 0.10)]
    cutoff: f64,
    /// Filter geometry: radial or cubic.
    #[arg(long, default_value = "radial")]
    geometry: FilterGeometry,
    /// Also write |x - x_hf| difference maps.
    #[arg(long)]
    diff: bool,
    /// Keep the DC bin too (all-pass filter); requires --cutoff 0.
    #[arg(long)]
    keep_dc: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of <case>_image / <case>_label pairs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written with the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Segmentation networks' SGD learning rate.
    #[arg(long, default_value_t = 0.01)]
    seg_lr: f64,
    /// Critic's AdamW learning rate.
    #[arg(long, default_value_t = 1e-4)]
    critic_lr: f64,
    /// Weight of the masked cross-entropy.
    #[arg(long, default_value_t = 0.3)]
    lambda_m: f64,
    /// Weight of the adversarial loss.
    #[arg(long, default_value_t = 0.01)]
    lambda_c: f64,
    /// Confidence threshold of the masked cross-entropy.
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    /// High-pass cutoff of the second view.
    #[arg(long, default_value_t = 0.10)]
    cutoff: f64,
    /// Fraction of cases used for training.
    #[arg(long, default_value_t = 0.76)]
    split: f64,
    /// Patch extent along every axis.
    #[arg(long, default_value_t = 128)]
    patch: usize,
    /// Channels of the networks' first level.
    #[arg(long, default_value_t = 16)]
    base_width: usize,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of images.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for <case>_pred.nii.gz files.
    #[arg(long)]
    out: PathBuf,
    /// Run configuration; its label map is used and its [train] table must
    /// match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of <case>_pred files.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of <case>_label files.
    #[arg(long)]
    gt: PathBuf,
    /// Output directory for per_case.csv and summary.csv.
    #[arg(long)]
    out: PathBuf,
    /// Run configuration; only its label map is used.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn given(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

fn run_synth(a: SynthArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let s = &mut cfg.synth;
    if given(m, "n") {
        s.count = a.n;
    }
    if given(m, "seed") {
        s.seed = a.seed;
    }
    if given(m, "size") {
        s.phantom.shape = [a.size; 3];
    }
    if given(m, "noise_std") {
        s.phantom.noise_std = a.noise_std;
    }
    let manifest = commands::synth(&cfg.synth, &a.out)?;
    cfg.echo(&a.out)?;
    log::info!("wrote {} cases to {}", manifest.count, a.out.display());
    Ok(())
}

fn run_augment(a: AugmentArgs) -> Result<()> {
    let opts = AugmentOptions { cutoff: a.cutoff, geometry: a.geometry, diff: a.diff, keep_dc: a.keep_dc };
    let written = commands::augment(&a.input, &a.out, &opts)?;
    log::info!("wrote {} volumes to {}", written.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(d) = a.data {
        cfg.data.dir = Some(d);
    }
    if let Some(o) = a.out {
        cfg.data.out = Some(o);
    }
    let t = &mut cfg.train;
    if given(m, "epochs") {
        t.epochs = a.epochs;
    }
    if given(m, "batch_size") {
        t.batch_size = a.batch_size;
    }
    if given(m, "seed") {
        t.seed = a.seed;
    }
    if given(m, "seg_lr") {
        t.seg_lr = a.seg_lr;
    }
    if given(m, "critic_lr") {
        t.critic_lr = a.critic_lr;
    }
    if given(m, "lambda_m") {
        t.weights.lambda_m = a.lambda_m;
    }
    if given(m, "lambda_c") {
        t.weights.lambda_c = a.lambda_c;
    }
    if given(m, "threshold") {
        t.weights.threshold = a.threshold;
    }
    if given(m, "cutoff") {
        t.cutoff = a.cutoff;
    }
    if given(m, "split") {
        t.split_fraction = a.split;
    }
    if given(m, "patch") {
        t.patch.target_shape = [a.patch; 3];
    }
    if given(m, "base_width") {
        t.network.base_width = a.base_width;
    }
    let summary = commands::train(&cfg, a.resume.as_deref())?;
    log::info!(
        "trained on {} cases, validated on {}; best validation DSC {:.4}; outputs in {}",
        summary.train_cases.len(),
        summary.val_cases.len(),
        summary.best_val_dsc,
        summary.out.display()
    );
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<()> {
    let cfg = a.config.as_deref().map(RunConfig::load).transpose()?;
    let labels = cfg.as_ref().map(|c| c.labels).unwrap_or_default();
    let written = commands::infer(&a.checkpoint, &a.input, &a.out, &labels, cfg.as_ref().map(|c| &c.train))?;
    log::info!("wrote {} predictions to {}", written.len(), a.out.display());
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let reports = commands::evaluate(&a.pred, &a.gt, &a.out, &cfg.labels)?;
    let stats = dualview_core::metrics::summarize(&reports);
    log::info!(
        "{} cases: DSC {:.4}±{:.4}, HD95 {:.3}±{:.3} mm",
        reports.len(),
        stats[0].mean,
        stats[0].std,
        stats[2].mean,
        stats[2].std
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    let result = match cli.command {
        Command::Synth(a) => run_synth(a, sub),
        Command::Augment(a) => run_augment(a),
        Command::Train(a) => run_train(a, sub),
        Command::Infer(a) => run_infer(a),
        Command::Evaluate(a) => run_evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

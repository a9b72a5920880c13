//! `gmfvad` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::data::{self, load_manifest, load_videos, AnomalyChannel, SyntheticSpec};
use crate::error::Error;
use crate::evaluator::{self, evaluate_dataset, read_score_csv, score_videos, write_score_csv};
use crate::model::ModelDims;
use crate::trainer::{Checkpoint, EpochLog, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "gmfvad",
    version,
    about = "Weakly-supervised video anomaly detection on snippet features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a known anomaly window.
    Synth(SynthArgs),
    /// Train a model on a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Score a labelled test manifest, write frame scores and print AUC/AP as JSON.
    Eval(EvalArgs),
    /// Recompute AUC/AP from a score CSV.
    Metrics(MetricsArgs),
    /// Write plot-ready frame scores for any manifest (labels optional).
    ExportScores(ExportArgs),
}

fn parse_window(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected START:END, got {s:?}"))?;
    let a = a.parse().map_err(|_| format!("bad window start {a:?}"))?;
    let b = b.parse().map_err(|_| format!("bad window end {b:?}"))?;
    Ok((a, b))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Normal training videos.
    #[arg(long, default_value_t = 50)]
    pub normal: usize,
    /// Abnormal training videos.
    #[arg(long, default_value_t = 50)]
    pub abnormal: usize,
    /// Normal test videos.
    #[arg(long, default_value_t = 20)]
    pub test_normal: usize,
    /// Abnormal test videos.
    #[arg(long, default_value_t = 20)]
    pub test_abnormal: usize,
    /// Snippets per video.
    #[arg(long = "T", default_value_t = 32)]
    pub snippets: usize,
    /// Visual feature width.
    #[arg(long = "D", default_value_t = 16)]
    pub visual_dim: usize,
    /// Text feature width.
    #[arg(long = "Dt", default_value_t = 8)]
    pub text_dim: usize,
    /// Crops per snippet.
    #[arg(long, default_value_t = 2)]
    pub crops: usize,
    /// Anomalous snippet range START:END (end exclusive).
    #[arg(long, default_value = "8:16", value_parser = parse_window)]
    pub window: (usize, usize),
    /// Which features carry the anomaly: visual, text or both.
    #[arg(long, default_value = "both")]
    pub channel: AnomalyChannel,
    /// Mean shift applied inside the anomaly window.
    #[arg(long, default_value_t = 2.0)]
    pub shift: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest (JSON lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint path; the sidecar goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// Weight decay (added to the gradient).
    #[arg(long, default_value_t = 0.005)]
    pub wd: f64,
    /// Videos per step, half normal and half abnormal.
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Weight of the magnitude margin loss.
    #[arg(long, default_value_t = 0.0001)]
    pub alpha: f64,
    /// Magnitude margin c.
    #[arg(long, default_value_t = 100.0)]
    pub margin: f64,
    /// Top-k snippets per video.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Glance-focus output width (defaults to the visual width).
    #[arg(long)]
    pub grained_dim: Option<usize>,
    /// Text width used by the model; 0 trains the visual-only model. Defaults to the data.
    #[arg(long)]
    pub text_dim: Option<usize>,
    /// Focus attention radius.
    #[arg(long, default_value_t = 2)]
    pub radius: usize,
    #[arg(long, default_value_t = 512)]
    pub hidden1: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden2: usize,
    /// Write the epoch loss CSV here instead of stdout.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test manifest with frame labels.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Frame score CSV output.
    #[arg(long)]
    pub scores_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Score CSV (`video_id,frame_index,score,label`).
    #[arg(long)]
    pub scores: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Frame score CSV output.
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn synth(args: SynthArgs, out: &mut dyn Write) -> Result<(), Error> {
    if !args.force && fs::read_dir(&args.out).is_ok_and(|mut d| d.next().is_some()) {
        return Err(Error::io(
            &args.out,
            std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                "directory is not empty (use --force)",
            ),
        ));
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let spec = SyntheticSpec {
        n_normal: args.normal,
        n_abnormal: args.abnormal,
        n_test_normal: args.test_normal,
        n_test_abnormal: args.test_abnormal,
        snippets: args.snippets,
        visual_dim: args.visual_dim,
        text_dim: args.text_dim,
        n_crops: args.crops,
        anomaly_window: args.window,
        anomaly_channel: args.channel,
        shift_magnitude: args.shift,
        seed: args.seed,
    };
    spec.validate()?;
    let (train, test) = data::generate_synthetic_dataset(&spec, &args.out)?;
    if train.records.is_empty() && test.records.is_empty() {
        eprintln!("warning: generated an empty dataset");
    }
    let _ = writeln!(
        out,
        "wrote {} train ({} normal, {} abnormal) and {} test videos to {}",
        train.records.len(),
        train.count_normal(),
        train.count_abnormal(),
        test.records.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs, out: &mut dyn Write) -> Result<(), Error> {
    let manifest = load_manifest(&args.manifest)?;
    let videos = load_videos(&manifest)?;
    let first = videos.first().ok_or(Error::MissingClass("normal"))?;
    let visual_dim = first.features.dim().2;
    let text_dim = args.text_dim.unwrap_or(first.text.ncols());
    let dims = ModelDims {
        grained_dim: args.grained_dim.unwrap_or(visual_dim),
        radius: args.radius,
        classifier_hidden: [args.hidden1, args.hidden2],
        ..ModelDims::new(visual_dim, text_dim)
    };
    let config = TrainConfig {
        learning_rate: args.lr,
        weight_decay: args.wd,
        batch_size: args.batch_size,
        epochs: args.epochs,
        alpha: args.alpha,
        margin: args.margin,
        k: args.k,
        seed: args.seed,
        dims,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, &videos)?;
    let mut log: Box<dyn Write> = match &args.log {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(&mut *out),
    };
    let _ = writeln!(log, "epoch,loss,loss_v,loss_s");
    trainer.run(|e: &EpochLog| {
        let _ = writeln!(log, "{},{},{},{}", e.epoch, e.loss, e.loss_v, e.loss_s);
    })?;
    trainer.checkpoint().save(&args.out)
}

fn eval(args: EvalArgs, out: &mut dyn Write) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let manifest = load_manifest(&args.manifest)?;
    let (report, _) = evaluate_dataset(
        &ckpt.params,
        &manifest,
        ckpt.config.epsilon,
        args.scores_out.as_deref(),
    )?;
    let _ = writeln!(out, "{}", serde_json::to_string(&report)?);
    Ok(())
}

fn metrics(args: MetricsArgs, out: &mut dyn Write) -> Result<(), Error> {
    let records = read_score_csv(&args.scores)?;
    let report = evaluator::metrics(&records)?;
    let _ = writeln!(out, "{}", serde_json::to_string(&report)?);
    Ok(())
}

fn export_scores(args: ExportArgs, out: &mut dyn Write) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let manifest = load_manifest(&args.manifest)?;
    let videos = load_videos(&manifest)?;
    let records = score_videos(&ckpt.params, &videos, ckpt.config.epsilon)?;
    write_score_csv(&records, &args.out)?;
    let frames: usize = records.iter().map(|r| r.frame_scores.len()).sum();
    let _ = writeln!(
        out,
        "wrote {frames} frame scores for {} videos to {}",
        records.len(),
        args.out.display()
    );
    Ok(())
}

/// Runs the CLI with the given arguments (including the program name), writing
/// normal output to `out`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Metrics(a) => metrics(a, out),
        Command::ExportScores(a) => export_scores(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

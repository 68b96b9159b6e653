//! `twinstage`: synthesize corpora, pre-train, fine-tune or probe, evaluate,
//! search learning rates, compare configurations and write reports.
//!
//! Every tunable is a `--flag`, a `TWINSTAGE_<KEY>` variable and a config
//! key at once; flags use dashes where keys use underscores.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use error::{classify, render, ErrorClass};

#[derive(Parser, Debug)]
#[command(name = "twinstage", version, about = "Two-stage self-supervised transfer learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a labelled procedural image corpus with a manifest.
    Synth(SynthArgs),
    /// Further self-supervised pre-training of an encoder.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning of the whole network, one run per seed.
    Finetune(SupervisedArgs),
    /// Train a linear head on a frozen encoder, one run per seed.
    Probe(SupervisedArgs),
    /// Evaluate a trained classifier archive on a manifest's test split.
    Eval(EvalArgs),
    /// Learning-rate range test for a training configuration.
    Lrfind(LrFindArgs),
    /// Welch t-test between two configurations.
    Compare(CompareArgs),
    /// Tables and plots for one or more run directories.
    Report(ReportArgs),
}

#[derive(Args, Serialize, Debug, Default)]
pub struct Common {
    /// Config file with `key = value` lines and `[subcommand]` sections.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Run every kernel sequentially.
    #[arg(long)]
    pub deterministic: bool,
    /// Output directory; must not already contain files.
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Args, Serialize, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub train: Option<String>,
    #[arg(long)]
    pub test: Option<String>,
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// `none`, `lesion`, or comma-separated class weights.
    #[arg(long)]
    pub imbalance: Option<String>,
}

/// Encoder selection shared by training commands.
#[derive(Args, Serialize, Debug)]
pub struct EncoderArgs {
    /// `tiny-conv` or `resnet50-shape`.
    #[arg(long)]
    pub encoder: Option<String>,
    #[arg(long)]
    pub encoder_dim: Option<String>,
    /// Seed for a randomly initialised encoder.
    #[arg(long)]
    pub encoder_seed: Option<String>,
    #[arg(long)]
    pub image_size: Option<String>,
}

/// 1cycle and learning-rate search settings.
#[derive(Args, Serialize, Debug)]
pub struct ScheduleArgs {
    /// Peak learning rate; skips the search when given.
    #[arg(long)]
    pub max_lr: Option<String>,
    #[arg(long)]
    pub div: Option<String>,
    #[arg(long)]
    pub final_div: Option<String>,
    #[arg(long)]
    pub pct_ramp: Option<String>,
    #[arg(long)]
    pub max_momentum: Option<String>,
    #[arg(long)]
    pub min_momentum: Option<String>,
    /// `cosine` or `linear`.
    #[arg(long)]
    pub interpolation: Option<String>,
    #[arg(long)]
    pub lr_find_iters: Option<String>,
    #[arg(long)]
    pub lr_find_start: Option<String>,
    #[arg(long)]
    pub lr_find_end: Option<String>,
}

/// Barlow Twins objective and projector settings.
#[derive(Args, Serialize, Debug)]
pub struct SslArgs {
    #[arg(long)]
    pub projector_layers: Option<String>,
    #[arg(long)]
    pub projector_width: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    /// `rows` or `columns` of the final projector weight.
    #[arg(long)]
    pub l21_grouping: Option<String>,
    /// Centre cutout in both augmentation branches.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub cutout: Option<String>,
}

#[derive(Args, Serialize, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Manifest, optionally named: `NAME=PATH`. Repeatable.
    #[arg(long)]
    pub manifest: Vec<String>,
    /// Weighted sum of named manifests, e.g. `2*IU + DermNet`.
    #[arg(long)]
    pub corpus: Option<String>,
    /// `ssl` (whole encoder) or `ssl_p` (final bottleneck block only).
    #[arg(long)]
    pub mode: Option<String>,
    /// Encoder archive to start from; random initialisation otherwise.
    #[arg(long)]
    pub init_archive: Option<String>,
    #[arg(long)]
    pub provenance: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub ssl: SslArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long)]
    pub head_epochs: Option<String>,
    #[arg(long)]
    pub head_lr: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

#[derive(Args, Serialize, Debug)]
pub struct SupervisedArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: Option<String>,
    /// Encoder archive; a random encoder is used when absent.
    #[arg(long)]
    pub encoder_archive: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub schedule: ScheduleArgs,
    /// Comma-separated seeds or a half-open range `a..b`.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub head_epochs: Option<String>,
    #[arg(long)]
    pub head_lr: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    /// Augmented views averaged per test image.
    #[arg(long)]
    pub tta: Option<String>,
    #[arg(long)]
    pub eval_batch: Option<String>,
}

#[derive(Args, Serialize, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: Option<String>,
    /// Classifier archive written by `finetune` or `probe`.
    #[arg(long)]
    pub archive: Option<String>,
    #[arg(long)]
    pub tta: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub image_size: Option<String>,
    #[arg(long)]
    pub eval_batch: Option<String>,
}

#[derive(Args, Serialize, Debug)]
pub struct LrFindArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: Vec<String>,
    #[arg(long)]
    pub corpus: Option<String>,
    /// `probe`, `finetune`, `ssl` or `ssl_p`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub encoder_archive: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub ssl: SslArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long)]
    pub head_epochs: Option<String>,
    #[arg(long)]
    pub head_lr: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

#[derive(Args, Serialize, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Run directory (or metrics.csv) for configuration A.
    #[arg(long)]
    pub run_a: Option<String>,
    #[arg(long)]
    pub run_b: Option<String>,
    /// Summary statistics: `mean=..,std=..,n=..[,f1_mean=..,f1_std=..]`.
    #[arg(long)]
    pub summary_a: Option<String>,
    #[arg(long)]
    pub summary_b: Option<String>,
    #[arg(long)]
    pub label_a: Option<String>,
    #[arg(long)]
    pub label_b: Option<String>,
    /// `le` (one-sided, A <= B) or `eq` (two-sided).
    #[arg(long)]
    pub null: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
}

#[derive(Args, Serialize, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Run directory. Repeatable; the report is written into the first
    /// unless `--out` is given.
    #[arg(long)]
    pub run: Vec<String>,
    #[arg(long)]
    pub null: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", render(ErrorClass::Usage, first.trim_start_matches("error: ")));
            return ExitCode::from(ErrorClass::Usage.code() as u8);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::supervised(&a, false),
        Command::Probe(a) => commands::supervised(&a, true),
        Command::Eval(a) => commands::eval(&a),
        Command::Lrfind(a) => commands::lrfind(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = classify(&e);
            // Core error texts already embed their sources; skip repeats.
            let mut parts: Vec<String> = Vec::new();
            for cause in e.chain() {
                let t = cause.to_string();
                if parts.last().is_none_or(|p| !p.contains(&t)) {
                    parts.push(t);
                }
            }
            eprintln!("{}", render(class, &parts.join(": ")));
            ExitCode::from(class.code() as u8)
        }
    }
}

//! `aupt` — train and evaluate the face-action classification pipeline:
//! synthesize datasets, pre-train on noisy labels, fine-tune with
//! subject-independent cross-validation, run pre-training-size ablations,
//! and render reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    cmd_ablate, cmd_eval, cmd_finetune, cmd_pretrain, cmd_report, cmd_synth, AblateOpts, EvalOpts,
    FinetuneOpts, ReportOpts, SynthOpts, TrainOpts,
};

#[derive(Parser)]
#[command(
    name = "aupt",
    about = "Noisy-label pre-training and transfer pipeline for multi-label face-action classification",
    long_about = "Subcommands cover the full workflow: `synth` renders a synthetic dataset, \
`pretrain` trains on noisy labels, `finetune` runs subject-independent k-fold transfer from a \
checkpoint, `eval` scores a checkpoint on a manifest, `ablate` sweeps pre-training set sizes, and \
`report` renders metric tables.\n\nRelative manifest/checkpoint paths are resolved against \
$AUPT_DATA_ROOT when it is set. Config files are plain-text `key = value` lines; unknown keys are \
rejected and the effective configuration (with its hash) is echoed and stored with every run."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted labels and label noise.
    Synth {
        /// Output directory for images and manifests.
        #[arg(long)]
        out_dir: PathBuf,
        /// Config file (keys: subjects, images_per_subject, labels, noise, image_size, seed).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        images_per_subject: Option<usize>,
        #[arg(long)]
        labels: Option<usize>,
        /// Label flip probability in [0, 0.5).
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train on a (noisy-label) manifest and write a checkpoint.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        /// Label encoding of the manifest: binary | intensity.
        #[arg(long, default_value = "binary")]
        label_kind: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Config file with training keys (lr, batch_size, max_epochs, ...).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Network input channels (1 = grayscale, 3 = rgb).
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Fine-tune a pre-trained checkpoint with subject-independent k-fold CV.
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        /// Label encoding of the manifest: binary | intensity.
        #[arg(long, default_value = "binary")]
        label_kind: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Pre-trained checkpoint to start from.
        #[arg(long)]
        from: PathBuf,
        /// Number of subject-independent folds.
        #[arg(long, default_value_t = 3)]
        folds: usize,
        /// Run only these folds (comma separated), e.g. `0` or `0,2`.
        #[arg(long, value_delimiter = ',')]
        fold_subset: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Score a checkpoint over a manifest and write predictions + report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Label encoding of the manifest: binary | intensity.
        #[arg(long, default_value = "binary")]
        label_kind: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Sweep pre-training set size by images or by subjects.
    Ablate {
        /// Sweep axis: images | subjects.
        #[arg(long)]
        axis: String,
        /// Pre-training pool manifest (noisy labels).
        #[arg(long)]
        manifest: PathBuf,
        /// Fine-tune manifest (clean labels, subjects disjoint from the pool).
        #[arg(long)]
        finetune_manifest: PathBuf,
        /// Grid, e.g. `1000,2000,10000,all` (defaults mirror the study design).
        #[arg(long)]
        grid: Option<String>,
        /// Comma-separated run seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value_t = 3)]
        folds: usize,
        /// Run only these fine-tune folds per grid point.
        #[arg(long, value_delimiter = ',')]
        fold_subset: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Config file with `pretrain.*` / `finetune.*` training keys.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render metric tables from stored predictions or a per-AU fixture.
    Report {
        /// Per-AU value fixture CSV (first column is the row label).
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Prediction CSVs written by `finetune`/`eval`, one per fold.
        #[arg(long, num_args = 1..)]
        predictions: Vec<PathBuf>,
        /// Also write report.csv / report.txt here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { out_dir, config, subjects, images_per_subject, labels, noise, image_size, seed } => {
            cmd_synth(SynthOpts { out_dir, config, subjects, images_per_subject, labels, noise, image_size, seed })
        }
        Command::Pretrain { manifest, label_kind, out_dir, config, channels, seed, lr, batch_size, max_epochs } => {
            cmd_pretrain(TrainOpts { manifest, label_kind, out_dir, config, channels, seed, lr, batch_size, max_epochs })
        }
        Command::Finetune {
            manifest,
            label_kind,
            out_dir,
            from,
            folds,
            fold_subset,
            config,
            seed,
            lr,
            batch_size,
            max_epochs,
        } => cmd_finetune(FinetuneOpts {
            train: TrainOpts {
                manifest,
                label_kind,
                out_dir,
                config,
                channels: 1,
                seed,
                lr,
                batch_size,
                max_epochs,
            },
            from: Some(from),
            folds,
            fold_subset,
        }),
        Command::Eval { checkpoint, manifest, label_kind, out_dir, batch_size } => {
            cmd_eval(EvalOpts { checkpoint, manifest, label_kind, out_dir, batch_size })
        }
        Command::Ablate {
            axis,
            manifest,
            finetune_manifest,
            grid,
            seeds,
            folds,
            fold_subset,
            channels,
            out_dir,
            config,
        } => cmd_ablate(AblateOpts {
            axis,
            manifest,
            finetune_manifest,
            grid,
            seeds,
            folds,
            fold_subset,
            channels,
            out_dir,
            config,
        }),
        Command::Report { fixture, predictions, out_dir } => {
            cmd_report(ReportOpts { fixture, predictions, out_dir })
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

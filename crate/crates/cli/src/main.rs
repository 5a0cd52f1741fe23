mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use semprompt::data::{DatasetFormat, MaskMode};
use semprompt::{Error, Precision};

use commands::{EvalArgs, MaskArgs, PolicyChoice};

/// Multi-label recognition with partial labels.
///
/// Exit codes: 0 success, 1 other failure, 2 bad arguments or config,
/// 3 I/O or unreadable input, 4 non-finite loss, 5 category mismatch.
#[derive(Parser)]
#[command(name = "semprompt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum FormatArg {
    #[value(alias = "coco-json")]
    CocoJson,
    #[value(alias = "voc-xml")]
    VocXml,
    #[value(alias = "synthetic-manifest")]
    SyntheticManifest,
}

impl From<FormatArg> for DatasetFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::CocoJson => DatasetFormat::CocoJson,
            FormatArg::VocXml => DatasetFormat::VocXml,
            FormatArg::SyntheticManifest => DatasetFormat::SyntheticManifest,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    #[value(alias = "per-image")]
    PerImage,
    Global,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PolicyArg {
    #[value(alias = "top-k")]
    TopK,
    Threshold,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Drop labels from a fully annotated dataset and write the mask manifest.
    Mask {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        format: FormatArg,
        /// Fraction of labels kept, in (0, 1].
        #[arg(long)]
        proportion: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "per_image")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train prompts and decoupling parameters from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
    },
    /// Score a fully annotated dataset and write metrics CSV and JSON.
    Eval {
        #[arg(long, conflicts_with = "scores_file")]
        checkpoint: Option<PathBuf>,
        /// JSON `{"categories": [...], "scores": [[...], ...]}` instead of a checkpoint.
        #[arg(long)]
        scores_file: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        format: FormatArg,
        #[arg(long, value_enum, default_value = "top_k")]
        policy: PolicyArg,
        #[arg(long, default_value_t = 3)]
        topk: usize,
        /// Threshold for the threshold policy; defaults to 1/C.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export attention heat maps of the top-k categories of one image.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 3)]
        topk: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate metrics.json files under a directory into a proportion table.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::InvalidLabels(_)
        | Error::Shape(_)
        | Error::Resolution { .. } => 2,
        Error::Io { .. }
        | Error::Image(_)
        | Error::Json(_)
        | Error::Annotation { .. }
        | Error::Checkpoint(_)
        | Error::WeightsUnavailable(_) => 3,
        Error::NonFiniteLoss { .. } => 4,
        Error::CategoryMismatch(_) => 5,
        _ => 1,
    }
}

fn run(cli: Cli) -> semprompt::Result<()> {
    match cli.command {
        Command::Mask {
            dataset,
            format,
            proportion,
            seed,
            mode,
            out,
        } => commands::mask(&MaskArgs {
            dataset,
            format: format.into(),
            proportion,
            seed,
            mode: match mode {
                ModeArg::PerImage => MaskMode::PerImage,
                ModeArg::Global => MaskMode::Global,
            },
            out,
        }),
        Command::Train { config, out, precision } => commands::train(
            &config,
            &out,
            match precision {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            },
        ),
        Command::Eval {
            checkpoint,
            scores_file,
            dataset,
            format,
            policy,
            topk,
            threshold,
            out,
        } => commands::eval(&EvalArgs {
            checkpoint,
            scores_file,
            dataset,
            format: format.into(),
            policy: match policy {
                PolicyArg::TopK => PolicyChoice::TopK,
                PolicyArg::Threshold => PolicyChoice::Threshold,
                PolicyArg::All => PolicyChoice::All,
            },
            topk,
            threshold,
            out,
        }),
        Command::Cam {
            checkpoint,
            image,
            topk,
            out,
        } => commands::cam(&checkpoint, &image, topk, &out).map(|_| ()),
        Command::Report { runs, out } => commands::report(&runs, out.as_deref()).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

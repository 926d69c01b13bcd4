mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Vehicle class and orientation detection pipeline.
///
/// Exit codes: 0 ok, 2 configuration or validation error, 3 I/O error,
/// 4 backend or protocol failure.
#[derive(Parser)]
#[command(name = "vodpipe", version)]
struct Cli {
    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the training meta-table from labelled frames.
    BuildTable(BuildTableArgs),
    /// Style-translate the crops of a training table.
    Translate(TranslateArgs),
    /// Detect, crop, classify and emit final detections.
    Infer(InferArgs),
    /// Score detections with the weighted mAP.
    Evaluate(EvaluateArgs),
    /// Per-class annotation counts.
    Stats(StatsArgs),
    /// Check an external backend against the subprocess protocol.
    Conformance(ConformanceArgs),
    /// Serve an in-process mock over stdin/stdout.
    #[command(hide = true)]
    ServeMock(ServeMockArgs),
}

#[derive(Args, Serialize)]
pub struct BuildTableArgs {
    /// Frame manifest CSV (image_id,path,width,height,split).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of <image_id>.txt label files.
    #[arg(long)]
    pub labels: PathBuf,
    /// Class map (`<index> <class_name>` per line); required when labels
    /// use class names.
    #[arg(long)]
    pub class_map: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct TranslateArgs {
    /// Training table (JSONL) with synthetic rows only.
    #[arg(long)]
    pub table: PathBuf,
    /// Translator backend descriptor.
    #[arg(long)]
    pub backend: PathBuf,
    /// Also write the synthetic and translated rows as one merged table.
    #[arg(long)]
    pub merge: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Car-group detector descriptor.
    #[arg(long)]
    pub det_car: PathBuf,
    /// Motorbike-group detector descriptor.
    #[arg(long)]
    pub det_moto: PathBuf,
    /// Classifier descriptors, one per ensemble member.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub classifiers: Vec<PathBuf>,
    /// Pipeline config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct EvaluateArgs {
    /// Detections JSONL.
    #[arg(long)]
    pub detections: PathBuf,
    /// Directory of ground-truth label files.
    #[arg(long)]
    pub gt_labels: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub eval_config: Option<PathBuf>,
    #[arg(long)]
    pub class_map: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub class_map: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct ConformanceArgs {
    /// Descriptor of a subprocess_stream backend.
    #[arg(long)]
    pub backend: PathBuf,
    /// Receives test images, the report and the run manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct ServeMockArgs {
    #[arg(long)]
    pub backend: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(error::EXIT_CONFIG);
        }
    }
    let result = match cli.command {
        Command::BuildTable(a) => commands::build_table(&a),
        Command::Translate(a) => commands::translate(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::Conformance(a) => commands::conformance(&a),
        Command::ServeMock(a) => commands::serve_mock(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

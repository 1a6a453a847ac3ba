mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use attnsync::pipeline::Error;
use clap::{Args, Parser, Subcommand};

use config::{parse_split, Arch, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "attnsync", version, about = "Gaze synchrony targets and single-subject attention models")]
pub struct Cli {
    /// TOML run configuration; flags given on the command line win over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads. `--threads 1` is the guaranteed deterministic mode.
    #[arg(long, global = true, env = "ATTN_THREADS")]
    pub threads: Option<usize>,
    /// Seed for splitting, initialization, shuffling, and synthesis.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct WindowArgs {
    /// Window length in seconds.
    #[arg(long)]
    pub window: Option<f64>,
    /// Window step in seconds.
    #[arg(long)]
    pub step: Option<f64>,
    /// Longest tracking gap (s) bridged by interpolation.
    #[arg(long)]
    pub max_gap: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct ReportArgs {
    /// Clip model outputs to [0, 1] before scoring.
    #[arg(long)]
    pub clamp01: bool,
    /// Also write plot-ready CSVs under `<output>/plots`.
    #[arg(long)]
    pub emit_plots: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check frame-stream files and print one report per file.
    Validate {
        files: Vec<PathBuf>,
        /// Write reports.json and run.json here instead of printing.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Fill gaps and map every frame into canonical face space.
    Align {
        files: Vec<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Time-resolved ISC traces, one CSV per video.
    Isc {
        #[arg(short, long)]
        input: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Labelled windows split by subject, saved as float32 blocks.
    BuildDataset {
        #[arg(short, long)]
        input: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// `train,val,test` subject counts or `time:<fraction>`.
        #[arg(long, value_parser = parse_split)]
        split: Option<attnsync::dataset::SplitMode>,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Train a model on a saved dataset; writes model.bin.
    Train {
        #[arg(short, long)]
        dataset: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Predictions for a dataset split or for raw streams.
    Predict {
        #[arg(short, long)]
        model: PathBuf,
        /// Dataset directory (labelled windows).
        #[arg(long, conflicts_with = "input")]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split_name: String,
        /// Directory of frame streams (unlabelled windows).
        #[arg(short, long)]
        input: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        clamp01: bool,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Per-subject MAE and R² against the naive-mean baseline.
    Evaluate {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split_name: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Feature-group suppression study.
    Suppress {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split_name: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        emit_plots: bool,
    },
    /// Generate a synthetic cohort of frame streams with ground truth.
    Synth {
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        videos: Option<usize>,
        /// Seconds per recording.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        coupling: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        /// Comma-separated groups that depend on attention.
        #[arg(long, value_delimiter = ',')]
        informative: Option<Vec<String>>,
    },
    /// Streams to traces, dataset, model, evaluation, and suppression.
    Pipeline {
        #[arg(short, long)]
        input: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<attnsync::dataset::SplitMode>,
        #[command(flatten)]
        window: WindowArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn error_line(code: &str, message: &str) -> String {
    serde_json::json!({ "error": { "code": code, "message": message } }).to_string()
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.synth.seed = cfg.seed;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_line("cli.Usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", error_line("cli.BadConfig", &e.to_string()));
            return ExitCode::from(2);
        }
    }
    match load_config(&cli).and_then(|cfg| commands::run(cli.command, cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e.code(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}

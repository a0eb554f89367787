//! `mff`: synthesize data, precompute flow, train, evaluate and inspect
//! motion-fused-frame models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mff_core::trainer::EvalProtocol;

#[derive(Parser, Debug)]
#[command(name = "mff", version, about = "Motion fused frames for video classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the `[train]` section.
#[derive(Args, Debug, Default, Clone)]
pub struct TrainOverrides {
    /// Master seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Number of training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mini-batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a moving-glyphs dataset and its manifest.
    Synth {
        /// Run config; only `[dataset.glyph]` is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Precompute quantized flow for every consecutive frame pair.
    Flow {
        #[arg(long)]
        manifest: PathBuf,
        /// TOML file with flow parameters (keys of the `[flow]` section).
        #[arg(long)]
        params: Option<PathBuf>,
        /// Run config whose `[flow]` section is used when `--params` is absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cache root (default: `flow_cache/` next to the manifest).
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Export the MFFs of one video as per-channel PNGs.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        video_id: String,
        /// Segments.
        #[arg(long = "N", default_value_t = 8)]
        segments: usize,
        /// Flow pairs per MFF.
        #[arg(long = "n", default_value_t = 3)]
        flow_frames: usize,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and `history.csv`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and history.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Export epoch-0 augmented samples into this directory.
        #[arg(long)]
        save_augmented: Option<PathBuf>,
        /// Number of training videos exported by `--save-augmented`.
        #[arg(long, default_value_t = 8)]
        save_count: usize,
    },
    /// Evaluate a checkpoint and print metrics JSON.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `center` or `five_crop` (default: the config's `[eval]` protocol).
        #[arg(long)]
        protocol: Option<EvalProtocol>,
        /// Also write the metrics JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Train one model per (N, n) grid point and tabulate val accuracy.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Grid such as "N=1,8;n=0,1,2,3"; groups may be joined with '|'.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Contact sheet: one row per segment, the RGB frame then its flow panels.
    Viz {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        video_id: String,
        #[arg(long = "N", default_value_t = 8)]
        segments: usize,
        #[arg(long = "n", default_value_t = 3)]
        flow_frames: usize,
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: config: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {message}", e.kind().code());
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}

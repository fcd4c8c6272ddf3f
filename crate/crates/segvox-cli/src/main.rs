mod cmd;
mod config;
mod errors;
mod util;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use config::PipelineConfig;
use errors::{AppError, EXIT_USAGE};

#[derive(Parser)]
#[command(
    name = "segvox",
    about = "Segment long-form speech into utterance-sized pieces",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Configuration file (key = value with [section] headers)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Cut training examples out of a manifest + audio directory
    Extract {
        #[command(flatten)]
        config: ConfigArg,
        /// JSONL manifest of reference segments
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding the referenced audio files
        #[arg(long)]
        audio_dir: PathBuf,
        /// Output directory for the example archive
        #[arg(long)]
        out: PathBuf,
        /// Skip pair examples longer than this many seconds
        #[arg(long, default_value_t = 60.0)]
        max_example_s: f64,
    },
    /// Train the segmenter on an extracted example archive
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Example archive directory produced by `extract`
        #[arg(long)]
        examples: PathBuf,
        /// Where to write the trained checkpoint
        #[arg(long)]
        checkpoint_out: PathBuf,
        /// Per-epoch JSONL loss log (default: alongside the checkpoint)
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Use the small test-scale model configuration
        #[arg(long)]
        desk_scale: bool,
    },
    /// Segment audio files into utterances
    Segment {
        #[command(flatten)]
        config: ConfigArg,
        /// Audio files to segment, in output order
        #[arg(required = true)]
        audio: Vec<PathBuf>,
        /// model | hybrid | vad | fixed:<seconds>
        #[arg(long, default_value = "model")]
        mode: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// External VAD trace file (overrides the internal VAD)
        #[arg(long)]
        vad_trace: Option<PathBuf>,
        /// Output file (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
        /// jsonl | tsv
        #[arg(long, default_value = "jsonl")]
        format: String,
        /// Parallelism across input files
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Report per-file errors but keep going
        #[arg(long)]
        continue_on_error: bool,
        /// Inactive gaps shorter than this are absorbed in vad mode
        #[arg(long, default_value_t = 200)]
        min_gap_ms: u32,
    },
    /// Score hypothesis segments against a reference manifest
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        /// Hypothesis segments (JSONL with audio/start/end)
        #[arg(long)]
        hyp: PathBuf,
        /// Reference manifest (JSONL with audio/offset/duration)
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Boundary matching tolerance in seconds
        #[arg(long, default_value_t = 0.2)]
        tolerance: f64,
        /// Hypothesis text (whitespace tokens) to align
        #[arg(long, requires = "ref_text")]
        hyp_text: Option<PathBuf>,
        /// Reference sentences, one per line
        #[arg(long, requires = "hyp_text")]
        ref_text: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the energy VAD over audio and dump the frame trace
    Vad {
        #[command(flatten)]
        config: ConfigArg,
        audio: PathBuf,
        /// Trace output file (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write VAD-only segments here
        #[arg(long)]
        segments_out: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        min_gap_ms: u32,
    },
    /// Generate a synthetic tone corpus (WAV + manifest)
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Base name for the WAV/manifest pair
        #[arg(long, default_value = "synth")]
        id: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        n_utterances: usize,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
    },
}

fn load_config(arg: &ConfigArg) -> Result<PipelineConfig, AppError> {
    match &arg.config {
        Some(path) => PipelineConfig::load(path),
        None => Ok(PipelineConfig::default()),
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Extract {
            config,
            manifest,
            audio_dir,
            out,
            max_example_s,
        } => {
            let cfg = load_config(&config)?;
            cmd::extract::run(&cfg, &manifest, &audio_dir, &out, max_example_s)
        }
        Command::Train {
            config,
            examples,
            checkpoint_out,
            loss_log,
            seed,
            epochs,
            desk_scale,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cmd::train::run(&cfg, &examples, &checkpoint_out, loss_log.as_deref(), desk_scale)
        }
        Command::Segment {
            config,
            audio,
            mode,
            checkpoint,
            vad_trace,
            out,
            format,
            jobs,
            continue_on_error,
            min_gap_ms,
        } => {
            let cfg = load_config(&config)?;
            cmd::segment::run(cmd::segment::Request {
                cfg,
                audio,
                mode,
                checkpoint,
                vad_trace,
                out,
                format,
                jobs,
                continue_on_error,
                min_gap_ms,
            })
        }
        Command::Evaluate {
            config: _,
            hyp,
            reference,
            tolerance,
            hyp_text,
            ref_text,
            out,
        } => cmd::evaluate::run(
            &hyp,
            &reference,
            tolerance,
            hyp_text.as_deref(),
            ref_text.as_deref(),
            out.as_deref(),
        ),
        Command::Vad {
            config,
            audio,
            out,
            segments_out,
            min_gap_ms,
        } => {
            let cfg = load_config(&config)?;
            cmd::vad::run(&cfg, &audio, out.as_deref(), segments_out.as_deref(), min_gap_ms)
        }
        Command::Synth {
            config: _,
            out,
            id,
            seed,
            n_utterances,
            sample_rate,
        } => cmd::synth::run(&out, &id, seed, n_utterances, sample_rate),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("SEGVOX_LOG")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("segvox: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

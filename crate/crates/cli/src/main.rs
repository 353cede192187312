mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "mmvae", version, about = "Multi-track measure VAE toolkit")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct SamplingArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Softmax temperature; 0 decodes greedily.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a measure dataset from a directory of MIDI files.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Dataset file (JSON lines).
        #[arg(long, visible_alias = "out")]
        output: PathBuf,
        /// Statistics file; defaults to `<output stem>.stats.json` beside the dataset.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the inferred chord of every half measure of a MIDI file.
    Chords {
        #[arg(long)]
        input: PathBuf,
        /// Write a JSON array here instead of JSON lines to stdout.
        #[arg(long, visible_alias = "out")]
        output: Option<PathBuf>,
    },
    /// Train the model on a dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Total optimisation steps, counting any resumed ones (overrides train.max_steps).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode random codes from the prior.
    Sample {
        #[command(flatten)]
        common: SamplingArgs,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Two chords for the measure, e.g. "C,G".
        #[arg(long, default_value = "N.C.,N.C.")]
        chords: String,
    },
    /// Interpolate between the first measures of two MIDI files.
    Interp {
        #[command(flatten)]
        common: SamplingArgs,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Build an attribute vector from a dataset and apply it to a measure.
    Attr {
        #[command(flatten)]
        common: SamplingArgs,
        /// pitch_range, track_count, strings_only or note_density
        #[arg(long)]
        vector: String,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dataset index of the measure to transform.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Decode one latent code over a chord progression.
    Progression {
        #[command(flatten)]
        common: SamplingArgs,
        /// Comma-separated chords, two per measure.
        #[arg(long)]
        chords: String,
        /// JSON array with the latent code; sampled from the prior if absent.
        #[arg(long)]
        z: Option<PathBuf>,
    },
    /// Draw a pianoroll of a MIDI file or dataset.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        strip_drums: bool,
        #[arg(long)]
        strip_octaves: bool,
        #[arg(long, default_value = "svg")]
        format: String,
    },
    /// Summarise a dataset file.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest {
            input,
            output,
            stats,
            seed,
        } => commands::ingest(cfg, &input, &output, stats.as_deref(), seed),
        Command::Chords { input, output } => commands::chords(&cfg, &input, output.as_deref()),
        Command::Train {
            data,
            out,
            seed,
            steps,
            resume,
        } => commands::train(cfg, data, out, seed, steps, resume),
        Command::Sample { common, count, chords } => commands::sample(cfg, &common, count, &chords),
        Command::Interp { common, a, b, steps } => commands::interp(cfg, &common, &a, &b, steps),
        Command::Attr {
            common,
            vector,
            scale,
            data,
            index,
        } => commands::attr(cfg, &common, &vector, scale, data, index),
        Command::Progression { common, chords, z } => commands::progression(cfg, &common, &chords, z),
        Command::Render {
            input,
            out,
            strip_drums,
            strip_octaves,
            format,
        } => commands::render(&input, &out, strip_drums, strip_octaves, &format),
        Command::Stats { data } => commands::stats(&data),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

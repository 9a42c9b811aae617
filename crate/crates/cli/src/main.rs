use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hsics_core::commands;
use hsics_core::config::{parse_overrides, RunConfig};
use hsics_core::evaluate::Scenario;
use hsics_core::train::CHECKPOINT_FILE;
use hsics_core::Error;

#[derive(Parser)]
#[command(name = "hsics", version, about = "Stripe-wise hyperspectral compressed sensing")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named default set: desk or full.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Seed for the command's own randomness (data, training or evaluation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration override, e.g. --set loss.alpha=0. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with a manifest.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train encoder and decoder.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue a run from its checkpoint.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Start from another run's weights with fresh optimizer state.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Accept a checkpoint whose configuration hash differs.
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Compress cubes into bitstreams.
    Encode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use the int8 encoder and int8 measurements.
        #[arg(long)]
        int8: bool,
        #[arg(required = true)]
        cubes: Vec<PathBuf>,
    },
    /// Reconstruct cubes from bitstreams.
    Decode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        streams: Vec<PathBuf>,
    },
    /// Score the test split under a degradation scenario.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// clean | mask:{PM,BM,CM}:LO-HI | noise:SNR | int8:{pq,qat}
        #[arg(long, default_value = "clean")]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Post-training int8 quantization of the encoder.
    Quantize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(common: &Common, seed_key: Option<&str>) -> Result<RunConfig, Error> {
    let mut ov = Vec::new();
    if let Some(p) = &common.profile {
        ov.push(("profile".to_string(), p.clone()));
    }
    ov.extend(parse_overrides(&common.overrides)?);
    if let (Some(seed), Some(key)) = (common.seed, seed_key) {
        ov.push((key.to_string(), seed.to_string()));
    }
    RunConfig::load(common.config.as_deref(), &ov)
}

fn checkpoint_or_default(cfg: &RunConfig, p: Option<PathBuf>) -> PathBuf {
    p.unwrap_or_else(|| PathBuf::from(&cfg.train.out).join(CHECKPOINT_FILE))
}

fn run(cli: Cli) -> Result<String, Error> {
    let c = &cli.common;
    match cli.cmd {
        Cmd::Synth { out, overwrite } => {
            let cfg = resolve(c, Some("data.seed"))?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.data.dir));
            commands::synth(&cfg, &out, overwrite)
        }
        Cmd::Train { data, out, resume, init, allow_config_mismatch } => {
            let cfg = resolve(c, Some("train.seed"))?;
            let data = data.unwrap_or_else(|| PathBuf::from(&cfg.data.dir));
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.train.out));
            commands::train_cmd(&cfg, &data, &out, resume.as_deref(), init.as_deref(), allow_config_mismatch)
        }
        Cmd::Encode { checkpoint, out, int8, cubes } => {
            let cfg = resolve(c, None)?;
            let model = commands::load_model(&cfg, &checkpoint_or_default(&cfg, checkpoint), false)?;
            commands::encode_cmd(&cfg, &model, &cubes, &out, int8)
        }
        Cmd::Decode { checkpoint, out, streams } => {
            let cfg = resolve(c, None)?;
            let model = commands::load_model(&cfg, &checkpoint_or_default(&cfg, checkpoint), false)?;
            commands::decode_cmd(&cfg, &model, &streams, &out)
        }
        Cmd::Evaluate { checkpoint, data, scenario, out } => {
            let cfg = resolve(c, Some("eval.seed"))?;
            let scenario: Scenario = scenario.parse()?;
            let model = commands::load_model(&cfg, &checkpoint_or_default(&cfg, checkpoint), false)?;
            let data = data.unwrap_or_else(|| PathBuf::from(&cfg.data.dir));
            commands::evaluate_cmd(&cfg, &model, &data, &scenario, &out)
        }
        Cmd::Quantize { checkpoint, out } => {
            let cfg = resolve(c, None)?;
            commands::quantize_cmd(&checkpoint_or_default(&cfg, checkpoint), &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            print!("{summary}");
            if !summary.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hsics: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

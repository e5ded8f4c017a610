use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use worldsplat::pipeline::commands::{self, Mode};
use worldsplat::pipeline::config::PipelineConfig;
use worldsplat::pipeline::selftest::run_selftest;
use worldsplat::pipeline::PipelineError;

/// Thread count for the rayon pool; unset means one per core.
const THREADS_ENV: &str = "WORLDSPLAT_THREADS";

#[derive(Parser)]
#[command(name = "worldsplat", version, about = "Desk-scale 4D driving-scene synthesis")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the effective config and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic scenes to `data.scenes`.
    GenSynth,
    /// Train the latent flow model.
    TrainFlow,
    /// Train the Gaussian decoder.
    TrainDecoder,
    /// Train the render refiner.
    TrainRefiner,
    /// Sample latents, decode and render shifted tracks.
    Infer,
    /// As `infer` with the clean scene latent in place of sampling.
    Reconstruct,
    /// Render clean-latent decodes along the recorded and shifted tracks.
    Render {
        /// Lateral offsets in meters; replaces `infer.dy`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        dy: Vec<f64>,
    },
    /// Compare two directories of frames.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Oracle-equivalence and gradient checks.
    Selftest,
}

fn load_config(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|_| PipelineError::Missing {
                what: "config file",
                path: path.clone(),
            })?;
            PipelineConfig::parse(&text)?
        }
        None => PipelineConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

enum Failure {
    /// Bad flags or config values; exit 2.
    Usage(PipelineError),
    Runtime(PipelineError),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: PipelineError) -> Failure {
    match e {
        PipelineError::Missing { .. } => Failure::Runtime(e),
        _ => Failure::Usage(e),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli.common).map_err(usage)?;
    if cli.common.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let Some(cmd) = cli.cmd else {
        Cli::command()
            .error(ErrorKind::MissingSubcommand, "a subcommand is required unless --print-config is given")
            .exit();
    };
    let lines = match cmd {
        Cmd::GenSynth => commands::gen_synth(&cfg)?,
        Cmd::TrainFlow => commands::train_flow(&cfg)?,
        Cmd::TrainDecoder => commands::train_decoder_cmd(&cfg)?,
        Cmd::TrainRefiner => commands::train_refiner_cmd(&cfg)?,
        Cmd::Infer => commands::run_inference(&cfg, Mode::Generate)?.0,
        Cmd::Reconstruct => commands::run_inference(&cfg, Mode::Reconstruct)?.0,
        Cmd::Render { dy } => {
            if !dy.is_empty() {
                cfg.infer.dy = dy;
                cfg.validate().map_err(usage)?;
            }
            commands::render_cmd(&cfg)?
        }
        Cmd::Metrics { pred, truth } => commands::metrics_cmd(&cfg, &pred, &truth)?,
        Cmd::Selftest => {
            let checks = run_selftest();
            for c in &checks {
                println!("{}", c.line());
            }
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
            if !failed.is_empty() {
                return Err(PipelineError::Selftest(failed.join(", ")).into());
            }
            Vec::new()
        }
    };
    for l in lines {
        println!("{l}");
    }
    Ok(())
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error[usage]: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(1)
        }
    }
}

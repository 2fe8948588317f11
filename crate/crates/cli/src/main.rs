use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rellie_cli::commands::{self, EnhanceArgs, RefineArgs, TrainArgs, TrainMode};
use rellie_cli::service::{self, ServiceConfig};
use rellie_core::refine::DEFAULT_STRENGTH;
use rellie_core::reward::LossWeights;

/// Low-light image enhancement with a pixel-wise reinforcement learning agent.
#[derive(Parser)]
#[command(name = "rellie", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write a checkpoint.
    Train(TrainCmd),
    /// Enhance one image with a trained agent.
    Enhance(EnhanceCmd),
    /// Score enhancement against reference images (PSNR, SSIM as CSV).
    Eval(EvalCmd),
    /// Print the loss breakdown of an enhanced image against its input as JSON.
    Losses(LossesCmd),
    /// Print the range reachable from each input level after N steps as CSV.
    Envelope(EnvelopeCmd),
    /// Run the interactive session service.
    Serve(ServeCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Unsupervised,
    ZeroShot,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Directory of images (unsupervised) or a single image.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    /// Steps per episode.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    lr: Option<f32>,
    /// Loss weights as `spa,exp,tva,crl`.
    #[arg(long)]
    weights: Option<LossWeights>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration CSV log; printed to stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeOpts {
    #[arg(long, default_value_t = 6)]
    steps: usize,
    /// Sample actions with this seed instead of taking the most likely ones.
    #[arg(long)]
    seed: Option<u64>,
    /// Refine after every step.
    #[arg(long)]
    rf: bool,
    /// Refine after every k-th step (implies --rf).
    #[arg(long, value_name = "K")]
    rf_every: Option<usize>,
    /// Strength of the built-in denoiser.
    #[arg(long, default_value_t = DEFAULT_STRENGTH)]
    rf_strength: f32,
    /// Measure the noise map against the previous state instead of the input.
    #[arg(long)]
    rf_per_step: bool,
    /// External denoiser command; must mention {in}, {map} and {out}.
    #[arg(long, value_name = "CMD")]
    denoiser: Option<String>,
}

impl DecodeOpts {
    fn args(&self) -> EnhanceArgs {
        let refine = (self.rf || self.rf_every.is_some()).then(|| RefineArgs {
            every: self.rf_every.unwrap_or(1),
            strength: self.rf_strength,
            denoiser: self.denoiser.clone(),
            per_step_map: self.rf_per_step,
        });
        EnhanceArgs {
            steps: self.steps,
            seed: self.seed,
            refine,
        }
    }
}

#[derive(Args)]
struct EnhanceCmd {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    decode: DecodeOpts,
}

#[derive(Args)]
struct EvalCmd {
    /// Directory of low-light images and directory of same-named references.
    #[arg(long, num_args = 2, value_names = ["LOW_DIR", "HIGH_DIR"])]
    pairs: Vec<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    decode: DecodeOpts,
}

#[derive(Args)]
struct LossesCmd {
    /// The enhanced image.
    #[arg(long = "in")]
    input: PathBuf,
    /// The image it was enhanced from.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value = "1,100,200,20")]
    weights: LossWeights,
}

#[derive(Args)]
struct EnvelopeCmd {
    /// Step counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
    steps: Vec<usize>,
    #[arg(long, default_value_t = 0.8)]
    skip: f32,
}

#[derive(Args)]
struct ServeCmd {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Directory holding `<id>.ckpt` checkpoints.
    #[arg(long, default_value = ".")]
    checkpoints: PathBuf,
    /// Minutes of inactivity before a session is dropped.
    #[arg(long, default_value_t = 30)]
    idle_minutes: u64,
    /// Keep session states on disk under this directory.
    #[arg(long)]
    spill_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_STRENGTH)]
    rf_strength: f32,
    /// External denoiser command; must mention {in}, {map} and {out}.
    #[arg(long, value_name = "CMD")]
    denoiser: Option<String>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let stdout = &mut std::io::stdout().lock();
    match Cli::parse().command {
        Command::Train(c) => {
            let args = TrainArgs {
                mode: match c.mode {
                    Mode::Unsupervised => TrainMode::Unsupervised,
                    Mode::ZeroShot => TrainMode::ZeroShot,
                },
                data: c.data,
                out: c.out,
                iterations: c.iters,
                steps: c.steps,
                gamma: c.gamma,
                lr: c.lr,
                weights: c.weights,
                seed: c.seed,
                workers: c.workers,
                log: c.log,
            };
            commands::train(&args, stdout)?;
        }
        Command::Enhance(c) => {
            commands::enhance(&c.input, &c.out, &c.ckpt, &c.decode.args())?;
        }
        Command::Eval(c) => {
            commands::eval(&c.pairs[0], &c.pairs[1], &c.ckpt, &c.decode.args(), stdout)?;
        }
        Command::Losses(c) => {
            let b = commands::losses(&c.input, &c.reference, &c.weights)?;
            println!("{}", serde_json::to_string_pretty(&b)?);
        }
        Command::Envelope(c) => print!("{}", commands::envelope(&c.steps, c.skip)?),
        Command::Serve(c) => {
            let refinement = RefineArgs {
                strength: c.rf_strength,
                denoiser: c.denoiser,
                ..RefineArgs::default()
            }
            .refinement()?;
            let cfg = ServiceConfig {
                checkpoint_dir: c.checkpoints,
                idle_timeout: Duration::from_secs(c.idle_minutes * 60),
                spill_dir: c.spill_dir,
                refinement,
            };
            let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
            runtime.block_on(service::serve(cfg, SocketAddr::new(c.host, c.port)))?;
        }
    }
    Ok(())
}

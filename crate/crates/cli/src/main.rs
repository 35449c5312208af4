//! `far`: data generation, training, rollout, benchmarking, serving and evaluation.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 for runtime failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "far",
    version,
    about = "Autoregressive multi-view driving world model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural multi-view driving dataset.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Roll a checkpoint out over the controls of one scene.
    Rollout(RolloutArgs),
    /// Time per-frame generation over a grid of sampler settings.
    Bench(BenchArgs),
    /// Serve closed-loop stepping sessions over TCP.
    Serve(ServeArgs),
    /// Score rollouts against reference scenes at several lengths.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    scenes: usize,
    #[arg(long)]
    frames: usize,
    #[arg(long, default_value_t = 3)]
    views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Codec patch size.
    #[arg(long, default_value_t = 4)]
    patch: usize,
    #[arg(long, default_value_t = 4)]
    agents: usize,
    /// Straight roads only.
    #[arg(long)]
    straight: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = ["arhc", "blendforce"])]
    stage: String,
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from; required for blendforce.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Config override `KEY=VALUE`; may repeat and wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Loss log path; defaults to the checkpoint path with a `.loss.csv` suffix.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Scene file inside a dataset directory; frame 0 starts the rollout.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    len: usize,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    kv_cache: Switch,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    cond_cache: Switch,
    #[arg(long, default_value_t = 1.0)]
    cfg: f32,
    #[arg(long, default_value_t = 8)]
    ref_window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Grid CSV `steps,kv_cache,cfg_scale,cond_cache`; the default grid when absent.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Scene file driving the benchmark; a generated scene when absent.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Ground-truth frames pushed as history before timing.
    #[arg(long, default_value_t = 8)]
    history: usize,
    /// Timed frames per grid row.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Listen address; falls back to FAR_ADDR.
    #[arg(long)]
    addr: Option<String>,
    /// Largest accepted request line in bytes.
    #[arg(long, default_value_t = far_sim::DEFAULT_MAX_LINE)]
    max_line: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Rollout output directory.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory holding the same scene files.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    lengths: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Feature extractor seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Label written to the checkpoint column.
    #[arg(long, default_value = "")]
    label: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use idql::experiment::{run, ExperimentConfig, ExperimentError, ExperimentKind, RunOutput};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Reproducible IDQL experiments. Each run writes `<out>/<kind>-<hash12>/`
/// with its config, outputs and a content-hashed manifest.
#[derive(Parser)]
#[command(name = "idql", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact implicit-policy values on the {1,5,10} bandit for every loss family.
    BanditSweep(RunArgs),
    /// Train a diffusion behavior model on a 2D toy dataset.
    DdpmTrain(RunArgs),
    /// Draw samples from a trained behavior checkpoint.
    DdpmSample(RunArgs),
    /// Train critic and behavior model offline, then evaluate.
    TrainOffline(RunArgs),
    /// Evaluate saved critic and behavior checkpoints.
    Evaluate(RunArgs),
    /// Online finetuning from an offline pretrain.
    Finetune(RunArgs),
    /// Fixed-point and gradient audits.
    Audit(RunArgs),
    /// Resampled diffusion vs Gaussian AWR on the three-mode 2D bandit.
    Figure1(RunArgs),
    /// V* and implicit-actor reward across loss parameters.
    Figure2(RunArgs),
    /// LN-ResNet vs MLP score networks on eight Gaussians.
    Figure4(RunArgs),
}

impl Command {
    fn split(self) -> (ExperimentKind, RunArgs) {
        use ExperimentKind as K;
        match self {
            Command::BanditSweep(a) => (K::BanditSweep, a),
            Command::DdpmTrain(a) => (K::DdpmTrain, a),
            Command::DdpmSample(a) => (K::DdpmSample, a),
            Command::TrainOffline(a) => (K::TrainOffline, a),
            Command::Evaluate(a) => (K::Evaluate, a),
            Command::Finetune(a) => (K::Finetune, a),
            Command::Audit(a) => (K::Audit, a),
            Command::Figure1(a) => (K::Figure1, a),
            Command::Figure2(a) => (K::Figure2, a),
            Command::Figure4(a) => (K::Figure4, a),
        }
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML file overlaid on the preset for this subcommand.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Seed to run; repeat for several runs.
    #[arg(long)]
    seed: Vec<u64>,
    /// Override one config field, e.g. `--set critic_steps=500`.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output root. Defaults to $IDQL_OUT, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds to run concurrently, each in its own process.
    #[arg(short, long, default_value_t = 1)]
    jobs: usize,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

fn resolve(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::preset(kind);
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        config.overlay_toml(&text)?;
    }
    for kv in &args.sets {
        let Some((key, value)) = kv.split_once('=') else {
            bail!(ExperimentError::Parse(format!("--set expects KEY=VALUE, got `{kv}`")));
        };
        config.set(key.trim(), value.trim())?;
    }
    if config.kind != kind {
        bail!(ExperimentError::field("kind", format!("config says {}, subcommand is {}", config.kind.name(), kind.name())));
    }
    Ok(config)
}

fn out_root(args: &RunArgs) -> PathBuf {
    args.out
        .clone()
        .or_else(|| std::env::var_os("IDQL_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn report(out: &RunOutput) {
    let line = serde_json::json!({
        "status": "ok",
        "kind": out.manifest.kind,
        "seed": out.manifest.seed,
        "config_hash": out.manifest.config_hash,
        "dir": out.dir.display().to_string(),
        "files": out.manifest.files.len(),
    });
    println!("{line}");
}

/// Re-invokes this binary for one seed, forwarding the config arguments.
fn spawn_seed(kind: ExperimentKind, args: &RunArgs, root: &Path, seed: u64) -> Result<Child> {
    let exe = std::env::current_exe().context("locating the idql binary")?;
    let mut cmd = Process::new(exe);
    cmd.arg(kind.name()).arg("--seed").arg(seed.to_string()).arg("--out").arg(root);
    if let Some(c) = &args.config {
        cmd.arg("--config").arg(c);
    }
    for kv in &args.sets {
        cmd.arg("--set").arg(kv);
    }
    cmd.spawn().context("spawning a worker process")
}

fn execute(command: Command) -> Result<()> {
    let (kind, args) = command.split();
    let base = resolve(kind, &args)?;
    if args.print_config {
        print!("{}", base.to_toml());
        return Ok(());
    }
    let root = out_root(&args);
    let seeds = if args.seed.is_empty() { vec![base.seed] } else { args.seed.clone() };
    if args.jobs <= 1 || seeds.len() == 1 {
        for seed in seeds {
            let config = ExperimentConfig { seed, ..base.clone() };
            log::info!("{} seed {seed} -> {}", kind.name(), root.display());
            report(&run(&config, &root)?);
        }
        return Ok(());
    }
    let mut running: Vec<(u64, Child)> = Vec::new();
    let mut failed = Vec::new();
    let mut wait_one = |running: &mut Vec<(u64, Child)>| -> Result<()> {
        let (seed, mut child) = running.remove(0);
        if !child.wait().context("waiting for a worker")?.success() {
            failed.push(seed);
        }
        Ok(())
    };
    for seed in seeds {
        if running.len() >= args.jobs {
            wait_one(&mut running)?;
        }
        running.push((seed, spawn_seed(kind, &args, &root, seed)?));
    }
    while !running.is_empty() {
        wait_one(&mut running)?;
    }
    if !failed.is_empty() {
        bail!("worker runs failed for seeds {failed:?}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = match err.downcast_ref::<ExperimentError>() {
                Some(e @ (ExperimentError::Field { .. } | ExperimentError::Parse(_))) => (e.kind(), 2),
                Some(e) => (e.kind(), 1),
                None => ("runtime", 1),
            };
            let line = serde_json::json!({
                "status": "error",
                "kind": kind,
                "message": format!("{err:#}"),
            });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hilo::analysis::{self, FrequencyOptions};
use hilo::ars::seed_mix;
use hilo::checkpoint::{Checkpoint, CheckpointError};
use hilo::config::{ConfigError, RunConfig};
use hilo::policy::{run_episode, EpisodeOptions, HlMode, Policy, PolicyError};
use hilo::runner::{remote_worker_serve, RunnerError, ServeOptions};
use hilo::stats::mean_std;
use hilo::train::{Backend, TrainError, Trainer};
use hilo::world::{Environment, Task, TerminationReason};

#[derive(Debug, Parser)]
#[command(name = "hilo", version, about = "Train and analyse hierarchical visuomotor locomotion policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy from a TOML config, or resume from a checkpoint.
    Train(TrainArgs),
    /// Roll out a checkpoint and summarise its returns.
    Eval(EvalArgs),
    /// Train a new high level on top of a checkpoint's frozen low level.
    Transfer(TransferArgs),
    /// Latent sweeps and trajectory export.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Inference time, activation counts and training speed per high-level frequency.
    Bench(BenchArgs),
    /// Serve rollout jobs to a remote trainer.
    Worker(WorkerArgs),
}

#[derive(Debug, Args)]
struct RunnerArgs {
    /// In-process rollout threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Remote workers as comma-separated host:port list.
    #[arg(long, value_delimiter = ',')]
    endpoints: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration (TOML). `HILO_<SECTION>__<KEY>` variables override it.
    #[arg(long, required_unless_present = "checkpoint")]
    config: Option<PathBuf>,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides the config seed (fresh runs only).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints and `train_log.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the iteration budget.
    #[arg(long)]
    iterations: Option<u64>,
    #[command(flatten)]
    runner: RunnerArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate on this task instead of the one the checkpoint was trained on.
    #[arg(long)]
    task: Option<Task>,
    /// Write per-step trajectories of every episode to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TransferArgs {
    /// Source checkpoint providing the low level.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config of the new task.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    #[command(flatten)]
    runner: RunnerArgs,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Drive the low level with a grid of constant latent commands (2-d latents only).
    LatentSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Points per latent axis.
        #[arg(long, default_value_t = 21)]
        grid: usize,
        /// Seconds per cell.
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        /// CSV with one row per cell.
        #[arg(long)]
        out: PathBuf,
        /// Also write every cell's path as JSON lines.
        #[arg(long)]
        paths: Option<PathBuf>,
    },
    /// Record episodes and export them as a per-step CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Base config; defaults to a maze-traversal run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// High-level intervals, e.g. `1,50,150,300,var`.
    #[arg(long, value_delimiter = ',', default_value = "1,50,150,300,var")]
    modes: Vec<HlMode>,
    #[arg(long, default_value_t = 1)]
    train_iters: u64,
    #[arg(long, default_value_t = 3)]
    episodes: usize,
    /// Minimum timed control steps per mode.
    #[arg(long, default_value_t = 100_000)]
    min_steps: u64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Line-delimited JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WorkerArgs {
    /// Address to listen on.
    #[arg(long, default_value = "0.0.0.0:7070")]
    listen: String,
    /// Rollout threads advertised to trainers.
    #[arg(long)]
    workers: Option<usize>,
}

/// Failure classes with stable exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    Checkpoint(String),
    Transfer(String),
    Network(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Checkpoint(_) => 3,
            Failure::Transfer(_) => 4,
            Failure::Network(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m)
            | Failure::Checkpoint(m)
            | Failure::Transfer(m)
            | Failure::Network(m)
            | Failure::Other(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Checkpoint(e.to_string())
    }
}

impl From<RunnerError> for Failure {
    fn from(e: RunnerError) -> Self {
        match e {
            RunnerError::Network(_) | RunnerError::Io(_) | RunnerError::Protocol(_) => Failure::Network(e.to_string()),
            RunnerError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<PolicyError> for Failure {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Transfer(_) => Failure::Transfer(e.to_string()),
            PolicyError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => Failure::Config(m),
            TrainError::Policy(e) => e.into(),
            TrainError::Runner(e) => e.into(),
            TrainError::Checkpoint(e) => e.into(),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<analysis::AnalysisError> for Failure {
    fn from(e: analysis::AnalysisError) -> Self {
        match e {
            analysis::AnalysisError::Train(e) => e.into(),
            analysis::AnalysisError::Policy(e) => e.into(),
            other => Failure::Other(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Analyze { what } => cmd_analyze(what),
        Command::Bench(a) => cmd_bench(a),
        Command::Worker(a) => cmd_worker(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn apply_runner(config: &mut RunConfig, args: &RunnerArgs) -> Result<()> {
    if let Some(w) = args.workers {
        config.runner.workers = w;
    }
    if let Some(e) = &args.endpoints {
        config.runner.endpoints = e.clone();
    }
    config.validate()?;
    Ok(())
}

fn train_loop(mut trainer: Trainer) -> Result<()> {
    let out = trainer.config().output_dir.clone();
    let backend = Backend::from_config(trainer.config());
    log::info!(
        "training {} from iteration {} to {} into {}",
        trainer.config().task.name(),
        trainer.iteration(),
        trainer.config().iterations,
        out.display()
    );
    trainer.run(&backend, Some(&out))?;
    log::info!("done: {} iterations, {} episodes", trainer.iteration(), trainer.episodes());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let trainer = match &a.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if a.seed.is_some_and(|s| s != ckpt.config.seed) {
                return Err(Failure::Config("--seed cannot change the seed of a resumed run".into()));
            }
            let mut trainer = Trainer::resume(ckpt)?;
            let mut config = trainer.config().clone();
            overrides(&mut config, &a.runner, a.out.as_deref(), a.iterations)?;
            trainer = trainer.with_config(config)?;
            trainer
        }
        None => {
            let mut config = RunConfig::load(a.config.as_deref().expect("clap enforces --config"))?;
            if let Some(s) = a.seed {
                config.seed = s;
            }
            overrides(&mut config, &a.runner, a.out.as_deref(), a.iterations)?;
            Trainer::new(config)?
        }
    };
    train_loop(trainer)
}

fn overrides(config: &mut RunConfig, runner: &RunnerArgs, out: Option<&Path>, iterations: Option<u64>) -> Result<()> {
    if let Some(out) = out {
        config.output_dir = out.to_path_buf();
    }
    if let Some(n) = iterations {
        config.iterations = n;
    }
    apply_runner(config, runner)
}

fn cmd_transfer(a: TransferArgs) -> Result<()> {
    let source = Checkpoint::load(&a.checkpoint)?;
    let mut config = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    overrides(&mut config, &a.runner, a.out.as_deref(), a.iterations)?;
    let trainer = Trainer::transfer(config, &source.params)?;
    log::info!(
        "low level ({} parameters) transferred from {} and frozen",
        source.params.theta_ll.len(),
        a.checkpoint.display()
    );
    train_loop(trainer)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let task = a.task.unwrap_or(ckpt.config.task);
    if a.task.is_some_and(|t| t.task_input_dim() != ckpt.config.task.task_input_dim()) {
        return Err(Failure::Config(format!("task {} is incompatible with this policy's inputs", task.name())));
    }
    let policy = Policy::from_params(&ckpt.params)?;
    let opts = EpisodeOptions { record: a.out.is_some(), ..EpisodeOptions::default() };
    let mut returns = Vec::with_capacity(a.episodes);
    let mut reasons: BTreeMap<&str, usize> = TerminationReason::ALL.iter().map(|r| (r.name(), 0)).collect();
    let mut traces = Vec::new();
    let mut steps = 0u64;
    for e in 0..a.episodes {
        let mut env = Environment::reset(task, seed_mix(&[a.seed, e as u64]));
        let ep = run_episode(&policy, &mut env, opts)?;
        returns.push(ep.ret);
        steps += u64::from(ep.steps);
        *reasons.entry(ep.reason.name()).or_default() += 1;
        traces.extend(ep.trace);
    }
    let (mean, std) = if returns.is_empty() { (0.0, 0.0) } else { mean_std(&returns) };
    let summary = json!({
        "task": task.name(),
        "episodes": returns.len(),
        "mean_return": mean,
        "std_return": std,
        "mean_steps": if returns.is_empty() { 0.0 } else { steps as f64 / returns.len() as f64 },
        "termination": reasons,
        "returns": returns,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serialises"));
    if let Some(out) = &a.out {
        if !traces.is_empty() {
            analysis::export_trajectories(&traces, out)?;
        }
    }
    Ok(())
}

fn cmd_analyze(what: AnalyzeCommand) -> Result<()> {
    match what {
        AnalyzeCommand::LatentSweep { checkpoint, grid, duration, out, paths } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cells = analysis::latent_sweep(&ckpt.params, grid, duration)?;
            analysis::export_sweep(&cells, &out)?;
            if let Some(p) = paths {
                analysis::write_jsonl(&cells, &p)?;
            }
            let mut turns: BTreeMap<&str, usize> = BTreeMap::new();
            for c in &cells {
                *turns.entry(c.turn().name()).or_default() += 1;
            }
            let forward = cells.iter().filter(|c| c.forward_dominant()).count();
            println!("{}", json!({ "cells": cells.len(), "turns": turns, "forward_dominant": forward }));
        }
        AnalyzeCommand::Export { checkpoint, episodes, seed, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let policy = Policy::from_params(&ckpt.params)?;
            let opts = EpisodeOptions { record: true, ..EpisodeOptions::default() };
            let mut traces = Vec::with_capacity(episodes);
            for e in 0..episodes {
                let mut env = Environment::reset(ckpt.config.task, seed_mix(&[seed, e as u64]));
                traces.extend(run_episode(&policy, &mut env, opts)?.trace);
            }
            analysis::export_trajectories(&traces, &out)?;
        }
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(Task::MazeTraversal),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(w) = a.workers {
        config.runner.workers = w;
    }
    config.validate()?;
    let opts = FrequencyOptions { train_iters: a.train_iters, eval_episodes: a.episodes, min_timed_steps: a.min_steps };
    let reports = analysis::frequency_report(&config, &a.modes, &opts)?;
    for r in &reports {
        println!(
            "{:>9}  inference {:.3e} s/step  hl evals/episode {:7.2}  effective size {:8.1}  training {}",
            r.hl_mode.to_string(),
            r.mean_inference_time,
            r.hl_evals_per_episode,
            r.effective_policy_size,
            r.training_speed.map_or("-".into(), |s| format!("{s:.0} steps/s"))
        );
    }
    if let Some(out) = &a.out {
        analysis::write_jsonl(&reports, out)?;
    }
    Ok(())
}

fn cmd_worker(a: WorkerArgs) -> Result<()> {
    let listener =
        TcpListener::bind(&a.listen).map_err(|e| Failure::Network(format!("cannot listen on {}: {e}", a.listen)))?;
    let mut opts = ServeOptions::default();
    if let Some(w) = a.workers {
        opts.threads = w.max(1);
    }
    log::info!("serving rollouts on {} with {} thread(s)", a.listen, opts.threads);
    remote_worker_serve(listener, &opts)?;
    Ok(())
}

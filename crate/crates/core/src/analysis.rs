//! Post-hoc analysis: low-level latent sweeps, the high-level frequency
//! study and trajectory export.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ars::seed_mix;
use crate::config::RunConfig;
use crate::policy::{
    run_episode, EpisodeOptions, EpisodeTrace, HlMode, Policy, PolicyError, PolicyKind, PolicyParams, Scratch,
};
use crate::train::{Backend, TrainError, Trainer};
use crate::world::{Environment, Task, DT};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("latent sweep needs a 2-d latent space, policy has {0}")]
    LatentDim(usize),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Turning direction of a sweep cell: the heading change and the lateral
/// displacement must agree in sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    Left,
    Right,
    Straight,
}

impl Turn {
    /// Heading changes smaller than this (radians) count as straight.
    pub const MIN_YAW: f64 = 0.05;

    pub fn of(yaw_change: f64, lateral: f64) -> Self {
        if yaw_change >= Self::MIN_YAW && lateral > 0.0 {
            Turn::Left
        } else if yaw_change <= -Self::MIN_YAW && lateral < 0.0 {
            Turn::Right
        } else {
            Turn::Straight
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Turn::Left => "left",
            Turn::Right => "right",
            Turn::Straight => "straight",
        }
    }
}

/// Net displacements shorter than this (metres) are not forward-dominant.
pub const MIN_PROGRESS: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSweepCell {
    pub latent: [f32; 2],
    /// Net displacement in the start frame.
    pub summary: [f64; 2],
    /// Accumulated heading change, radians (positive is counter-clockwise).
    pub yaw_change: f64,
    /// Position after every step.
    pub path: Vec<[f64; 2]>,
}

impl LatentSweepCell {
    pub fn turn(&self) -> Turn {
        Turn::of(self.yaw_change, self.summary[1])
    }

    /// Moves mostly straight ahead: forward progress exceeds sideways drift.
    pub fn forward_dominant(&self) -> bool {
        self.summary[0] >= MIN_PROGRESS && self.summary[0] > self.summary[1].abs()
    }
}

pub fn grid_points(n: usize) -> Vec<f32> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| (-1.0 + 2.0 * i as f64 / (n - 1) as f64) as f32).collect(),
    }
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Drive the low level alone with a constant latent command on flat ground
/// from the standard start pose. Cells are ordered with the second latent
/// coordinate varying fastest.
pub fn latent_sweep(params: &PolicyParams, grid: usize, duration_s: f64) -> Result<Vec<LatentSweepCell>> {
    if params.arch.kind != PolicyKind::Hierarchical || params.arch.hl.latent_dim != 2 {
        return Err(AnalysisError::LatentDim(params.arch.hl.latent_dim));
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(AnalysisError::Input(format!("sweep duration must be positive, got {duration_s}")));
    }
    let policy = Policy::from_params(params)?;
    let steps = (duration_s / DT).round() as usize;
    let axis = grid_points(grid);
    let mut cells = Vec::with_capacity(axis.len() * axis.len());
    for &a in &axis {
        for &b in &axis {
            cells.push(sweep_cell(&policy, [a, b], steps)?);
        }
    }
    Ok(cells)
}

fn sweep_cell(policy: &Policy, latent: [f32; 2], steps: usize) -> Result<LatentSweepCell> {
    let mut env = Environment::reset(Task::Flat, 0);
    let start = env.state().position();
    let start_yaw = env.state().yaw;
    let mut scratch = Scratch::default();
    let mut path = Vec::with_capacity(steps);
    let mut yaw_change = 0.0;
    let mut yaw = start_yaw;
    for _ in 0..steps {
        if env.is_done() {
            break;
        }
        let (cmd, tg) = policy.low_level_act(&latent, env.state(), &mut scratch)?;
        env.step(&cmd, tg).map_err(PolicyError::from)?;
        let s = env.state();
        yaw_change += wrap(s.yaw - yaw);
        yaw = s.yaw;
        path.push([s.x, s.y]);
    }
    let end = path.last().copied().unwrap_or(start);
    let (dx, dy) = (end[0] - start[0], end[1] - start[1]);
    let (sin, cos) = start_yaw.sin_cos();
    let summary = [cos * dx + sin * dy, -sin * dx + cos * dy];
    Ok(LatentSweepCell { latent, summary, yaw_change, path })
}

pub fn export_sweep(cells: &[LatentSweepCell], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["l0", "l1", "dx", "dy", "yaw_change", "turn", "forward_dominant"])?;
    for c in cells {
        w.write_record([
            c.latent[0].to_string(),
            c.latent[1].to_string(),
            c.summary[0].to_string(),
            c.summary[1].to_string(),
            c.yaw_change.to_string(),
            c.turn().name().to_string(),
            u8::from(c.forward_dominant()).to_string(),
        ])?;
    }
    w.flush().map_err(|source| AnalysisError::Io { path: path.into(), source })
}

/// One row per step: `episode, step, x, y, yaw, reward, hl_active, d, latent_0..`.
pub fn export_trajectories(traces: &[EpisodeTrace], path: &Path) -> Result<()> {
    let Some(first) = traces.first() else {
        return Err(AnalysisError::Input("no traces to export".into()));
    };
    let k = first.steps.first().map_or(0, |s| s.latent.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> =
        ["episode", "step", "x", "y", "yaw", "reward", "hl_active", "d"].map(String::from).to_vec();
    header.extend((0..k).map(|i| format!("latent_{i}")));
    w.write_record(&header)?;
    for (e, trace) in traces.iter().enumerate() {
        for s in &trace.steps {
            if s.latent.len() != k {
                return Err(AnalysisError::Input("traces disagree on latent dimension".into()));
            }
            let mut row = vec![
                e.to_string(),
                s.step.to_string(),
                s.x.to_string(),
                s.y.to_string(),
                s.yaw.to_string(),
                s.reward.to_string(),
                u8::from(s.hl_active).to_string(),
                s.duration.to_string(),
            ];
            row.extend(s.latent.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|source| AnalysisError::Io { path: path.into(), source })
}

/// Write `rows` as line-delimited JSON.
pub fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let io = |source| AnalysisError::Io { path: path.into(), source };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in rows {
        serde_json::to_writer(&mut f, r).expect("row serialises");
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyOptions {
    /// Training iterations used to measure training throughput (0 skips it).
    pub train_iters: u64,
    /// Episodes counted for activation statistics (more run if timing needs them).
    pub eval_episodes: usize,
    pub min_timed_steps: u64,
}

impl Default for FrequencyOptions {
    fn default() -> Self {
        Self { train_iters: 1, eval_episodes: 3, min_timed_steps: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeActivations {
    pub steps: u32,
    pub hl_evals: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub hl_mode: HlMode,
    /// Mean policy inference time per control step, seconds.
    pub mean_inference_time: f64,
    pub timed_steps: u64,
    pub hl_evals_per_episode: f64,
    pub episodes: Vec<EpisodeActivations>,
    /// LL size plus HL size weighted by the fraction of steps that run the HL.
    pub effective_policy_size: f64,
    /// Environment steps per wall-clock second during training.
    pub training_speed: Option<f64>,
}

pub fn effective_policy_size(hl_params: usize, ll_params: usize, hl_evals: u64, steps: u64) -> f64 {
    ll_params as f64 + hl_params as f64 * hl_evals as f64 / steps.max(1) as f64
}

/// Time and count high-level activations for each mode, using fresh policies
/// built from `base` (its `hl_mode` is replaced per mode).
pub fn frequency_report(base: &RunConfig, modes: &[HlMode], opts: &FrequencyOptions) -> Result<Vec<FrequencyReport>> {
    if base.arch.kind != PolicyKind::Hierarchical {
        return Err(AnalysisError::Input("the frequency study needs a hierarchical policy".into()));
    }
    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut config = base.clone();
        config.arch.hl_mode = mode;
        let params = PolicyParams::init(config.policy_arch(), config.arch.init, config.seed)?;
        let policy = Policy::from_params(&params)?;
        let eval_opts = EpisodeOptions { time_inference: true, ..EpisodeOptions::default() };
        let (mut timed, mut evals, mut time) = (0u64, 0u64, Duration::ZERO);
        let mut episodes = Vec::new();
        let mut e = 0u64;
        while episodes.len() < opts.eval_episodes || timed < opts.min_timed_steps {
            let mut env = Environment::reset(config.task, seed_mix(&[config.seed, e]));
            let ep = run_episode(&policy, &mut env, eval_opts)?;
            timed += u64::from(ep.steps);
            evals += u64::from(ep.hl_evals);
            time += ep.inference_time;
            episodes.push(EpisodeActivations { steps: ep.steps, hl_evals: ep.hl_evals });
            e += 1;
        }
        let training_speed = if opts.train_iters > 0 {
            config.iterations = opts.train_iters;
            let mut trainer = Trainer::from_params(config.clone(), params.clone())?;
            let backend = Backend::Local { workers: config.runner.workers };
            let start = Instant::now();
            let records = trainer.run(&backend, None)?;
            let steps = records.last().map_or(0, |r| r.steps);
            Some(steps as f64 / start.elapsed().as_secs_f64())
        } else {
            None
        };
        reports.push(FrequencyReport {
            hl_mode: mode,
            mean_inference_time: time.as_secs_f64() / timed.max(1) as f64,
            timed_steps: timed,
            hl_evals_per_episode: episodes.iter().map(|a| f64::from(a.hl_evals)).sum::<f64>() / episodes.len() as f64,
            episodes,
            effective_policy_size: effective_policy_size(
                params.arch.hl_param_count(),
                params.arch.ll_param_count(),
                evals,
                timed,
            ),
            training_speed,
        });
    }
    Ok(reports)
}

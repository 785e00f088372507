//! Rollout evaluation: perturbation jobs fanned out over in-process threads
//! or remote workers, with per-episode seeds derived only from job identity.

pub mod protocol;
pub mod remote;

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{mpsc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ars::{candidate, direction_noise, seed_mix, Sign};
use crate::policy::{run_episode, EpisodeOptions, Policy, PolicyError, PolicyParams};
use crate::stats::{mean_std, RunningStats};
use crate::world::{Environment, Task};

pub use remote::{remote_dispatch, remote_worker_serve, DispatchOptions, ServeOptions};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("job {job_id} failed: {message}")]
    Job { job_id: u64, message: String },
    #[error("job {job_id} references unknown base parameters {base_id}")]
    UnknownBase { job_id: u64, base_id: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("network error: {0}")]
    Network(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RunnerError>;

/// How the noise direction of a job is regenerated on the worker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub seed: u64,
    pub iteration: u64,
    pub noise_std: f64,
}

/// Parameters broadcast once per iteration; jobs then only name a direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseParams {
    pub id: u64,
    /// Architecture, freeze flag, normaliser and (frozen) LL values.
    pub template: PolicyParams,
    pub theta: Vec<f64>,
    pub noise: NoiseSpec,
}

impl BaseParams {
    pub fn new(id: u64, template: PolicyParams, theta: Vec<f64>, noise: NoiseSpec) -> Result<Self> {
        if theta.len() != template.param_count() {
            return Err(RunnerError::Config(format!(
                "theta has {} values, architecture needs {}",
                theta.len(),
                template.param_count()
            )));
        }
        Ok(Self { id, template, theta, noise })
    }

    /// Base parameters that are only ever evaluated unperturbed.
    pub fn fixed(id: u64, params: PolicyParams) -> Self {
        let theta = params.flat_vector();
        Self { id, template: params, theta, noise: NoiseSpec { seed: 0, iteration: 0, noise_std: 0.0 } }
    }

    /// Concrete parameters for `direction` (or the base itself).
    pub fn materialize(&self, direction: Option<(usize, Sign)>) -> std::result::Result<PolicyParams, PolicyError> {
        match direction {
            None => self.template.with_flat_vector(&self.theta),
            Some((j, sign)) => {
                let mask = self.template.frozen_mask();
                let delta = direction_noise(self.noise.seed, self.noise.iteration, j, &mask);
                let theta = candidate(&self.theta, &mask, &delta, sign, self.noise.noise_std);
                self.template.with_flat_vector(&theta)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalJob {
    pub job_id: u64,
    pub base_id: u64,
    /// `None` evaluates the base parameters.
    pub direction: Option<(usize, Sign)>,
    pub task: Task,
    pub episodes: usize,
    pub seed_base: u64,
    pub iteration: u64,
    #[serde(default)]
    pub collect_obs_stats: bool,
}

impl EvalJob {
    pub fn episode_seed(&self, episode: usize) -> u64 {
        let (dir, sign) = match self.direction {
            Some((j, s)) => (j as u64, s.index()),
            None => (u64::MAX, 2),
        };
        seed_mix(&[self.seed_base, self.iteration, dir, sign, episode as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub job_id: u64,
    pub mean_return: f64,
    pub episode_returns: Vec<f64>,
    pub total_steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs_stats: Option<RunningStats>,
}

/// The jobs for one ARS iteration: `+` and `-` for each direction.
pub fn perturbation_jobs(
    base: &BaseParams,
    num_directions: usize,
    task: Task,
    episodes: usize,
    seed_base: u64,
) -> Vec<EvalJob> {
    (0..num_directions)
        .flat_map(|j| [Sign::Plus, Sign::Minus].map(|s| (j, s)))
        .enumerate()
        .map(|(k, (j, s))| EvalJob {
            job_id: k as u64,
            base_id: base.id,
            direction: Some((j, s)),
            task,
            episodes,
            seed_base,
            iteration: base.noise.iteration,
            collect_obs_stats: false,
        })
        .collect()
}

pub fn evaluate_job(base: &BaseParams, job: &EvalJob) -> Result<EvalResult> {
    if job.base_id != base.id {
        return Err(RunnerError::UnknownBase { job_id: job.job_id, base_id: job.base_id });
    }
    let fail = |e: PolicyError| RunnerError::Job { job_id: job.job_id, message: e.to_string() };
    let params = base.materialize(job.direction).map_err(fail)?;
    let policy = Policy::from_params(&params).map_err(fail)?;
    let opts = EpisodeOptions { collect_obs_stats: job.collect_obs_stats, ..EpisodeOptions::default() };
    let mut returns = Vec::with_capacity(job.episodes);
    let mut total_steps = 0u64;
    let mut obs_stats: Option<RunningStats> = None;
    for e in 0..job.episodes {
        let mut env = Environment::reset(job.task, job.episode_seed(e));
        let ep = run_episode(&policy, &mut env, opts).map_err(fail)?;
        returns.push(ep.ret);
        total_steps += u64::from(ep.steps);
        if let Some(s) = ep.obs_stats {
            obs_stats.get_or_insert_with(|| RunningStats::new(s.dim())).merge(&s);
        }
    }
    let (mean_return, _) = mean_std(&returns);
    Ok(EvalResult { job_id: job.job_id, mean_return, episode_returns: returns, total_steps, obs_stats })
}

fn evaluate_guarded(base: &BaseParams, job: &EvalJob) -> Result<EvalResult> {
    match catch_unwind(AssertUnwindSafe(|| evaluate_job(base, job))) {
        Ok(r) => r,
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "worker panicked".into());
            Err(RunnerError::Job { job_id: job.job_id, message })
        }
    }
}

/// Evaluate with a retry on failure; deterministic seeds make the retry identical.
pub fn evaluate_with_retry(base: &BaseParams, job: &EvalJob) -> Result<EvalResult> {
    evaluate_guarded(base, job).or_else(|first| {
        log::warn!("retrying job {}: {first}", job.job_id);
        evaluate_guarded(base, job)
    })
}

/// Run every job on `workers` threads. Results come back sorted by job id
/// and do not depend on the worker count or completion order.
pub fn evaluate_batch(base: &BaseParams, jobs: &[EvalJob], workers: usize) -> Result<Vec<EvalResult>> {
    if workers == 0 {
        return Err(RunnerError::Config("workers must be at least 1".into()));
    }
    let mut results = if workers == 1 || jobs.len() <= 1 {
        jobs.iter().map(|j| evaluate_with_retry(base, j)).collect::<Result<Vec<_>>>()?
    } else {
        let queue = Mutex::new(jobs.iter().collect::<VecDeque<_>>());
        let (tx, rx) = mpsc::channel();
        thread::scope(|s| {
            for _ in 0..workers.min(jobs.len()) {
                let tx = tx.clone();
                let queue = &queue;
                s.spawn(move || loop {
                    let Some(job) = queue.lock().expect("queue lock").pop_front() else { break };
                    let failed = {
                        let r = evaluate_with_retry(base, job);
                        let failed = r.is_err();
                        if tx.send(r).is_err() {
                            break;
                        }
                        failed
                    };
                    if failed {
                        queue.lock().expect("queue lock").clear();
                    }
                });
            }
        });
        drop(tx);
        rx.into_iter().collect::<Result<Vec<_>>>()?
    };
    results.sort_by_key(|r| r.job_id);
    Ok(results)
}

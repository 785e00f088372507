//! The optimizer loop: ARS iterations over runner batches, with held-out
//! evaluation, checkpoints and a line-delimited training log.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::ars::{self, ArsError, ArsState, DirectionResult, IterationRecord, Sign};
use crate::checkpoint::{Checkpoint, CheckpointError, LOG_TAIL};
use crate::config::RunConfig;
use crate::policy::{make_transfer_policy, ObsNorm, PolicyError, PolicyParams, LL_PROPRIO_DIM};
use crate::runner::{
    evaluate_batch, perturbation_jobs, remote_dispatch, BaseParams, DispatchOptions, EvalJob, EvalResult, NoiseSpec,
    RunnerError,
};
use crate::stats::{mean_std, RunningStats};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const OBS_MIN_STD: f64 = 1e-2;
const EVAL_SALT: u64 = 0x5eed_e7a1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Ars(#[from] ArsError),
    #[error(transparent)]
    Runner(#[from] RunnerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Where rollouts run.
#[derive(Debug, Clone)]
pub enum Backend {
    Local { workers: usize },
    Remote { endpoints: Vec<String>, options: DispatchOptions },
}

impl Backend {
    pub fn from_config(config: &RunConfig) -> Self {
        if config.runner.endpoints.is_empty() {
            Backend::Local { workers: config.runner.workers }
        } else {
            Backend::Remote {
                endpoints: config.runner.endpoints.clone(),
                options: DispatchOptions {
                    job_timeout: Duration::from_secs_f64(config.runner.job_timeout_s),
                    ..DispatchOptions::default()
                },
            }
        }
    }

    pub fn evaluate(&self, base: &BaseParams, jobs: &[EvalJob]) -> std::result::Result<Vec<EvalResult>, RunnerError> {
        match self {
            Backend::Local { workers } => evaluate_batch(base, jobs, *workers),
            Backend::Remote { endpoints, options } => remote_dispatch(base, jobs, endpoints, options),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: RunConfig,
    template: PolicyParams,
    state: ArsState,
    obs_stats: Option<RunningStats>,
    episodes: u64,
    steps: u64,
    log_tail: Vec<IterationRecord>,
}

impl Trainer {
    /// A fresh run from the configured initialisation.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let params = PolicyParams::init(config.policy_arch(), config.arch.init, config.seed)?;
        Self::from_params(config, params)
    }

    /// A fresh run whose low level comes frozen from `source`.
    pub fn transfer(config: RunConfig, source: &PolicyParams) -> Result<Self> {
        config.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let params = make_transfer_policy(source, config.policy_arch(), config.arch.init, config.seed)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: RunConfig, params: PolicyParams) -> Result<Self> {
        if params.arch != config.policy_arch() {
            return Err(TrainError::Config("policy architecture does not match the config".into()));
        }
        let state = ArsState::new(params.flat_vector(), params.frozen_mask(), config.seed)?;
        // a frozen low level keeps the normaliser it was trained with
        let obs_stats = (config.ars.obs_norm && !params.freeze_ll)
            .then(|| RunningStats::new(params.arch.hl.latent_dim + LL_PROPRIO_DIM));
        Ok(Self { config, template: params, state, obs_stats, episodes: 0, steps: 0, log_tail: Vec::new() })
    }

    pub fn resume(checkpoint: Checkpoint) -> Result<Self> {
        Ok(Self {
            config: checkpoint.config,
            template: checkpoint.params,
            state: checkpoint.ars,
            obs_stats: checkpoint.obs_stats,
            episodes: checkpoint.episodes,
            steps: checkpoint.steps,
            log_tail: checkpoint.log_tail,
        })
    }

    /// Swap in a config that differs only in budget, output location or rollout backend.
    pub fn with_config(mut self, config: RunConfig) -> Result<Self> {
        let mut comparable = config.clone();
        comparable.iterations = self.config.iterations;
        comparable.output_dir = self.config.output_dir.clone();
        comparable.runner = self.config.runner.clone();
        if comparable != self.config {
            return Err(TrainError::Config(
                "a resumed run may only change iterations, output_dir and runner settings".into(),
            ));
        }
        config.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.config = config;
        Ok(self)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn state(&self) -> &ArsState {
        &self.state
    }

    /// Current policy (the optimizer's parameters cast to f32).
    pub fn params(&self) -> PolicyParams {
        self.template.with_flat_vector(&self.state.theta).expect("theta matches the template")
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params(),
            ars: self.state.clone(),
            obs_stats: self.obs_stats.clone(),
            episodes: self.episodes,
            steps: self.steps,
            log_tail: self.log_tail.clone(),
        }
    }

    /// One ARS iteration: evaluate all perturbations, update, optionally evaluate the result.
    pub fn step(&mut self, backend: &Backend) -> Result<IterationRecord> {
        let start = Instant::now();
        let cfg = self.config.ars_config();
        let iteration = self.state.iteration;
        let base = BaseParams::new(
            iteration,
            self.template.clone(),
            self.state.theta.clone(),
            NoiseSpec { seed: self.state.rng_seed, iteration, noise_std: cfg.noise_std },
        )?;
        let mut jobs =
            perturbation_jobs(&base, cfg.num_directions, self.config.task, cfg.episodes_per_eval, self.config.seed);
        for j in &mut jobs {
            j.collect_obs_stats = self.obs_stats.is_some();
        }
        let results = backend.evaluate(&base, &jobs)?;
        let mut by_dir =
            vec![DirectionResult { direction_id: 0, r_plus: f64::NAN, r_minus: f64::NAN }; cfg.num_directions];
        let mut batch_stats: Option<RunningStats> = None;
        for (job, r) in jobs.iter().zip(&results) {
            let (j, sign) = job.direction.expect("perturbation job");
            by_dir[j].direction_id = j;
            match sign {
                Sign::Plus => by_dir[j].r_plus = r.mean_return,
                Sign::Minus => by_dir[j].r_minus = r.mean_return,
            }
            self.episodes += r.episode_returns.len() as u64;
            self.steps += r.total_steps;
            if let Some(s) = &r.obs_stats {
                batch_stats.get_or_insert_with(|| RunningStats::new(s.dim())).merge(s);
            }
        }
        let perturbations = ars::propose_perturbations(&self.state, &cfg);
        let (next, stats) = ars::update(&self.state, &perturbations, &by_dir, &cfg)?;
        self.state = next;
        if let (Some(total), Some(batch)) = (self.obs_stats.as_mut(), batch_stats) {
            total.merge(&batch);
            let (mean, inv_std) = total.normalizer(OBS_MIN_STD);
            self.template.obs_norm = Some(ObsNorm { mean, inv_std });
        }
        let eval_return = match self.config.eval_episodes {
            0 => None,
            n => Some(self.evaluate(backend, n, self.state.iteration)?),
        };
        let record = IterationRecord {
            iteration,
            mean_return: stats.mean_return,
            max_return: stats.max_return,
            min_return: stats.min_return,
            sigma_r: stats.sigma_r,
            skipped: stats.skipped,
            episodes: self.episodes,
            steps: self.steps,
            wall_clock_s: start.elapsed().as_secs_f64(),
            eval_return,
        };
        self.log_tail.push(IterationRecord { wall_clock_s: 0.0, ..record.clone() });
        if self.log_tail.len() > LOG_TAIL {
            self.log_tail.remove(0);
        }
        log::info!(
            "iteration {iteration}: mean {:.4} max {:.4} eval {} ({:.1}s)",
            record.mean_return,
            record.max_return,
            eval_return.map_or("-".into(), |r| format!("{r:.4}")),
            record.wall_clock_s
        );
        Ok(record)
    }

    /// Held-out mean return of the current parameters; these episodes are not counted as training.
    pub fn evaluate(&self, backend: &Backend, episodes: usize, salt: u64) -> Result<f64> {
        let base = BaseParams::fixed(u64::MAX, self.params());
        let job = EvalJob {
            job_id: 0,
            base_id: base.id,
            direction: None,
            task: self.config.task,
            episodes,
            seed_base: ars::seed_mix(&[self.config.seed, EVAL_SALT]),
            iteration: salt,
            collect_obs_stats: false,
        };
        let r = backend.evaluate(&base, &[job])?;
        Ok(mean_std(&r[0].episode_returns).0)
    }

    /// Train until `config.iterations` have run, checkpointing into `out` every
    /// `checkpoint_every` iterations and at the end. Returns the new log records.
    pub fn run(&mut self, backend: &Backend, out: Option<&Path>) -> Result<Vec<IterationRecord>> {
        let mut log = match out {
            Some(dir) => Some(open_log(dir)?),
            None => None,
        };
        if let Some(dir) = out {
            if self.state.iteration == 0 {
                self.save(dir)?;
            }
        }
        let mut records = Vec::new();
        while self.state.iteration < self.config.iterations {
            let record = self.step(backend)?;
            if let (Some((path, f)), Some(dir)) = (log.as_mut(), out) {
                let line = serde_json::to_string(&record).expect("record serialises");
                writeln!(f, "{line}").map_err(|source| TrainError::Io { path: path.clone(), source })?;
                if self.state.iteration.is_multiple_of(self.config.checkpoint_every)
                    || self.state.iteration == self.config.iterations
                {
                    self.save(dir)?;
                }
            }
            records.push(record);
        }
        Ok(records)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let ckpt = self.checkpoint();
        ckpt.save(&checkpoint_path(dir, self.state.iteration))?;
        ckpt.save(&dir.join("latest.ckpt"))?;
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.ckpt"))
}

fn open_log(dir: &Path) -> Result<(PathBuf, std::fs::File)> {
    let path = dir.join(LOG_FILE);
    let io = |source| TrainError::Io { path: path.clone(), source };
    std::fs::create_dir_all(dir).map_err(io)?;
    let f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
    Ok((path, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Task;

    fn small(task: Task) -> RunConfig {
        let mut c = RunConfig::new(task);
        c.ars.num_directions = 2;
        c.ars.top_k = 1;
        c.ars.episodes_per_eval = 1;
        c.iterations = 2;
        c.checkpoint_every = 1;
        c.seed = 5;
        c
    }

    #[test]
    fn step_counts_episodes_and_moves_theta() {
        let mut t = Trainer::new(small(Task::MazeTraversal)).unwrap();
        let before = t.state().theta.clone();
        let r = t.step(&Backend::Local { workers: 1 }).unwrap();
        assert_eq!(r.iteration, 0);
        assert_eq!(r.episodes, 4);
        assert_eq!(t.iteration(), 1);
        assert!(r.skipped || t.state().theta != before);
    }

    #[test]
    fn obs_norm_is_installed_after_first_iteration() {
        let mut c = small(Task::Cliff);
        c.ars.obs_norm = true;
        let mut t = Trainer::new(c).unwrap();
        assert!(t.params().obs_norm.is_none());
        t.step(&Backend::Local { workers: 1 }).unwrap();
        let norm = t.params().obs_norm.unwrap();
        assert_eq!(norm.mean.len(), 20);
        assert!(norm.inv_std.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn run_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(small(Task::Flat)).unwrap();
        t.run(&Backend::Local { workers: 1 }, Some(dir.path())).unwrap();
        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 2);
        for i in 0..=2 {
            assert!(checkpoint_path(dir.path(), i).exists());
        }
        let latest = Checkpoint::load(&dir.path().join("latest.ckpt")).unwrap();
        assert_eq!(latest.iteration(), 2);
        assert_eq!(latest.log_tail.len(), 2);
        assert!(latest.log_tail.iter().all(|r| r.wall_clock_s == 0.0));
    }
}

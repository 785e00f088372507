//! Augmented random search: antithetic Gaussian perturbations, top-b
//! direction selection and a return-std normalised step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::mean_std;

pub const SIGMA_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum ArsError {
    #[error("invalid ARS configuration: {0}")]
    Config(String),
    #[error("incomplete iteration: {0}")]
    Iteration(String),
}

pub type Result<T> = std::result::Result<T, ArsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArsConfig {
    pub num_directions: usize,
    pub top_k: usize,
    pub step_size: f64,
    pub noise_std: f64,
    pub episodes_per_eval: usize,
    pub seed: u64,
    /// Normalise low-level observations with running statistics.
    #[serde(default)]
    pub obs_norm: bool,
}

impl Default for ArsConfig {
    fn default() -> Self {
        Self {
            num_directions: 32,
            top_k: 16,
            step_size: 0.02,
            noise_std: 0.03,
            episodes_per_eval: 3,
            seed: 0,
            obs_norm: false,
        }
    }
}

impl ArsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_directions == 0 || self.top_k == 0 || self.top_k > self.num_directions {
            return Err(ArsError::Config(format!(
                "need 1 <= top_k <= num_directions, got top_k={} num_directions={}",
                self.top_k, self.num_directions
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite())
            || !(self.noise_std > 0.0 && self.noise_std.is_finite())
        {
            return Err(ArsError::Config("step_size and noise_std must be positive".into()));
        }
        if self.episodes_per_eval == 0 {
            return Err(ArsError::Config("episodes_per_eval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArsState {
    pub theta: Vec<f64>,
    /// `true` marks coordinates that never move.
    pub frozen: Vec<bool>,
    pub iteration: u64,
    pub rng_seed: u64,
    pub best_return_so_far: f64,
}

impl ArsState {
    pub fn new(theta: Vec<f64>, frozen: Vec<bool>, rng_seed: u64) -> Result<Self> {
        if frozen.len() != theta.len() {
            return Err(ArsError::Config(format!("mask length {} != parameter length {}", frozen.len(), theta.len())));
        }
        Ok(Self { theta, frozen, iteration: 0, rng_seed, best_return_so_far: f64::NEG_INFINITY })
    }

    pub fn unfrozen(theta: Vec<f64>, rng_seed: u64) -> Self {
        let frozen = vec![false; theta.len()];
        Self { theta, frozen, iteration: 0, rng_seed, best_return_so_far: f64::NEG_INFINITY }
    }
}

/// SplitMix64 finaliser folded over `parts`.
pub fn seed_mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn as_f64(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn index(self) -> u64 {
        match self {
            Sign::Plus => 0,
            Sign::Minus => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub direction_id: usize,
    pub delta: Vec<f64>,
}

/// Standard-normal direction for `(seed, iteration, direction)`, zero on frozen coordinates.
/// Every coordinate consumes a draw, so the mask does not shift the stream.
pub fn direction_noise(seed: u64, iteration: u64, direction_id: usize, frozen: &[bool]) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(&[seed, iteration, direction_id as u64]));
    frozen
        .iter()
        .map(|&f| {
            let z: f64 = StandardNormal.sample(&mut rng);
            if f {
                0.0
            } else {
                z
            }
        })
        .collect()
}

pub fn propose_perturbations(state: &ArsState, config: &ArsConfig) -> Vec<Perturbation> {
    (0..config.num_directions)
        .map(|j| Perturbation {
            direction_id: j,
            delta: direction_noise(state.rng_seed, state.iteration, j, &state.frozen),
        })
        .collect()
}

/// `theta + sign * nu * delta`, leaving frozen coordinates bit-identical.
pub fn candidate(theta: &[f64], frozen: &[bool], delta: &[f64], sign: Sign, noise_std: f64) -> Vec<f64> {
    let s = sign.as_f64() * noise_std;
    theta.iter().zip(frozen).zip(delta).map(|((&t, &f), &d)| if f { t } else { t + s * d }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionResult {
    pub direction_id: usize,
    pub r_plus: f64,
    pub r_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub sigma_r: f64,
    pub skipped: bool,
    pub selected: Vec<usize>,
    pub mean_return: f64,
    pub max_return: f64,
    pub min_return: f64,
}

/// One ARS step. Results may arrive in any order; they are matched to
/// perturbations by direction id.
pub fn update(
    state: &ArsState,
    perturbations: &[Perturbation],
    results: &[DirectionResult],
    config: &ArsConfig,
) -> Result<(ArsState, UpdateStats)> {
    config.validate()?;
    let n = config.num_directions;
    if perturbations.len() != n {
        return Err(ArsError::Iteration(format!("expected {n} perturbations, got {}", perturbations.len())));
    }
    let mut by_dir: Vec<Option<&DirectionResult>> = vec![None; n];
    for r in results {
        match by_dir.get_mut(r.direction_id) {
            Some(slot @ None) => *slot = Some(r),
            Some(Some(_)) => {
                return Err(ArsError::Iteration(format!("duplicate result for direction {}", r.direction_id)))
            }
            None => return Err(ArsError::Iteration(format!("unknown direction {}", r.direction_id))),
        }
    }
    let mut rows = Vec::with_capacity(n);
    for (j, r) in by_dir.into_iter().enumerate() {
        let r = r.ok_or_else(|| ArsError::Iteration(format!("missing result for direction {j}")))?;
        let p = perturbations
            .iter()
            .find(|p| p.direction_id == j)
            .ok_or_else(|| ArsError::Iteration(format!("missing perturbation for direction {j}")))?;
        if p.delta.len() != state.theta.len() {
            return Err(ArsError::Iteration(format!("direction {j} has the wrong length")));
        }
        if !(r.r_plus.is_finite() && r.r_minus.is_finite()) {
            return Err(ArsError::Iteration(format!("non-finite return for direction {j}")));
        }
        rows.push((r, p));
    }

    let all: Vec<f64> = rows.iter().flat_map(|(r, _)| [r.r_plus, r.r_minus]).collect();
    let (mean_return, _) = mean_std(&all);
    let max_return = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_return = all.iter().copied().fold(f64::INFINITY, f64::min);

    // ties keep direction order, so the selection is independent of arrival order
    rows.sort_by(|a, b| b.0.r_plus.max(b.0.r_minus).total_cmp(&a.0.r_plus.max(a.0.r_minus)));
    rows.truncate(config.top_k);
    rows.sort_by_key(|(r, _)| r.direction_id);
    let selected_returns: Vec<f64> = rows.iter().flat_map(|(r, _)| [r.r_plus, r.r_minus]).collect();
    let (_, sigma_r) = mean_std(&selected_returns);

    let mut next = state.clone();
    next.iteration += 1;
    next.best_return_so_far = state.best_return_so_far.max(max_return);
    let skipped = sigma_r < SIGMA_EPS;
    if !skipped {
        let scale = config.step_size / (config.top_k as f64 * sigma_r);
        for (i, t) in next.theta.iter_mut().enumerate() {
            if state.frozen[i] {
                continue;
            }
            let g: f64 = rows.iter().map(|(r, p)| (r.r_plus - r.r_minus) * p.delta[i]).sum();
            *t += scale * g;
        }
    }
    let stats = UpdateStats {
        sigma_r,
        skipped,
        selected: rows.iter().map(|(r, _)| r.direction_id).collect(),
        mean_return,
        max_return,
        min_return,
    };
    Ok((next, stats))
}

/// Run ARS against a deterministic objective (no episodes, no workers).
pub fn optimize(
    mut state: ArsState,
    config: &ArsConfig,
    iterations: usize,
    mut objective: impl FnMut(&[f64]) -> f64,
) -> Result<(ArsState, Vec<UpdateStats>)> {
    config.validate()?;
    let mut history = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let perturbations = propose_perturbations(&state, config);
        let results: Vec<DirectionResult> = perturbations
            .iter()
            .map(|p| DirectionResult {
                direction_id: p.direction_id,
                r_plus: objective(&candidate(&state.theta, &state.frozen, &p.delta, Sign::Plus, config.noise_std)),
                r_minus: objective(&candidate(&state.theta, &state.frozen, &p.delta, Sign::Minus, config.noise_std)),
            })
            .collect();
        let (next, stats) = update(&state, &perturbations, &results, config)?;
        state = next;
        history.push(stats);
    }
    Ok((state, history))
}

/// Negated squared distance to `target`.
pub fn sphere(theta: &[f64], target: &[f64]) -> f64 {
    -theta.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

pub const TUNE_SEEDS: u64 = 3;

/// Grid search: each config is scored by the mean over three seeds of
/// `trial(config, seed, budget)`. Non-finite scores rank last.
pub fn tune_grid(
    space: &[ArsConfig],
    budget: usize,
    mut trial: impl FnMut(&ArsConfig, u64, usize) -> f64,
) -> Result<ArsConfig> {
    if space.is_empty() {
        return Err(ArsError::Config("empty tuning space".into()));
    }
    if budget == 0 {
        return Ok(ArsConfig::default());
    }
    let mut best: Option<(f64, &ArsConfig)> = None;
    for config in space {
        config.validate()?;
        let score = (0..TUNE_SEEDS).map(|s| trial(config, s, budget)).sum::<f64>() / TUNE_SEEDS as f64;
        let score = if score.is_finite() { score } else { f64::NEG_INFINITY };
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, config));
        }
    }
    Ok(best.map(|(_, c)| c.clone()).expect("space is non-empty"))
}

/// Line-delimited training log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub mean_return: f64,
    pub max_return: f64,
    pub min_return: f64,
    pub sigma_r: f64,
    pub skipped: bool,
    pub episodes: u64,
    pub steps: u64,
    pub wall_clock_s: f64,
    /// Held-out evaluation of the updated parameters, when run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_return: Option<f64>,
}

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Policy, PolicyError, PolicyKind, Result, Scratch, LL_PROPRIO_DIM};
use crate::stats::RunningStats;
use crate::tg::MotorCommand;
use crate::world::{Environment, Task, TerminationReason};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EpisodeOptions {
    pub record: bool,
    pub time_inference: bool,
    pub collect_obs_stats: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: u32,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub reward: f64,
    pub hl_active: bool,
    /// Duration emitted at the most recent HL activation.
    pub duration: u32,
    pub latent: Vec<f32>,
    pub command: MotorCommand,
    pub tg_phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub task: Task,
    pub goal: Option<[f64; 2]>,
    /// Position before the first step.
    pub start: [f64; 2],
    pub steps: Vec<TraceStep>,
}

impl EpisodeTrace {
    pub fn reward_sum(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn activation_steps(&self) -> Vec<u32> {
        self.steps.iter().filter(|s| s.hl_active).map(|s| s.step).collect()
    }

    pub fn net_displacement(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| (s.x - self.start[0]).hypot(s.y - self.start[1]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub ret: f64,
    pub steps: u32,
    pub reason: TerminationReason,
    pub hl_evals: u32,
    /// Wall time spent in policy inference (vision included), when timed.
    pub inference_time: Duration,
    pub trace: Option<EpisodeTrace>,
    /// Raw low-level observation statistics, when collected.
    pub obs_stats: Option<RunningStats>,
}

/// Roll out `policy` in a freshly reset environment until it terminates.
///
/// The high level runs whenever the remaining duration reaches zero, on a
/// newly rendered depth image; the low level, trajectory generator and
/// dynamics run every step.
pub fn run_episode(policy: &Policy, env: &mut Environment, opts: EpisodeOptions) -> Result<Episode> {
    let flat = policy.arch().kind == PolicyKind::Flat;
    let start = env.state().position();
    let mut trace =
        opts.record.then(|| EpisodeTrace { task: env.task(), goal: env.terrain().goal(), start, steps: Vec::new() });
    let mut scratch = if opts.collect_obs_stats && !flat {
        Scratch::collecting(policy.latent_dim() + LL_PROPRIO_DIM)
    } else {
        Scratch::default()
    };
    let mut ret = 0.0f64;
    let mut remaining = 0u32;
    let mut duration = 0u32;
    let mut latent = vec![0.0f32; policy.latent_dim()];
    let mut hl_evals = 0u32;
    let mut inference_time = Duration::ZERO;
    let n = policy.image_size();

    while !env.is_done() {
        let step = env.state().step_count;
        let hl_active = remaining == 0;
        // rendering is not part of inference time
        let image = (flat || hl_active).then(|| (env.render(n), env.task_input()));
        let timer = opts.time_inference.then(Instant::now);
        let (command, tg) = if flat {
            let (image, task_input) = image.as_ref().expect("rendered");
            hl_evals += 1;
            policy.flat_act(image, task_input, env.state(), &mut scratch)?
        } else {
            if let Some((image, task_input)) = &image {
                let out = policy.hl_forward(image, task_input)?;
                hl_evals += 1;
                duration = out.duration;
                remaining = out.duration;
                latent = out.latent;
                if latent.iter().any(|v| !v.is_finite()) {
                    return Err(PolicyError::NonFinite { step, what: "latent command" });
                }
            }
            policy.low_level_act(&latent, env.state(), &mut scratch)?
        };
        if let Some(t) = timer {
            inference_time += t.elapsed();
        }
        if !command.is_finite() {
            return Err(PolicyError::NonFinite { step, what: "motor command" });
        }
        let result = env.step(&command, tg)?;
        ret += result.reward;
        remaining = remaining.saturating_sub(1);
        if let Some(trace) = trace.as_mut() {
            let s = env.state();
            trace.steps.push(TraceStep {
                step,
                x: s.x,
                y: s.y,
                yaw: s.yaw,
                reward: result.reward,
                hl_active: hl_active || flat,
                duration: if flat { 1 } else { duration },
                latent: latent.clone(),
                command,
                tg_phase: tg.phase,
            });
        }
    }
    Ok(Episode {
        ret,
        steps: env.state().step_count,
        reason: env.reason(),
        hl_evals,
        inference_time,
        trace,
        obs_stats: scratch.take_obs_stats(),
    })
}

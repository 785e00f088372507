//! Deterministic task environments: terrain, depth camera, body model,
//! rewards and termination.

pub mod camera;
pub mod dynamics;
pub mod reward;
pub mod terrain;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use camera::{render_depth, Camera, DepthImage};
pub use dynamics::{dynamics_step, RobotState, DT};
pub use reward::{f_vcap, reward_cliff, reward_goal_finding, reward_maze_traversal, V_CAP};
pub use terrain::{Task, Terrain};

use crate::tg::{MotorCommand, TgState};

pub const MAX_STEPS: u32 = 6000;
pub const FALL_ANGLE: f64 = 0.4;
pub const BODY_RADIUS: f64 = 0.35;
pub const GOAL_RADIUS: f64 = 0.5;
/// Scale applied to target-relative positions fed to the high level.
pub const TASK_POSITION_SCALE: f64 = 1.0 / terrain::MAZE_HALF_EXTENT;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u32, what: &'static str },
    #[error("step called on a finished episode")]
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Running,
    Fall,
    Collision,
    CliffEdge,
    GoalReached,
    TimeLimit,
}

impl TerminationReason {
    pub const ALL: [TerminationReason; 6] = [
        TerminationReason::Running,
        TerminationReason::Fall,
        TerminationReason::Collision,
        TerminationReason::CliffEdge,
        TerminationReason::GoalReached,
        TerminationReason::TimeLimit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TerminationReason::Running => "running",
            TerminationReason::Fall => "fall",
            TerminationReason::Collision => "collision",
            TerminationReason::CliffEdge => "cliff_edge",
            TerminationReason::GoalReached => "goal_reached",
            TerminationReason::TimeLimit => "time_limit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub reward: f64,
    pub done: bool,
    pub reason: TerminationReason,
}

pub fn reset(task: Task, seed: u64) -> (RobotState, Terrain) {
    let (start, terrain) = terrain::generate(task, seed);
    let state = RobotState { x: start.x, y: start.y, yaw: start.yaw, ..RobotState::default() };
    (state, terrain)
}

pub fn check_termination(state: &RobotState, terrain: &Terrain) -> TerminationReason {
    if state.roll.abs() > FALL_ANGLE || state.pitch.abs() > FALL_ANGLE {
        return TerminationReason::Fall;
    }
    let p = state.position();
    match terrain {
        Terrain::CurvedCliff(c) if !c.contains(p) => return TerminationReason::CliffEdge,
        Terrain::Maze(m) => {
            let wall_gap = m.half_extent - p[0].abs().max(p[1].abs());
            let pillar_hit = m.pillars.iter().any(|pl| {
                let (dx, dy) = (p[0] - pl.center[0], p[1] - pl.center[1]);
                (dx * dx + dy * dy).sqrt() - pl.radius < BODY_RADIUS
            });
            if wall_gap < BODY_RADIUS || pillar_hit {
                return TerminationReason::Collision;
            }
            if let Some(g) = m.goal {
                let (dx, dy) = (p[0] - g[0], p[1] - g[1]);
                if (dx * dx + dy * dy).sqrt() < GOAL_RADIUS {
                    return TerminationReason::GoalReached;
                }
            }
        }
        _ => {}
    }
    if state.step_count >= MAX_STEPS {
        return TerminationReason::TimeLimit;
    }
    TerminationReason::Running
}

pub fn task_reward(task: Task, terrain: &Terrain, pos: [f64; 2], prev: [f64; 2]) -> f64 {
    match (task, terrain.goal()) {
        (Task::Cliff, _) => reward_cliff(pos[0], prev[0]),
        (Task::GoalFinding, Some(g)) => reward_goal_finding(pos, prev, g),
        _ => reward_maze_traversal(pos, prev),
    }
}

/// One task episode: owns the terrain and robot state.
#[derive(Debug, Clone)]
pub struct Environment {
    task: Task,
    terrain: Terrain,
    state: RobotState,
    reason: TerminationReason,
}

impl Environment {
    pub fn reset(task: Task, seed: u64) -> Self {
        let (state, terrain) = reset(task, seed);
        Self::from_parts(task, terrain, state)
    }

    pub fn from_parts(task: Task, terrain: Terrain, state: RobotState) -> Self {
        Self { task, terrain, state, reason: TerminationReason::Running }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn terrain(&self) -> &Terrain {
        &self.terrain
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn reason(&self) -> TerminationReason {
        self.reason
    }

    pub fn is_done(&self) -> bool {
        self.reason != TerminationReason::Running
    }

    pub fn render(&self, n: usize) -> DepthImage {
        render_depth(&self.state, &self.terrain, n)
    }

    /// Target-relative position in the body frame (scaled) and bearing (over pi).
    /// The target is the goal when present, otherwise the origin.
    pub fn task_input(&self) -> Vec<f32> {
        if self.task.task_input_dim() == 0 {
            return Vec::new();
        }
        let target = self.terrain.goal().unwrap_or([0.0, 0.0]);
        let (dx, dy) = (target[0] - self.state.x, target[1] - self.state.y);
        let (s, c) = self.state.yaw.sin_cos();
        let (bx, by) = (c * dx + s * dy, -s * dx + c * dy);
        let bearing = if bx == 0.0 && by == 0.0 { 0.0 } else { by.atan2(bx) };
        vec![(bx * TASK_POSITION_SCALE) as f32, (by * TASK_POSITION_SCALE) as f32, (bearing / PI) as f32]
    }

    /// Apply a motor command; `tg` is the generator state that produced it.
    pub fn step(&mut self, command: &MotorCommand, tg: TgState) -> Result<StepResult, WorldError> {
        if self.is_done() {
            return Err(WorldError::Finished);
        }
        let step = self.state.step_count;
        let mut current = self.state;
        current.tg = tg;
        let next = dynamics_step(&current, command, DT).ok_or(WorldError::NonFinite { step, what: "motor command" })?;
        if !next.is_finite() {
            return Err(WorldError::NonFinite { step, what: "robot state" });
        }
        let reward = task_reward(self.task, &self.terrain, next.position(), self.state.position());
        self.state = next;
        self.reason = check_termination(&self.state, &self.terrain);
        Ok(StepResult { reward, done: self.is_done(), reason: self.reason })
    }
}

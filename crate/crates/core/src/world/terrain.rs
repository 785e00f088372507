//! Procedural terrains: a curved cliff corridor and a walled pillar maze.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CLIFF_SEGMENTS: usize = 10;
pub const CLIFF_SEGMENT_LENGTH: f64 = 5.0;
pub const CLIFF_MAX_CURVATURE: f64 = 0.2;
pub const CLIFF_HALF_WIDTH: f64 = 2.0;
const CLIFF_SAMPLES_PER_SEGMENT: usize = 10;

pub const MAZE_HALF_EXTENT: f64 = 6.5;
pub const MAZE_WALL_THICKNESS: f64 = 0.5;
pub const OBSTACLE_HEIGHT: f64 = 2.0;
pub const PILLAR_PITCH: f64 = 2.0;
pub const PILLAR_JITTER: f64 = 0.3;
pub const PILLAR_RADIUS: f64 = 0.25;
pub const PILLAR_CLEARANCE: f64 = 1.5;
pub const GOAL_CORNER: f64 = 5.5;

pub const GOAL_CORNERS: [[f64; 2]; 4] = [
    [GOAL_CORNER, GOAL_CORNER],
    [-GOAL_CORNER, GOAL_CORNER],
    [-GOAL_CORNER, -GOAL_CORNER],
    [GOAL_CORNER, -GOAL_CORNER],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Cliff,
    MazeTraversal,
    GoalFinding,
    /// Obstacle-free ground; used to characterise the low level on its own.
    Flat,
}

impl Task {
    pub fn task_input_dim(self) -> usize {
        match self {
            Task::Cliff => 0,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Cliff => "cliff",
            Task::MazeTraversal => "maze_traversal",
            Task::GoalFinding => "goal_finding",
            Task::Flat => "flat",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cliff" => Ok(Task::Cliff),
            "maze_traversal" => Ok(Task::MazeTraversal),
            "goal_finding" => Ok(Task::GoalFinding),
            "flat" => Ok(Task::Flat),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pillar {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cliff {
    /// Corridor centerline, starting at the origin.
    pub centerline: Vec<[f64; 2]>,
    pub half_width: f64,
}

impl Cliff {
    pub fn distance_to_centerline(&self, p: [f64; 2]) -> f64 {
        self.centerline.windows(2).map(|w| point_segment_distance(p, w[0], w[1])).fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.distance_to_centerline(p) <= self.half_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Maze {
    /// Inner faces of the boundary walls sit at `+-half_extent`.
    pub half_extent: f64,
    pub pillars: Vec<Pillar>,
    pub goal: Option<[f64; 2]>,
}

impl Maze {
    /// Axis-aligned wall boxes as `(min, max)` corners.
    pub fn wall_boxes(&self) -> [([f64; 3], [f64; 3]); 4] {
        let (a, t, h) = (self.half_extent, MAZE_WALL_THICKNESS, OBSTACLE_HEIGHT);
        let outer = a + t;
        [
            ([a, -outer, 0.0], [outer, outer, h]),
            ([-outer, -outer, 0.0], [-a, outer, h]),
            ([-outer, a, 0.0], [outer, outer, h]),
            ([-outer, -outer, 0.0], [outer, -a, h]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Terrain {
    CurvedCliff(Cliff),
    Maze(Maze),
    Flat,
}

impl Terrain {
    pub fn goal(&self) -> Option<[f64; 2]> {
        match self {
            Terrain::Maze(m) => m.goal,
            _ => None,
        }
    }
}

pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (apx, apy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 { ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (apx - t * abx, apy - t * aby);
    (dx * dx + dy * dy).sqrt()
}

/// Start pose drawn at reset: position (always the origin) and heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StartPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

pub fn generate(task: Task, seed: u64) -> (StartPose, Terrain) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match task {
        Task::Cliff => (StartPose { x: 0.0, y: 0.0, yaw: 0.0 }, Terrain::CurvedCliff(cliff(&mut rng))),
        Task::MazeTraversal | Task::GoalFinding => {
            let yaw = rng.random_range(-PI..PI);
            let goal = (task == Task::GoalFinding).then(|| GOAL_CORNERS[rng.random_range(0..4)]);
            let pillars = pillars(&mut rng);
            let maze = Maze { half_extent: MAZE_HALF_EXTENT, pillars, goal };
            (StartPose { x: 0.0, y: 0.0, yaw }, Terrain::Maze(maze))
        }
        Task::Flat => (StartPose { x: 0.0, y: 0.0, yaw: 0.0 }, Terrain::Flat),
    }
}

fn cliff(rng: &mut ChaCha8Rng) -> Cliff {
    let ds = CLIFF_SEGMENT_LENGTH / CLIFF_SAMPLES_PER_SEGMENT as f64;
    let (mut x, mut y, mut heading) = (0.0f64, 0.0f64, 0.0f64);
    let mut centerline = vec![[x, y]];
    for _ in 0..CLIFF_SEGMENTS {
        let kappa = rng.random_range(-CLIFF_MAX_CURVATURE..CLIFF_MAX_CURVATURE);
        for _ in 0..CLIFF_SAMPLES_PER_SEGMENT {
            let mid = heading + 0.5 * kappa * ds;
            x += ds * mid.cos();
            y += ds * mid.sin();
            heading += kappa * ds;
            centerline.push([x, y]);
        }
    }
    Cliff { centerline, half_width: CLIFF_HALF_WIDTH }
}

fn pillars(rng: &mut ChaCha8Rng) -> Vec<Pillar> {
    let limit = MAZE_HALF_EXTENT - PILLAR_RADIUS - 0.05;
    let n = (MAZE_HALF_EXTENT / PILLAR_PITCH).floor() as i32;
    let mut out = Vec::new();
    for i in -n..=n {
        for j in -n..=n {
            // draw jitter for every lattice site so the stream never depends on removals
            let jx = rng.random_range(-PILLAR_JITTER..PILLAR_JITTER);
            let jy = rng.random_range(-PILLAR_JITTER..PILLAR_JITTER);
            let c = [
                (f64::from(i) * PILLAR_PITCH + jx).clamp(-limit, limit),
                (f64::from(j) * PILLAR_PITCH + jy).clamp(-limit, limit),
            ];
            let near = |p: [f64; 2]| ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2)).sqrt() < PILLAR_CLEARANCE;
            if near([0.0, 0.0]) || GOAL_CORNERS.iter().any(|&g| near(g)) {
                continue;
            }
            out.push(Pillar { center: c, radius: PILLAR_RADIUS });
        }
    }
    out
}

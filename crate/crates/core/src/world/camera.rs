//! Pinhole depth camera raycast against the terrain primitives.

use serde::{Deserialize, Serialize};

use super::dynamics::RobotState;
use super::terrain::{Cliff, Maze, Terrain, OBSTACLE_HEIGHT};
use crate::nnet::Tensor3;

pub const CAMERA_HEIGHT: f64 = 0.5;
pub const CLIFF_CAMERA_PITCH_DEG: f64 = -30.0;
pub const HFOV_DEG: f64 = 90.0;
pub const VFOV_DEG: f64 = 60.0;
pub const RANGE_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub height: f64,
    /// Radians, negative looks down.
    pub pitch: f64,
    pub hfov: f64,
    pub vfov: f64,
    pub range: f64,
}

impl Camera {
    pub fn for_terrain(terrain: &Terrain) -> Self {
        let pitch = match terrain {
            Terrain::CurvedCliff(_) => CLIFF_CAMERA_PITCH_DEG.to_radians(),
            _ => 0.0,
        };
        Self {
            height: CAMERA_HEIGHT,
            pitch,
            hfov: HFOV_DEG.to_radians(),
            vfov: VFOV_DEG.to_radians(),
            range: RANGE_MAX,
        }
    }

    /// Unit world-frame direction through the centre of pixel `(row, col)`.
    /// Row 0 is the top of the image, column 0 the left edge.
    pub fn ray_direction(&self, yaw: f64, n: usize, row: usize, col: usize) -> [f64; 3] {
        let u = (2.0 * (col as f64 + 0.5) / n as f64 - 1.0) * (0.5 * self.hfov).tan();
        let v = (1.0 - 2.0 * (row as f64 + 0.5) / n as f64) * (0.5 * self.vfov).tan();
        self.direction_from_plane(yaw, u, v)
    }

    /// Direction for image-plane coordinates `(u, v)` at unit focal length,
    /// `u` to the right and `v` up.
    pub fn direction_from_plane(&self, yaw: f64, u: f64, v: f64) -> [f64; 3] {
        let (sp, cp) = self.pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        // camera frame: x forward, y left, z up
        let (x, y, z) = (1.0, -u, v);
        let (x, z) = (x * cp - z * sp, x * sp + z * cp);
        let (x, y) = (x * cy - y * sy, x * sy + y * cy);
        let n = (x * x + y * y + z * z).sqrt();
        [x / n, y / n, z / n]
    }
}

/// Depth image with values `min(distance, range) / range`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage(pub Tensor3);

impl DepthImage {
    pub fn size(&self) -> usize {
        self.0.height
    }

    pub fn pixel(&self, row: usize, col: usize) -> f32 {
        self.0.at(row, col, 0)
    }
}

/// Distance along the unit direction `dir` to the nearest terrain surface.
pub fn cast_ray(terrain: &Terrain, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
    match terrain {
        Terrain::CurvedCliff(c) => cast_cliff(c, origin, dir),
        Terrain::Maze(m) => cast_maze(m, origin, dir),
        Terrain::Flat => None,
    }
}

fn cast_cliff(cliff: &Cliff, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
    if dir[2] >= 0.0 || origin[2] <= 0.0 {
        return None;
    }
    let t = -origin[2] / dir[2];
    let p = [origin[0] + t * dir[0], origin[1] + t * dir[1]];
    cliff.contains(p).then_some(t)
}

fn cast_maze(maze: &Maze, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
    let mut best = f64::INFINITY;
    for p in &maze.pillars {
        if let Some(t) = ray_cylinder(origin, dir, p.center, p.radius, OBSTACLE_HEIGHT) {
            best = best.min(t);
        }
    }
    for (lo, hi) in maze.wall_boxes() {
        if let Some(t) = ray_box(origin, dir, lo, hi) {
            best = best.min(t);
        }
    }
    best.is_finite().then_some(best)
}

/// Side-wall hit of a vertical cylinder standing on `z = 0` with the given height.
pub fn ray_cylinder(origin: [f64; 3], dir: [f64; 3], center: [f64; 2], radius: f64, height: f64) -> Option<f64> {
    let (ox, oy) = (origin[0] - center[0], origin[1] - center[1]);
    let a = dir[0] * dir[0] + dir[1] * dir[1];
    if a <= 0.0 {
        return None;
    }
    let b = ox * dir[0] + oy * dir[1];
    let c = ox * ox + oy * oy - radius * radius;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / a;
    if t <= 0.0 {
        return None;
    }
    let z = origin[2] + t * dir[2];
    (0.0..=height).contains(&z).then_some(t)
}

/// Slab test against an axis-aligned box.
pub fn ray_box(origin: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        if dir[k] == 0.0 {
            if origin[k] < lo[k] || origin[k] > hi[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[k];
        let (mut t0, mut t1) = ((lo[k] - origin[k]) * inv, (hi[k] - origin[k]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
    }
    (t_near <= t_far && t_near > 0.0).then_some(t_near)
}

pub fn render_depth(state: &RobotState, terrain: &Terrain, n: usize) -> DepthImage {
    let cam = Camera::for_terrain(terrain);
    let origin = [state.x, state.y, cam.height];
    let mut data = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let dir = cam.ray_direction(state.yaw, n, row, col);
            let d = cast_ray(terrain, origin, dir).map_or(cam.range, |t| t.min(cam.range));
            data.push((d / cam.range) as f32);
        }
    }
    DepthImage(Tensor3 { height: n, width: n, channels: 1, data })
}

//! Per-step task rewards. Positions are planar, in meters, relative to the
//! episode origin.

pub const V_CAP: f64 = 0.002;

/// Symmetric clamp of a per-step displacement to `[-v_cap, v_cap]`.
#[inline]
pub fn f_vcap(r: f64, v_cap: f64) -> f64 {
    (-v_cap).max(r.min(v_cap))
}

#[inline]
fn norm(p: [f64; 2]) -> f64 {
    (p[0] * p[0] + p[1] * p[1]).sqrt()
}

#[inline]
fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    norm([a[0] - b[0], a[1] - b[1]])
}

/// Capped progress along world x.
pub fn reward_cliff(x_t: f64, x_prev: f64) -> f64 {
    f_vcap(x_t - x_prev, V_CAP)
}

/// Capped change in distance from the origin.
pub fn reward_maze_traversal(pos_t: [f64; 2], pos_prev: [f64; 2]) -> f64 {
    f_vcap(norm(pos_t) - norm(pos_prev), V_CAP)
}

/// Blend of goal progress and origin-distance progress, weighted by how far
/// along the origin-to-goal distance the robot currently is.
pub fn reward_goal_finding(pos_t: [f64; 2], pos_prev: [f64; 2], goal: [f64; 2]) -> f64 {
    let r_gf = f_vcap(dist(pos_prev, goal) - dist(pos_t, goal), V_CAP);
    let r_mt = reward_maze_traversal(pos_t, pos_prev);
    let w = (norm(pos_t) / norm(goal)).clamp(0.0, 1.0);
    (w * r_gf + (1.0 - w) * r_mt).clamp(-V_CAP, V_CAP)
}

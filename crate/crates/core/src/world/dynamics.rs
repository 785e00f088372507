//! Reduced-order quadruped body model.
//!
//! Joints track their targets under a rate limit. Legs in stance push the
//! body with a speed proportional to their hip swing rate; left/right speed
//! differences and abducted stance legs turn the body. Roll and pitch relax
//! (first order) towards side-to-side and front-to-back differences in knee
//! extension.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::tg::{Leg, MotorCommand, TgState, NUM_MOTORS};

pub const DT: f64 = 0.002;
pub const MOTOR_RATE_MAX: f64 = 10.0;
pub const LEG_LENGTH: f64 = 0.25;
pub const TRACK_WIDTH: f64 = 0.35;
pub const BODY_LENGTH: f64 = 0.45;
pub const ROLL_GAIN: f64 = 2.0;
pub const PITCH_GAIN: f64 = 2.0;
/// Time constant of the body attitude following the leg-extension target.
pub const ATTITUDE_TAU: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub roll: f64,
    pub pitch: f64,
    pub roll_rate: f64,
    pub pitch_rate: f64,
    pub motor_angles: [f64; NUM_MOTORS],
    pub tg: TgState,
    pub step_count: u32,
}

impl RobotState {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn imu(&self) -> [f64; 4] {
        [self.roll, self.pitch, self.roll_rate, self.pitch_rate]
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.yaw, self.roll, self.pitch, self.roll_rate, self.pitch_rate]
            .iter()
            .chain(&self.motor_angles)
            .all(|v| v.is_finite())
    }
}

/// A leg is in stance during the second half of its gait cycle.
pub fn in_stance(tg: &TgState, leg: Leg) -> bool {
    tg.leg_phase(leg) >= PI
}

pub fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: u32,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / f64::from(self.n)
        }
    }
}

/// Advance the body one control step. Uses `state.tg` to decide stance.
/// Returns `None` if the command is not finite.
pub fn dynamics_step(state: &RobotState, command: &MotorCommand, dt: f64) -> Option<RobotState> {
    if !command.is_finite() {
        return None;
    }
    let max_delta = MOTOR_RATE_MAX * dt;
    let old = state.motor_angles;
    let mut q = old;
    for (qj, &c) in q.iter_mut().zip(&command.0) {
        *qj += (c - *qj).clamp(-max_delta, max_delta);
    }

    let (mut all, mut left, mut right, mut front_lat, mut hind_lat) =
        (Mean::default(), Mean::default(), Mean::default(), Mean::default(), Mean::default());
    for leg in Leg::ALL {
        if !in_stance(&state.tg, leg) {
            continue;
        }
        let u = -LEG_LENGTH * (q[leg.hip()] - old[leg.hip()]) / dt;
        all.push(u);
        if leg.is_left() {
            left.push(u)
        } else {
            right.push(u)
        }
        let lateral = u * q[leg.abduction()].sin();
        if leg.is_front() {
            front_lat.push(lateral)
        } else {
            hind_lat.push(lateral)
        }
    }
    let v = all.get();
    let yaw_rate = (right.get() - left.get()) / TRACK_WIDTH + (front_lat.get() - hind_lat.get()) / BODY_LENGTH;

    let mut next = *state;
    next.x += v * state.yaw.cos() * dt;
    next.y += v * state.yaw.sin() * dt;
    next.yaw = wrap_angle(state.yaw + yaw_rate * dt);

    let ext = |leg: Leg| q[leg.knee()];
    let roll = ROLL_GAIN
        * (0.5 * (ext(Leg::FrontLeft) + ext(Leg::HindLeft)) - 0.5 * (ext(Leg::FrontRight) + ext(Leg::HindRight)));
    let pitch = PITCH_GAIN
        * (0.5 * (ext(Leg::FrontLeft) + ext(Leg::FrontRight)) - 0.5 * (ext(Leg::HindLeft) + ext(Leg::HindRight)));
    let k = (dt / ATTITUDE_TAU).min(1.0);
    let roll = state.roll + k * (roll - state.roll);
    let pitch = state.pitch + k * (pitch - state.pitch);
    next.roll_rate = (roll - state.roll) / dt;
    next.pitch_rate = (pitch - state.pitch) / dt;
    next.roll = roll;
    next.pitch = pitch;
    next.motor_angles = q;
    next.step_count += 1;
    Some(next)
}

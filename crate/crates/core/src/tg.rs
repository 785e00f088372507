//! Cyclic trot trajectory generator modulated by the low-level policy.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

pub const NUM_LEGS: usize = 4;
pub const NUM_MOTORS: usize = 12;

/// Trot phase offsets for (FL, FR, HL, HR). Diagonal pairs share a phase.
pub const LEG_PHASE_OFFSETS: [f64; NUM_LEGS] = [0.0, PI, PI, 0.0];

pub const FREQ_MIN: f64 = 1.0;
pub const FREQ_MAX: f64 = 4.0;
pub const SWING_AMP_MAX: f64 = 0.5;
pub const EXTENSION_AMP_MAX: f64 = 0.3;

pub const JOINT_LIMIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leg {
    FrontLeft = 0,
    FrontRight = 1,
    HindLeft = 2,
    HindRight = 3,
}

impl Leg {
    pub const ALL: [Leg; NUM_LEGS] = [Leg::FrontLeft, Leg::FrontRight, Leg::HindLeft, Leg::HindRight];

    pub fn is_left(self) -> bool {
        matches!(self, Leg::FrontLeft | Leg::HindLeft)
    }

    pub fn is_front(self) -> bool {
        matches!(self, Leg::FrontLeft | Leg::FrontRight)
    }

    pub fn abduction(self) -> usize {
        self as usize * 3
    }

    pub fn hip(self) -> usize {
        self as usize * 3 + 1
    }

    pub fn knee(self) -> usize {
        self as usize * 3 + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TgState {
    /// Radians in `[0, 2pi)`.
    pub phase: f64,
}

impl TgState {
    pub fn leg_phase(&self, leg: Leg) -> f64 {
        (self.phase + LEG_PHASE_OFFSETS[leg as usize]).rem_euclid(TAU)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TgParams {
    pub frequency: f64,
    pub swing_amplitude: f64,
    pub extension_amplitude: f64,
}

impl TgParams {
    /// Affine map from policy outputs in `[-1, 1]` onto the parameter ranges.
    pub fn from_unit(raw: [f32; 3]) -> Self {
        let unit = |v: f32| (f64::from(v).clamp(-1.0, 1.0) + 1.0) * 0.5;
        Self {
            frequency: FREQ_MIN + unit(raw[0]) * (FREQ_MAX - FREQ_MIN),
            swing_amplitude: unit(raw[1]) * SWING_AMP_MAX,
            extension_amplitude: unit(raw[2]) * EXTENSION_AMP_MAX,
        }
    }
}

/// Twelve joint targets ordered (FL, FR, HL, HR) x (abduction, hip swing, knee extension).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotorCommand(pub [f64; NUM_MOTORS]);

impl MotorCommand {
    /// Sum of generator and residual, clamped to the joint limits.
    pub fn combine(tg: &MotorCommand, residual: &[f64; NUM_MOTORS]) -> Self {
        let mut out = [0.0; NUM_MOTORS];
        for ((o, a), r) in out.iter_mut().zip(&tg.0).zip(residual) {
            *o = (a + r).clamp(-JOINT_LIMIT, JOINT_LIMIT);
        }
        MotorCommand(out)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

fn wrap_phase(phase: f64) -> f64 {
    let p = phase.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2pi for tiny negative inputs
    if p >= TAU {
        0.0
    } else {
        p
    }
}

pub fn tg_step(state: TgState, params: &TgParams, dt: f64) -> (MotorCommand, TgState) {
    let next = TgState { phase: wrap_phase(state.phase + TAU * params.frequency * dt) };
    let mut cmd = [0.0; NUM_MOTORS];
    for leg in Leg::ALL {
        let (s, c) = next.leg_phase(leg).sin_cos();
        cmd[leg.hip()] = params.swing_amplitude * s;
        cmd[leg.knee()] = params.extension_amplitude * c;
    }
    (MotorCommand(cmd), next)
}

pub fn tg_observe(state: &TgState) -> [f64; 2] {
    let (s, c) = state.phase.sin_cos();
    [s, c]
}

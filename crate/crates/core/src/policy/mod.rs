//! The two-level policy, its parameter container and the episode executor.

pub mod arch;
mod episode;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use arch::{
    duration_from_unit, ll_arch, HlArch, HlMode, PolicyArch, PolicyKind, DURATION_MAX, DURATION_MIN, LL_OUTPUT_DIM,
    LL_PROPRIO_DIM, RESIDUAL_SCALE,
};
pub use episode::{run_episode, Episode, EpisodeOptions, EpisodeTrace, TraceStep};

use crate::nnet::{dense_into, flatten_params, Network, NnetError, Tensor3};
use crate::stats::RunningStats;
use crate::tg::{tg_observe, tg_step, MotorCommand, TgParams, TgState, NUM_MOTORS};
use crate::world::{DepthImage, RobotState, WorldError, DT};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transfer error: {0}")]
    Transfer(String),
    #[error("episode aborted: non-finite {what} at step {step}")]
    NonFinite { step: u32, what: &'static str },
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    World(#[from] WorldError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    Zero,
    /// Gaussian weights (biases zero) for the vision networks. The low level
    /// always starts at zero.
    Gaussian { std: f32 },
}

/// Fixed affine normalisation applied to low-level observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsNorm {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// Text formats widen each value to f64 so that parsing back is exact.
mod f32_via_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f32], s: S) -> Result<S::Ok, S::Error> {
        let wide: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
        wide.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f32>, D::Error> {
        Ok(Vec::<f64>::deserialize(d)?.into_iter().map(|x| x as f32).collect())
    }
}

/// Everything needed to rebuild a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub arch: PolicyArch,
    /// Vision trunk followed by the HL head (or the flat controller).
    #[serde(with = "f32_via_f64")]
    pub theta_hl: Vec<f32>,
    #[serde(with = "f32_via_f64")]
    pub theta_ll: Vec<f32>,
    pub freeze_ll: bool,
    #[serde(default)]
    pub obs_norm: Option<ObsNorm>,
}

impl PolicyParams {
    pub fn init(arch: PolicyArch, init: InitScheme, seed: u64) -> Result<Self> {
        arch.validate().map_err(PolicyError::Config)?;
        let mut trunk = Network::new(arch.hl.trunk())?;
        let mut upper = Network::new(arch.upper_arch())?;
        if let InitScheme::Gaussian { std } = init {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            trunk.init_gaussian(&mut rng, std);
            upper.init_gaussian(&mut rng, std);
        }
        let mut theta_hl = flatten_params(&trunk).values;
        theta_hl.extend_from_slice(&flatten_params(&upper).values);
        let theta_ll = vec![0.0; arch.ll_param_count()];
        Ok(Self { arch, theta_hl, theta_ll, freeze_ll: false, obs_norm: None })
    }

    pub fn param_count(&self) -> usize {
        self.theta_hl.len() + self.theta_ll.len()
    }

    /// HL then LL, as one vector for the optimizer.
    pub fn flat_vector(&self) -> Vec<f64> {
        self.theta_hl.iter().chain(&self.theta_ll).map(|&v| f64::from(v)).collect()
    }

    /// `true` for coordinates the optimizer must leave untouched.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.theta_hl.len()];
        mask.resize(self.param_count(), self.freeze_ll);
        mask
    }

    /// Same architecture, parameters replaced by `theta` (cast to f32).
    pub fn with_flat_vector(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.param_count() {
            return Err(NnetError::ParamLength { expected: self.param_count(), actual: theta.len() }.into());
        }
        let (hl, ll) = theta.split_at(self.theta_hl.len());
        let mut out = self.clone();
        out.theta_hl = hl.iter().map(|&v| v as f32).collect();
        // frozen LL values are kept verbatim rather than round-tripped
        if !self.freeze_ll {
            out.theta_ll = ll.iter().map(|&v| v as f32).collect();
        }
        Ok(out)
    }
}

/// Build a new policy for `new_arch` that reuses (and freezes) a trained low level.
pub fn make_transfer_policy(
    pretrained: &PolicyParams,
    new_arch: PolicyArch,
    init: InitScheme,
    seed: u64,
) -> Result<PolicyParams> {
    if pretrained.arch.kind != PolicyKind::Hierarchical || new_arch.kind != PolicyKind::Hierarchical {
        return Err(PolicyError::Transfer("only hierarchical policies have a transferable low level".into()));
    }
    if pretrained.arch.hl.latent_dim != new_arch.hl.latent_dim {
        return Err(PolicyError::Transfer(format!(
            "latent dimension mismatch: pretrained low level takes {}, new high level emits {}",
            pretrained.arch.hl.latent_dim, new_arch.hl.latent_dim
        )));
    }
    let mut params = PolicyParams::init(new_arch, init, seed)?;
    params.theta_ll = pretrained.theta_ll.clone();
    params.obs_norm = pretrained.obs_norm.clone();
    params.freeze_ll = true;
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HlOutput {
    pub duration: u32,
    pub latent: Vec<f32>,
}

/// Low-level observation; flattened as latent, TG phase, IMU, motor angles.
#[derive(Debug, Clone, PartialEq)]
pub struct LlObservation<'a> {
    pub latent: &'a [f32],
    pub tg_state: [f64; 2],
    pub imu: [f64; 4],
    pub motor_angles: &'a [f64; NUM_MOTORS],
}

impl LlObservation<'_> {
    pub fn from_state<'a>(latent: &'a [f32], state: &'a RobotState) -> LlObservation<'a> {
        LlObservation { latent, tg_state: tg_observe(&state.tg), imu: state.imu(), motor_angles: &state.motor_angles }
    }

    pub fn write_to(&self, out: &mut Vec<f32>) {
        out.clear();
        out.extend_from_slice(self.latent);
        out.extend(self.tg_state.iter().chain(&self.imu).chain(self.motor_angles).map(|&v| v as f32));
    }
}

/// Residuals in radians and TG parameters from the clipped 15-d output.
pub fn decode_ll_output(raw: &[f32; LL_OUTPUT_DIM]) -> ([f64; NUM_MOTORS], TgParams) {
    let mut residual = [0.0; NUM_MOTORS];
    for (r, &o) in residual.iter_mut().zip(raw) {
        *r = RESIDUAL_SCALE * f64::from(o.clamp(-1.0, 1.0));
    }
    (residual, TgParams::from_unit([raw[12], raw[13], raw[14]]))
}

/// Reusable buffers for the per-step control loop.
#[derive(Debug, Default)]
pub struct Scratch {
    obs: Vec<f32>,
    out: [f32; LL_OUTPUT_DIM],
    obs_stats: Option<RunningStats>,
}

impl Scratch {
    /// Also accumulate statistics of the raw low-level observations.
    pub fn collecting(dim: usize) -> Self {
        Self { obs_stats: Some(RunningStats::new(dim)), ..Self::default() }
    }

    pub fn take_obs_stats(&mut self) -> Option<RunningStats> {
        self.obs_stats.take()
    }
}

/// A ready-to-run policy built from [`PolicyParams`].
#[derive(Debug, Clone)]
pub struct Policy {
    arch: PolicyArch,
    trunk: Network,
    upper: Network,
    ll: Option<Network>,
    freeze_ll: bool,
    obs_norm: Option<ObsNorm>,
}

impl Policy {
    pub fn from_params(params: &PolicyParams) -> Result<Self> {
        let arch = &params.arch;
        arch.validate().map_err(PolicyError::Config)?;
        let mut trunk = Network::new(arch.hl.trunk())?;
        let mut upper = Network::new(arch.upper_arch())?;
        if params.theta_hl.len() != trunk.param_count() + upper.param_count() {
            return Err(NnetError::ParamLength {
                expected: trunk.param_count() + upper.param_count(),
                actual: params.theta_hl.len(),
            }
            .into());
        }
        let (t, u) = params.theta_hl.split_at(trunk.param_count());
        trunk.load(t)?;
        upper.load(u)?;
        let ll = match arch.kind {
            PolicyKind::Hierarchical => {
                let mut ll = Network::new(ll_arch(arch.hl.latent_dim))?;
                ll.load(&params.theta_ll)?;
                Some(ll)
            }
            PolicyKind::Flat if !params.theta_ll.is_empty() => {
                return Err(PolicyError::Config("flat policy has no low-level parameters".into()));
            }
            PolicyKind::Flat => None,
        };
        if let Some(norm) = &params.obs_norm {
            let dim = arch.hl.latent_dim + LL_PROPRIO_DIM;
            if arch.kind != PolicyKind::Hierarchical || norm.mean.len() != dim || norm.inv_std.len() != dim {
                return Err(PolicyError::Config("observation normaliser does not match the low level".into()));
            }
        }
        Ok(Self {
            arch: arch.clone(),
            trunk,
            upper,
            ll,
            freeze_ll: params.freeze_ll,
            obs_norm: params.obs_norm.clone(),
        })
    }

    pub fn params(&self) -> PolicyParams {
        let mut theta_hl = flatten_params(&self.trunk).values;
        theta_hl.extend_from_slice(self.upper.params());
        PolicyParams {
            arch: self.arch.clone(),
            theta_hl,
            theta_ll: self.ll.as_ref().map(|n| n.params().to_vec()).unwrap_or_default(),
            freeze_ll: self.freeze_ll,
            obs_norm: self.obs_norm.clone(),
        }
    }

    pub fn arch(&self) -> &PolicyArch {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.hl.latent_dim
    }

    pub fn image_size(&self) -> usize {
        self.arch.hl.image_size
    }

    fn features(&self, image: &DepthImage) -> Result<Vec<f32>> {
        let n = self.arch.hl.image_size;
        if image.0.height != n || image.0.width != n || image.0.channels != 1 {
            return Err(PolicyError::Config(format!(
                "expected a {n}x{n}x1 depth image, got {}x{}x{}",
                image.0.height, image.0.width, image.0.channels
            )));
        }
        Ok(self.trunk.forward(&image.0)?.data)
    }

    fn check_task_input(&self, task_input: &[f32]) -> Result<()> {
        if task_input.len() != self.arch.hl.task_input_dim {
            return Err(PolicyError::Config(format!(
                "expected {} task inputs, got {}",
                self.arch.hl.task_input_dim,
                task_input.len()
            )));
        }
        Ok(())
    }

    /// Raw clipped HL outputs `[o_duration, latent...]`.
    pub fn hl_raw(&self, image: &DepthImage, task_input: &[f32]) -> Result<Vec<f32>> {
        if self.arch.kind != PolicyKind::Hierarchical {
            return Err(PolicyError::Config("flat policy has no high level".into()));
        }
        self.check_task_input(task_input)?;
        let mut x = self.features(image)?;
        x.extend_from_slice(task_input);
        Ok(self.upper.forward(&Tensor3::from_vec(x))?.data)
    }

    pub fn hl_forward(&self, image: &DepthImage, task_input: &[f32]) -> Result<HlOutput> {
        let o = self.hl_raw(image, task_input)?;
        let duration = match self.arch.hl_mode {
            HlMode::Variable => duration_from_unit(o[0]),
            HlMode::Every(n) => n,
        };
        Ok(HlOutput { duration, latent: o[1..].to_vec() })
    }

    /// Low-level network output, before decoding.
    pub fn ll_raw(&self, obs: &LlObservation<'_>, scratch: &mut Scratch) -> Result<[f32; LL_OUTPUT_DIM]> {
        let ll = self.ll.as_ref().ok_or_else(|| PolicyError::Config("flat policy has no low level".into()))?;
        if obs.latent.len() != self.latent_dim() {
            return Err(PolicyError::Config(format!(
                "expected latent of dim {}, got {}",
                self.latent_dim(),
                obs.latent.len()
            )));
        }
        obs.write_to(&mut scratch.obs);
        if let Some(stats) = scratch.obs_stats.as_mut() {
            stats.push(&scratch.obs);
        }
        if let Some(norm) = &self.obs_norm {
            for ((v, m), s) in scratch.obs.iter_mut().zip(&norm.mean).zip(&norm.inv_std) {
                *v = (*v - m) * s;
            }
        }
        let p = ll.params();
        let (w, b) = p.split_at(p.len() - LL_OUTPUT_DIM);
        dense_into(&scratch.obs, w, b, &mut scratch.out)?;
        for v in &mut scratch.out {
            *v = v.clamp(-1.0, 1.0);
        }
        Ok(scratch.out)
    }

    pub fn ll_forward(&self, obs: &LlObservation<'_>, scratch: &mut Scratch) -> Result<([f64; NUM_MOTORS], TgParams)> {
        Ok(decode_ll_output(&self.ll_raw(obs, scratch)?))
    }

    /// One low-level control step: LL, then the TG, combined into a motor command.
    pub fn low_level_act(
        &self,
        latent: &[f32],
        state: &RobotState,
        scratch: &mut Scratch,
    ) -> Result<(MotorCommand, TgState)> {
        let (residual, p_tg) = self.ll_forward(&LlObservation::from_state(latent, state), scratch)?;
        let (a_tg, tg) = tg_step(state.tg, &p_tg, DT);
        Ok((MotorCommand::combine(&a_tg, &residual), tg))
    }

    /// Flat baseline step: image and proprioception straight to the motor command.
    pub fn flat_act(
        &self,
        image: &DepthImage,
        task_input: &[f32],
        state: &RobotState,
        scratch: &mut Scratch,
    ) -> Result<(MotorCommand, TgState)> {
        if self.arch.kind != PolicyKind::Flat {
            return Err(PolicyError::Config("not a flat policy".into()));
        }
        self.check_task_input(task_input)?;
        let mut x = self.features(image)?;
        x.extend_from_slice(task_input);
        LlObservation::from_state(&[], state).write_to(&mut scratch.obs);
        x.extend_from_slice(&scratch.obs);
        let o = self.upper.forward(&Tensor3::from_vec(x))?.data;
        let mut raw = [0.0f32; LL_OUTPUT_DIM];
        raw.copy_from_slice(&o);
        let (residual, p_tg) = decode_ll_output(&raw);
        let (a_tg, tg) = tg_step(state.tg, &p_tg, DT);
        Ok((MotorCommand::combine(&a_tg, &residual), tg))
    }
}

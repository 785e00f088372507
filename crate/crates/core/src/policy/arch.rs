use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nnet::{LayerKind, NetworkArch, PoolMode, Shape};
use crate::tg::NUM_MOTORS;

/// Low-level proprioceptive inputs besides the latent: TG phase (2), IMU (4), motor angles (12).
pub const LL_PROPRIO_DIM: usize = 2 + 4 + NUM_MOTORS;
/// Residuals for every motor plus three TG parameters.
pub const LL_OUTPUT_DIM: usize = NUM_MOTORS + 3;
pub const RESIDUAL_SCALE: f64 = 0.3;
pub const DURATION_MIN: u32 = 50;
pub const DURATION_MAX: u32 = 300;
pub const SUPPORTED_LATENT_DIMS: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Hierarchical,
    /// Non-hierarchical baseline: the same CNN evaluated every step, feeding a
    /// two-layer controller together with all proprioceptive inputs.
    Flat,
}

/// How often the high level runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum HlMode {
    /// The high level picks its own duration in `[50, 300]`.
    #[default]
    Variable,
    /// Fixed interval; the duration head is ignored.
    Every(u32),
}

impl FromStr for HlMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "variable" || s == "var" {
            return Ok(HlMode::Variable);
        }
        let n = s.strip_prefix("every:").unwrap_or(s);
        match n.parse::<u32>() {
            Ok(n) if n > 0 => Ok(HlMode::Every(n)),
            _ => Err(format!("invalid high-level mode `{s}` (expected `variable` or `every:<n>`)")),
        }
    }
}

impl fmt::Display for HlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HlMode::Variable => f.write_str("variable"),
            HlMode::Every(n) => write!(f, "every:{n}"),
        }
    }
}

impl TryFrom<String> for HlMode {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<HlMode> for String {
    fn from(m: HlMode) -> Self {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HlArch {
    pub image_size: usize,
    pub conv_channels: Vec<usize>,
    pub use_pool: bool,
    #[serde(default)]
    pub pool: PoolMode,
    pub feature_dim: usize,
    #[serde(default)]
    pub extra_fc: Vec<usize>,
    pub task_input_dim: usize,
    pub latent_dim: usize,
}

impl HlArch {
    /// The standard 16x16 network: convs 4/8/8, 2x2 pool, 10-d tanh feature.
    pub fn standard(task_input_dim: usize, latent_dim: usize) -> Self {
        Self {
            image_size: 16,
            conv_channels: vec![4, 8, 8],
            use_pool: true,
            pool: PoolMode::Max,
            feature_dim: 10,
            extra_fc: Vec::new(),
            task_input_dim,
            latent_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        1 + self.latent_dim
    }

    /// Image -> feature vector (after tanh, and any extra tanh layers).
    pub fn trunk(&self) -> NetworkArch {
        let mut layers: Vec<LayerKind> =
            self.conv_channels.iter().map(|&c| LayerKind::Conv3x3 { out_channels: c }).collect();
        if self.use_pool {
            layers.push(LayerKind::Pool2x2 { mode: self.pool });
        }
        layers.push(LayerKind::Dense { out: self.feature_dim });
        layers.push(LayerKind::Tanh);
        for &d in &self.extra_fc {
            layers.push(LayerKind::Dense { out: d });
            layers.push(LayerKind::Tanh);
        }
        NetworkArch { input: Shape::new(self.image_size, self.image_size, 1), layers }
    }

    pub fn trunk_output_dim(&self) -> usize {
        self.extra_fc.last().copied().unwrap_or(self.feature_dim)
    }

    /// (features ++ task input) -> clipped `[duration, latent...]`.
    pub fn head(&self) -> NetworkArch {
        NetworkArch {
            input: Shape::vector(self.trunk_output_dim() + self.task_input_dim),
            layers: vec![LayerKind::Dense { out: self.output_dim() }, LayerKind::Clip],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !SUPPORTED_LATENT_DIMS.contains(&self.latent_dim) {
            return Err(format!("latent_dim must be one of {SUPPORTED_LATENT_DIMS:?}, got {}", self.latent_dim));
        }
        if self.image_size < 3 {
            return Err(format!("image_size {} is too small", self.image_size));
        }
        if self.feature_dim == 0 || self.extra_fc.contains(&0) {
            return Err("layer widths must be positive".into());
        }
        self.trunk().specs().map_err(|e| e.to_string())?;
        Ok(())
    }
}

pub fn ll_arch(latent_dim: usize) -> NetworkArch {
    NetworkArch {
        input: Shape::vector(latent_dim + LL_PROPRIO_DIM),
        layers: vec![LayerKind::Dense { out: LL_OUTPUT_DIM }, LayerKind::Clip],
    }
}

/// Second half of the flat baseline: (features ++ task ++ proprio) -> hidden -> actions.
pub fn flat_controller_arch(hl: &HlArch, hidden: usize) -> NetworkArch {
    NetworkArch {
        input: Shape::vector(hl.trunk_output_dim() + hl.task_input_dim + LL_PROPRIO_DIM),
        layers: vec![
            LayerKind::Dense { out: hidden },
            LayerKind::Tanh,
            LayerKind::Dense { out: LL_OUTPUT_DIM },
            LayerKind::Clip,
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyArch {
    #[serde(default)]
    pub kind: PolicyKind,
    pub hl: HlArch,
    #[serde(default)]
    pub hl_mode: HlMode,
    #[serde(default = "default_flat_hidden")]
    pub flat_hidden: usize,
}

fn default_flat_hidden() -> usize {
    10
}

impl PolicyArch {
    pub fn hierarchical(hl: HlArch) -> Self {
        Self { kind: PolicyKind::Hierarchical, hl, hl_mode: HlMode::Variable, flat_hidden: default_flat_hidden() }
    }

    pub fn flat(hl: HlArch) -> Self {
        Self { kind: PolicyKind::Flat, ..Self::hierarchical(hl) }
    }

    /// Network holding `theta_hl`: the HL head, or the flat controller.
    pub fn upper_arch(&self) -> NetworkArch {
        match self.kind {
            PolicyKind::Hierarchical => self.hl.head(),
            PolicyKind::Flat => flat_controller_arch(&self.hl, self.flat_hidden),
        }
    }

    pub fn hl_param_count(&self) -> usize {
        self.hl.trunk().param_count().unwrap_or(0) + self.upper_arch().param_count().unwrap_or(0)
    }

    pub fn ll_param_count(&self) -> usize {
        match self.kind {
            PolicyKind::Hierarchical => ll_arch(self.hl.latent_dim).param_count().unwrap_or(0),
            PolicyKind::Flat => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.hl_param_count() + self.ll_param_count()
    }

    pub fn validate(&self) -> Result<(), String> {
        self.hl.validate()?;
        if self.kind == PolicyKind::Flat && self.flat_hidden == 0 {
            return Err("flat_hidden must be positive".into());
        }
        Ok(())
    }
}

/// Linear map of the clipped duration output onto `[50, 300]` steps,
/// rounded half away from zero.
pub fn duration_from_unit(o: f32) -> u32 {
    let o = f64::from(o).clamp(-1.0, 1.0);
    let span = f64::from(DURATION_MAX - DURATION_MIN);
    (f64::from(DURATION_MIN) + (o + 1.0) * 0.5 * span).round() as u32
}

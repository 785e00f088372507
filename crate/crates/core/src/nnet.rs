//! Forward-pass primitives for the policy networks.
//!
//! Everything here is a pure function of its inputs: convolution, pooling,
//! fully connected layers and the two output squashers. Networks keep all of
//! their weights in a single [`FlatParams`] vector so the optimizer can
//! perturb them as one point in parameter space.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnetError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: parameter vector has {actual} values, layout needs {expected}")]
    ParamLength { expected: usize, actual: usize },
    #[error("checkpoint error: {0}")]
    Layout(String),
}

pub type Result<T> = std::result::Result<T, NnetError>;

/// Height x width x channels. Plain vectors are `1 x 1 x n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub const fn vector(len: usize) -> Self {
        Self::new(1, 1, len)
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense row-major `(h, w, c)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(NnetError::Config(format!(
                "tensor {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { height: shape.height, width: shape.width, channels: shape.channels, data: vec![0.0; shape.len()] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self { height: 1, width: 1, channels: data.len(), data }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width, self.channels)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// 3x3 convolution, stride 1, no padding.
///
/// `weights` is laid out `[dy][dx][c_in][c_out]`; the output channel count is
/// `bias.len()`.
pub fn conv3x3_valid(input: &Tensor3, weights: &[f32], bias: &[f32]) -> Result<Tensor3> {
    let c_in = input.channels;
    let c_out = bias.len();
    if weights.len() != 9 * c_in * c_out {
        return Err(NnetError::Config(format!("conv kernel has {} weights, expected 9*{c_in}*{c_out}", weights.len())));
    }
    if input.height < 3 || input.width < 3 {
        return Err(NnetError::Config(format!(
            "conv input {}x{} is smaller than the 3x3 kernel",
            input.height, input.width
        )));
    }
    let (oh, ow) = (input.height - 2, input.width - 2);
    let mut out = vec![0.0f32; oh * ow * c_out];
    for y in 0..oh {
        for x in 0..ow {
            let acc = &mut out[(y * ow + x) * c_out..][..c_out];
            acc.copy_from_slice(bias);
            for dy in 0..3 {
                for dx in 0..3 {
                    let px = &input.data[((y + dy) * input.width + x + dx) * c_in..][..c_in];
                    let block = &weights[(dy * 3 + dx) * c_in * c_out..][..c_in * c_out];
                    for (i, &v) in px.iter().enumerate() {
                        let row = &block[i * c_out..][..c_out];
                        for (a, &w) in acc.iter_mut().zip(row) {
                            *a += v * w;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor3 { height: oh, width: ow, channels: c_out, data: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    Max,
    Mean,
}

/// 2x2 pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn pool2x2s2(input: &Tensor3, mode: PoolMode) -> Tensor3 {
    let (oh, ow, c) = (input.height / 2, input.width / 2, input.channels);
    let mut out = vec![0.0f32; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let a = input.at(2 * y, 2 * x, ch);
                let b = input.at(2 * y, 2 * x + 1, ch);
                let d = input.at(2 * y + 1, 2 * x, ch);
                let e = input.at(2 * y + 1, 2 * x + 1, ch);
                out[(y * ow + x) * c + ch] = match mode {
                    PoolMode::Max => a.max(b).max(d).max(e),
                    PoolMode::Mean => (a + b + d + e) * 0.25,
                };
            }
        }
    }
    Tensor3 { height: oh, width: ow, channels: c, data: out }
}

pub fn maxpool2x2s2(input: &Tensor3) -> Tensor3 {
    pool2x2s2(input, PoolMode::Max)
}

/// `out = W^T in + b` with `weights` laid out `[n_in][n_out]`.
pub fn dense(input: &[f32], weights: &[f32], bias: &[f32]) -> Result<Vec<f32>> {
    let mut out = vec![0.0; bias.len()];
    dense_into(input, weights, bias, &mut out)?;
    Ok(out)
}

/// Allocation-free variant of [`dense`] for the per-step control loop.
pub fn dense_into(input: &[f32], weights: &[f32], bias: &[f32], out: &mut [f32]) -> Result<()> {
    let n_out = bias.len();
    if weights.len() != input.len() * n_out || out.len() != n_out {
        return Err(NnetError::Config(format!("dense layer {}->{} got {} weights", input.len(), n_out, weights.len())));
    }
    out.copy_from_slice(bias);
    for (i, &v) in input.iter().enumerate() {
        let row = &weights[i * n_out..][..n_out];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += v * w;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squash {
    Tanh,
    ClipUnit,
}

pub fn tanh_clip(input: &mut [f32], mode: Squash) {
    match mode {
        Squash::Tanh => input.iter_mut().for_each(|v| *v = v.tanh()),
        Squash::ClipUnit => input.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv3x3 { out_channels: usize },
    Pool2x2 { mode: PoolMode },
    Dense { out: usize },
    Tanh,
    Clip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub param_count: usize,
}

impl LayerSpec {
    fn chain(kind: LayerKind, input: Shape) -> Result<Self> {
        let (out_shape, param_count) = match kind {
            LayerKind::Conv3x3 { out_channels } => {
                if input.height < 3 || input.width < 3 {
                    return Err(NnetError::Config(format!(
                        "conv layer needs at least 3x3 input, got {}x{}",
                        input.height, input.width
                    )));
                }
                (
                    Shape::new(input.height - 2, input.width - 2, out_channels),
                    9 * input.channels * out_channels + out_channels,
                )
            }
            LayerKind::Pool2x2 { .. } => (Shape::new(input.height / 2, input.width / 2, input.channels), 0),
            LayerKind::Dense { out } => (Shape::vector(out), input.len() * out + out),
            LayerKind::Tanh | LayerKind::Clip => (input, 0),
        };
        if out_shape.is_empty() {
            return Err(NnetError::Config(format!("{kind:?} on {input:?} yields an empty output")));
        }
        Ok(Self { kind, in_shape: input, out_shape, param_count })
    }
}

/// Input shape plus layer list; enough to rebuild a network around a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkArch {
    pub input: Shape,
    pub layers: Vec<LayerKind>,
}

impl NetworkArch {
    pub fn specs(&self) -> Result<Vec<LayerSpec>> {
        let mut shape = self.input;
        self.layers
            .iter()
            .map(|&kind| {
                let spec = LayerSpec::chain(kind, shape)?;
                shape = spec.out_shape;
                Ok(spec)
            })
            .collect()
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.specs()?.iter().map(|s| s.param_count).sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSegment {
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
}

/// All trainable values of a network in layer order, weights before biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    pub values: Vec<f32>,
    pub layout: Vec<ParamSegment>,
}

impl FlatParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn layout_for(specs: &[LayerSpec]) -> Vec<ParamSegment> {
    let mut offset = 0;
    specs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.param_count > 0)
        .map(|(layer, s)| {
            let seg = ParamSegment { layer, offset, len: s.param_count };
            offset += s.param_count;
            seg
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: NetworkArch,
    specs: Vec<LayerSpec>,
    params: FlatParams,
}

impl Network {
    /// Zero-initialised network.
    pub fn new(arch: NetworkArch) -> Result<Self> {
        let specs = arch.specs()?;
        let layout = layout_for(&specs);
        let total = specs.iter().map(|s| s.param_count).sum();
        Ok(Self { arch, specs, params: FlatParams { values: vec![0.0; total], layout } })
    }

    pub fn arch(&self) -> &NetworkArch {
        &self.arch
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_shape(&self) -> Shape {
        self.arch.input
    }

    pub fn output_shape(&self) -> Shape {
        self.specs.last().map_or(self.arch.input, |s| s.out_shape)
    }

    pub fn params(&self) -> &[f32] {
        &self.params.values
    }

    /// Overwrite all parameters from a flat slice.
    pub fn load(&mut self, values: &[f32]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(NnetError::ParamLength { expected: self.params.len(), actual: values.len() });
        }
        self.params.values.copy_from_slice(values);
        Ok(())
    }

    /// Gaussian init for weights; biases stay zero.
    pub fn init_gaussian<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f32) {
        let normal = Normal::new(0.0f32, std).expect("finite std");
        for seg in &self.params.layout {
            let bias_len = match self.specs[seg.layer].kind {
                LayerKind::Conv3x3 { out_channels } => out_channels,
                LayerKind::Dense { out } => out,
                _ => 0,
            };
            for v in &mut self.params.values[seg.offset..seg.offset + seg.len - bias_len] {
                *v = normal.sample(rng);
            }
        }
    }

    fn layer_params(&self, layer: usize) -> &[f32] {
        self.params
            .layout
            .iter()
            .find(|s| s.layer == layer)
            .map_or(&[][..], |s| &self.params.values[s.offset..s.offset + s.len])
    }

    pub fn forward(&self, input: &Tensor3) -> Result<Tensor3> {
        if input.shape() != self.arch.input || input.data.len() != self.arch.input.len() {
            return Err(NnetError::Config(format!("network expects {:?}, got {:?}", self.arch.input, input.shape())));
        }
        let mut x = input.clone();
        for (i, spec) in self.specs.iter().enumerate() {
            let p = self.layer_params(i);
            x = match spec.kind {
                LayerKind::Conv3x3 { out_channels } => {
                    let (w, b) = p.split_at(p.len() - out_channels);
                    conv3x3_valid(&x, w, b)?
                }
                LayerKind::Pool2x2 { mode } => pool2x2s2(&x, mode),
                LayerKind::Dense { out } => {
                    let (w, b) = p.split_at(p.len() - out);
                    Tensor3::from_vec(dense(&x.data, w, b)?)
                }
                LayerKind::Tanh => {
                    tanh_clip(&mut x.data, Squash::Tanh);
                    x
                }
                LayerKind::Clip => {
                    tanh_clip(&mut x.data, Squash::ClipUnit);
                    x
                }
            };
        }
        Ok(x)
    }

    pub fn forward_vec(&self, input: &[f32]) -> Result<Vec<f32>> {
        Ok(self.forward(&Tensor3::from_vec(input.to_vec()))?.data)
    }
}

pub fn flatten_params(network: &Network) -> FlatParams {
    network.params.clone()
}

pub fn unflatten_params(flat: FlatParams, arch: &NetworkArch) -> Result<Network> {
    let mut net = Network::new(arch.clone())?;
    if flat.layout != net.params.layout {
        return Err(NnetError::Layout("parameter layout does not match architecture".into()));
    }
    if flat.values.len() != net.params.len() {
        return Err(NnetError::ParamLength { expected: net.params.len(), actual: flat.values.len() });
    }
    net.params = flat;
    Ok(net)
}

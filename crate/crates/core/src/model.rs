//! Sequential CNNs whose weighted layers run on a selectable kernel.
//!
//! Training builds a [`Graph`] per step through [`Model::forward`]; the
//! phase decides whether a weighted layer runs exact kernels, the proxy plus
//! injected error, or the accurate hardware simulation with proxy
//! gradients. [`Model::predict`] runs the accurate kernels without a graph.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analog::{analog_forward, calibrate_clip, group_sums, AnalogClips, Grouping, DEFAULT_ADC_BITS, DEFAULT_LINEAR_GROUP};
use crate::error::{Error, Result};
use crate::exact::{self, ConvParams};
use crate::graph::{Graph, Pointwise, Var};
use crate::inject::{fit_type1, fit_type2, AnalogInject, ErrorModelType1, ErrorModelType2, InjectType1, Type1Options};
use crate::mult::{am_conv2d, am_linear, fake_quantize8, MultTable, DEFAULT_DROP_K};
use crate::proxy::{AnalogAct, ScAct};
use crate::rng::{seeded, NoiseKey};
use crate::sc::{sc_conv2d, sc_linear, ScConfig, ScScales, DEFAULT_STREAM_LENGTH};
use crate::tensor::Tensor;

/// Forward implementation of a weighted layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelMode {
    Exact,
    Sc,
    ApproxMult,
    Analog,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    Maxpool,
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub mode: KernelMode,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if ![1, 3, 5].contains(&kernel) {
                    return Err(Error::Config(format!("conv kernel size {kernel} not in {{1, 3, 5}}")));
                }
                if in_channels == 0 || out_channels == 0 || stride == 0 {
                    return Err(Error::Config("conv channels and stride must be positive".into()));
                }
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } if in_features == 0 || out_features == 0 => {
                return Err(Error::Config("linear features must be positive".into()));
            }
            _ => {}
        }
        Ok(())
    }

    fn weight_shape(&self) -> Option<(Vec<usize>, usize)> {
        match self.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((vec![out_channels, in_channels, kernel, kernel], in_channels * kernel * kernel)),
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], in_features)),
            _ => None,
        }
    }
}

/// Shape of the reference TinyConv network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_channels: usize,
    /// Square input side; must be divisible by 4.
    pub input_size: usize,
    /// Output channels of the three 3x3 convolutions.
    pub widths: [usize; 3],
    pub classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_size: 32,
            widths: [32, 32, 64],
            classes: 10,
        }
    }
}

impl ArchConfig {
    /// conv3x3-relu-pool, conv3x3-relu-pool, conv3x3-relu, flatten, linear.
    pub fn tiny_conv(&self, mode: KernelMode) -> Result<Vec<LayerSpec>> {
        if self.input_size == 0 || self.input_size % 4 != 0 {
            return Err(Error::Config(format!("input size {} must be a positive multiple of 4", self.input_size)));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let conv = |i, o| LayerKind::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let [a, b, c] = self.widths;
        let side = self.input_size / 4;
        let kinds = [
            conv(self.input_channels, a),
            LayerKind::Relu,
            LayerKind::Maxpool,
            conv(a, b),
            LayerKind::Relu,
            LayerKind::Maxpool,
            conv(b, c),
            LayerKind::Relu,
            LayerKind::Flatten,
            LayerKind::Linear {
                in_features: c * side * side,
                out_features: self.classes,
            },
        ];
        Ok(kinds.into_iter().map(|kind| LayerSpec { kind, mode }).collect())
    }
}

/// How SC layers map activations and weights into [0, 1].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScScaling {
    /// Native units: activations clamped to [0, 1], weights to [-1, 1].
    #[default]
    Unit,
    /// Activations by their calibrated maximum, weights by their max-abs.
    MaxAbs,
}

/// Settings of the three simulated hardware kinds.
#[derive(Clone, Debug)]
pub struct Hardware {
    pub sc: ScConfig,
    pub sc_scaling: ScScaling,
    pub table: Arc<MultTable>,
    pub adc_bits: u32,
    pub analog_group_size: usize,
    pub type1: Type1Options,
}

impl Default for Hardware {
    fn default() -> Self {
        Self {
            sc: ScConfig::new(DEFAULT_STREAM_LENGTH, 0).expect("default stream config"),
            sc_scaling: ScScaling::default(),
            table: Arc::new(MultTable::truncated(DEFAULT_DROP_K)),
            adc_bits: DEFAULT_ADC_BITS,
            analog_group_size: DEFAULT_LINEAR_GROUP,
            type1: Type1Options::default(),
        }
    }
}

/// Calibrated per-layer state: SC activation scale, ADC clips and the
/// error models.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerState {
    pub sc_x_scale: Option<f32>,
    pub analog_clips: Option<AnalogClips>,
    pub type1: Option<ErrorModelType1>,
    pub type2: Option<ErrorModelType2>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub state: LayerState,
}

/// Training phase of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Exact float kernels everywhere.
    Exact,
    /// Proxy forward plus calibrated injected error.
    Injection,
    /// Accurate hardware kernels forward, proxy gradients backward.
    Accurate,
}

/// Per-step forward options.
#[derive(Clone, Copy, Debug)]
pub struct StepCtx<'a> {
    pub hw: &'a Hardware,
    pub phase: Phase,
    /// Use the nonlinear proxy activations; otherwise the linear split.
    pub proxy: bool,
    /// Recompute the pointwise proxy and injection chain in the backward pass.
    pub checkpoint: bool,
    pub noise_seed: u64,
    pub step: u64,
    /// Refresh activation scales and ADC clips from this batch.
    pub refresh_scales: bool,
    /// Refit the error models from this batch (needs `phase == Accurate`).
    pub fit_errors: bool,
}

/// Output of [`Model::forward`]: logits and the parameter leaves in
/// [`Model::parameters`] order.
pub struct ForwardOut {
    pub logits: Var,
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub input_shape: [usize; 3],
}

fn nonzero_scale(v: f32) -> f32 {
    if v > 0.0 && v.is_finite() {
        v
    } else {
        1.0
    }
}

fn add_bias(mut t: Tensor, b: &Tensor) -> Tensor {
    let c = b.numel();
    let inner = t.numel() / t.shape()[0] / c;
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += b.data()[(i / inner) % c];
    }
    t
}

fn grouping(spec: &LayerSpec, hw: &Hardware) -> Grouping {
    match spec.kind {
        LayerKind::Conv2d { stride, pad, .. } => Grouping::Conv(ConvParams { stride, pad }),
        _ => Grouping::Linear {
            group_size: hw.analog_group_size,
        },
    }
}

/// Analog groups feeding one output element.
fn groups_per_output(spec: &LayerSpec, hw: &Hardware) -> usize {
    match spec.kind {
        LayerKind::Conv2d { in_channels, .. } => in_channels,
        LayerKind::Linear { in_features, .. } => in_features.div_ceil(hw.analog_group_size),
        _ => 0,
    }
}

/// Exact bias-free layer op on graph nodes.
fn apply(g: &mut Graph, spec: &LayerSpec, x: Var, w: Var) -> Result<Var> {
    match spec.kind {
        LayerKind::Conv2d { stride, pad, .. } => g.conv2d(x, w, None, ConvParams { stride, pad }),
        _ => g.linear(x, w, None),
    }
}

fn apply_chain(g: &mut Graph, chain: Vec<Pointwise>, inputs: &[Var], checkpoint: bool) -> Result<Var> {
    if checkpoint {
        return g.checkpointed_apply(chain, inputs);
    }
    let mut cur = inputs.to_vec();
    for f in chain {
        cur = vec![g.pointwise(f, &cur)?];
    }
    Ok(cur[0])
}

impl Model {
    /// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`), zero biases.
    pub fn new(specs: Vec<LayerSpec>, input_shape: [usize; 3], seed: u64) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            spec.validate()?;
            let (weight, bias) = match spec.weight_shape() {
                Some((shape, fan_in)) => {
                    let bound = (6.0 / fan_in as f32).sqrt();
                    let mut rng = seeded(&[seed, i as u64]);
                    let w = Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound));
                    (Some(w), Some(Tensor::zeros(&shape[..1])))
                }
                None => (None, None),
            };
            layers.push(Layer {
                spec,
                weight,
                bias,
                state: LayerState::default(),
            });
        }
        let model = Self { layers, input_shape };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn tiny_conv(arch: &ArchConfig, mode: KernelMode, seed: u64) -> Result<Self> {
        Self::new(
            arch.tiny_conv(mode)?,
            [arch.input_channels, arch.input_size, arch.input_size],
            seed,
        )
    }

    /// Dry-runs shapes through the layer list.
    fn check_shapes(&self) -> Result<()> {
        let mut shape = self.input_shape.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let bad = |what: String| Error::Config(format!("layer {i}: {what}"));
            shape = match l.spec.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if shape.len() != 3 || shape[0] != in_channels || shape[1] + 2 * pad < kernel {
                        return Err(bad(format!("conv expects {in_channels} channels, input is {shape:?}")));
                    }
                    let o = |s: usize| (s + 2 * pad - kernel) / stride + 1;
                    vec![out_channels, o(shape[1]), o(shape[2])]
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    if shape != [in_features] {
                        return Err(bad(format!("linear expects {in_features} features, input is {shape:?}")));
                    }
                    vec![out_features]
                }
                LayerKind::Relu => shape,
                LayerKind::Maxpool => {
                    if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                        return Err(bad(format!("maxpool needs even spatial dims, input is {shape:?}")));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerKind::Flatten => vec![shape.iter().product()],
            };
        }
        if shape.len() != 1 {
            return Err(Error::Config(format!("network output {shape:?} is not a logit vector")));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l.spec.kind {
                LayerKind::Linear { out_features, .. } => Some(out_features),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// Sets the kernel mode of every weighted layer.
    pub fn set_mode(&mut self, mode: KernelMode) {
        for l in &mut self.layers {
            l.spec.mode = mode;
        }
    }

    pub fn clear_state(&mut self) {
        for l in &mut self.layers {
            l.state = LayerState::default();
        }
    }

    /// Named parameters: `layers.<i>.weight` and `layers.<i>.bias`.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![];
        for (i, l) in self.layers.iter().enumerate() {
            if let (Some(w), Some(b)) = (&l.weight, &l.bias) {
                out.push((format!("layers.{i}.weight"), w));
                out.push((format!("layers.{i}.bias"), b));
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![];
        for l in &mut self.layers {
            if let (Some(w), Some(b)) = (&mut l.weight, &mut l.bias) {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 4 || x.shape()[1..] != self.input_shape {
            return Err(Error::shape(
                "model",
                format!("input {:?}, expected [N, {:?}]", x.shape(), self.input_shape),
            ));
        }
        Ok(())
    }

    /// Builds the training graph for one batch.
    pub fn forward(&mut self, g: &mut Graph, x: &Tensor, ctx: &StepCtx<'_>) -> Result<ForwardOut> {
        self.check_input(x)?;
        if ctx.fit_errors && ctx.phase != Phase::Accurate {
            return Err(Error::Invariant("error models are fitted on accurate forward passes only".into()));
        }
        let mut h = g.constant(x.clone());
        let mut params = vec![];
        let mut weighted = 0u32;
        for layer in &mut self.layers {
            h = match layer.spec.kind {
                LayerKind::Relu => g.relu(h),
                LayerKind::Maxpool => g.maxpool2x2(h)?,
                LayerKind::Flatten => g.flatten(h)?,
                _ => {
                    let w = g.param(layer.weight.clone().expect("weighted layer"));
                    let b = g.param(layer.bias.clone().expect("weighted layer"));
                    params.extend([w, b]);
                    let y = layer.forward(g, h, w, b, weighted, ctx)?;
                    weighted += 1;
                    y
                }
            };
        }
        Ok(ForwardOut { logits: h, params })
    }

    /// Logits from the accurate kernels of each layer's mode; no graph, no
    /// proxies, no state changes.
    pub fn predict(&self, x: &Tensor, hw: &Hardware) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut weighted = 0u32;
        for layer in &self.layers {
            h = match layer.spec.kind {
                LayerKind::Relu => exact::relu(&h),
                LayerKind::Maxpool => exact::maxpool2x2(&h)?.0,
                LayerKind::Flatten => {
                    let n = h.shape()[0];
                    h.reshape(&[n, h.numel() / n])?
                }
                _ => {
                    let y = layer.accurate(&h, true, hw, weighted)?;
                    weighted += 1;
                    y
                }
            };
        }
        Ok(h)
    }
}

impl Layer {
    fn weight(&self) -> &Tensor {
        self.weight.as_ref().expect("weighted layer")
    }

    fn bias(&self) -> &Tensor {
        self.bias.as_ref().expect("weighted layer")
    }

    fn exact(&self, x: &Tensor, bias: bool) -> Result<Tensor> {
        let b = bias.then(|| self.bias());
        match self.spec.kind {
            LayerKind::Conv2d { stride, pad, .. } => exact::conv2d_exact(x, self.weight(), b, ConvParams { stride, pad }),
            _ => exact::linear_exact(x, self.weight(), b),
        }
    }

    fn sc_scales(&self, x: &Tensor, hw: &Hardware) -> ScScales {
        match hw.sc_scaling {
            ScScaling::MaxAbs => ScScales {
                x: self.state.sc_x_scale.unwrap_or_else(|| nonzero_scale(x.max())),
                w: nonzero_scale(self.weight().max_abs()),
            },
            ScScaling::Unit => ScScales { x: 1.0, w: 1.0 },
        }
    }

    fn clips(&self, x: &Tensor, hw: &Hardware) -> Result<AnalogClips> {
        match self.state.analog_clips {
            Some(c) => Ok(c),
            None => Ok(calibrate_clip(&group_sums(x, self.weight(), grouping(&self.spec, hw))?)),
        }
    }

    /// Accurate simulation of this layer in its kernel mode.
    fn accurate(&self, x: &Tensor, bias: bool, hw: &Hardware, layer: u32) -> Result<Tensor> {
        let w = self.weight();
        let b = bias.then(|| self.bias());
        let conv = match self.spec.kind {
            LayerKind::Conv2d { stride, pad, .. } => Some(ConvParams { stride, pad }),
            _ => None,
        };
        match self.spec.mode {
            KernelMode::Exact => self.exact(x, bias),
            KernelMode::Sc => {
                let scales = self.sc_scales(x, hw);
                let xc = x.map(|v| v.min(scales.x));
                let wc = w.map(|v| v.clamp(-scales.w, scales.w));
                match conv {
                    Some(p) => sc_conv2d(&xc, &wc, b, &hw.sc, scales, layer, p),
                    None => sc_linear(&xc, &wc, b, &hw.sc, scales, layer),
                }
            }
            KernelMode::ApproxMult => match conv {
                Some(p) => am_conv2d(x, w, b, &hw.table, p),
                None => am_linear(x, w, b, &hw.table),
            },
            KernelMode::Analog => analog_forward(x, w, b, hw.adc_bits, self.clips(x, hw)?, grouping(&self.spec, hw)),
        }
    }

    fn forward(&mut self, g: &mut Graph, x: Var, w: Var, b: Var, layer: u32, ctx: &StepCtx<'_>) -> Result<Var> {
        if ctx.phase == Phase::Exact || self.spec.mode == KernelMode::Exact {
            let y = apply(g, &self.spec, x, w)?;
            return g.bias_add(y, b);
        }
        let xv = g.value(x).clone();
        if ctx.refresh_scales {
            match self.spec.mode {
                KernelMode::Sc => self.state.sc_x_scale = Some(nonzero_scale(xv.max())),
                KernelMode::Analog => {
                    let sums = group_sums(&xv, self.weight(), grouping(&self.spec, ctx.hw))?;
                    self.state.analog_clips = Some(calibrate_clip(&sums));
                }
                _ => {}
            }
        }
        let key = NoiseKey {
            base_seed: ctx.noise_seed,
            layer,
            batch: ctx.step,
            element: 0,
        };
        let uncalibrated = || Error::Uncalibrated { layer: layer as usize };

        // Pre-bias proxy inputs and the pointwise proxy (if any).
        let (inputs, proxy_fn): (Vec<Var>, Option<Pointwise>) = match self.spec.mode {
            KernelMode::Sc => {
                let s_out = self.sc_scales(&xv, ctx.hw).output();
                if ctx.proxy {
                    let wp = g.positive_part(w);
                    let wn = g.negative_part(w);
                    let pos = apply(g, &self.spec, x, wp)?;
                    let neg = apply(g, &self.spec, x, wn)?;
                    (vec![pos, neg], Some(Arc::new(ScAct { scale: s_out })))
                } else {
                    (vec![apply(g, &self.spec, x, w)?], None)
                }
            }
            KernelMode::ApproxMult => {
                let xq = g.fake_quant(x);
                let wq = g.fake_quant(w);
                (vec![apply(g, &self.spec, xq, wq)?], None)
            }
            KernelMode::Analog => {
                let xq = g.fake_quant(x);
                let wq = g.fake_quant(w);
                let wp = g.positive_part(wq);
                let wn = g.negative_part(wq);
                let pos = apply(g, &self.spec, xq, wp)?;
                let neg = apply(g, &self.spec, xq, wn)?;
                let clips = self.clips(&xv, ctx.hw)?;
                let groups = groups_per_output(&self.spec, ctx.hw) as f32;
                let act = if ctx.proxy {
                    AnalogAct {
                        clip_pos: clips.pos * groups,
                        clip_neg: clips.neg * groups,
                    }
                } else {
                    AnalogAct::symmetric(f32::INFINITY)
                };
                (vec![pos, neg], Some(Arc::new(act)))
            }
            KernelMode::Exact => unreachable!(),
        };

        match ctx.phase {
            Phase::Injection => {
                let chain: Vec<Pointwise> = match self.spec.mode {
                    KernelMode::Analog => {
                        let model = self.state.type2.ok_or_else(uncalibrated)?;
                        let groups = groups_per_output(&self.spec, ctx.hw) as f32;
                        let clips = self.clips(&xv, ctx.hw)?;
                        let (clip_pos, clip_neg) = if ctx.proxy {
                            (clips.pos * groups, clips.neg * groups)
                        } else {
                            (f32::INFINITY, f32::INFINITY)
                        };
                        vec![Arc::new(AnalogInject {
                            clip_pos,
                            clip_neg,
                            model,
                            key,
                        })]
                    }
                    _ => {
                        let model = self.state.type1.clone().ok_or_else(uncalibrated)?;
                        let inject: Pointwise = Arc::new(InjectType1 {
                            model: Arc::new(model),
                            key,
                        });
                        proxy_fn.into_iter().chain([inject]).collect()
                    }
                };
                let y = apply_chain(g, chain, &inputs, ctx.checkpoint)?;
                g.bias_add(y, b)
            }
            Phase::Accurate => {
                let acc = self.accurate(&xv, false, ctx.hw, layer)?;
                let proxy = match proxy_fn {
                    Some(f) => apply_chain(g, vec![f], &inputs, ctx.checkpoint)?,
                    None => inputs[0],
                };
                if ctx.fit_errors {
                    match self.spec.mode {
                        KernelMode::Analog => {
                            let reference = match grouping(&self.spec, ctx.hw) {
                                Grouping::Conv(p) => {
                                    exact::conv2d_exact(&fake_quantize8(&xv), &fake_quantize8(self.weight()), None, p)?
                                }
                                Grouping::Linear { .. } => {
                                    exact::linear_exact(&fake_quantize8(&xv), &fake_quantize8(self.weight()), None)?
                                }
                            };
                            self.state.type2 = Some(fit_type2(&acc, &reference, ctx.step)?);
                        }
                        _ => self.state.type1 = Some(fit_type1(g.value(proxy), &acc, ctx.hw.type1, ctx.step)?),
                    }
                }
                let proxy = g.bias_add(proxy, b)?;
                let value = add_bias(acc, self.bias());
                g.straight_through(value, proxy)
            }
            Phase::Exact => unreachable!(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            input_channels: 1,
            input_size: 8,
            widths: [2, 3, 4],
            classes: 3,
        }
    }

    fn batch(n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Tensor::from_fn(&[n, 1, 8, 8], |_| rng.random_range(0.0..1.0))
    }

    fn ctx(hw: &Hardware, phase: Phase) -> StepCtx<'_> {
        StepCtx {
            hw,
            phase,
            proxy: true,
            checkpoint: false,
            noise_seed: 1,
            step: 0,
            refresh_scales: true,
            fit_errors: false,
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let spec = LayerSpec {
            kind: LayerKind::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 4,
                stride: 1,
                pad: 0,
            },
            mode: KernelMode::Exact,
        };
        assert!(spec.validate().is_err());
        let mut arch = small_arch();
        arch.input_size = 6;
        assert!(arch.tiny_conv(KernelMode::Exact).is_err());
    }

    #[test]
    fn exact_layer_equals_conv_plus_bias() {
        let mut m = Model::tiny_conv(&small_arch(), KernelMode::Exact, 3).unwrap();
        let b = Tensor::new(vec![2], vec![0.3, -0.1]).unwrap();
        m.layers[0].bias = Some(b.clone());
        let hw = Hardware::default();
        let x = batch(2);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.param(m.layers[0].weight.clone().unwrap());
        let bv = g.param(b.clone());
        let y = m.layers[0].forward(&mut g, xv, w, bv, 0, &ctx(&hw, Phase::Accurate)).unwrap();
        let r = exact::conv2d_exact(&x, m.layers[0].weight.as_ref().unwrap(), Some(&b), ConvParams { stride: 1, pad: 1 }).unwrap();
        assert_eq!(g.value(y), &r);
    }

    #[test]
    fn predict_exact_matches_graph_forward() {
        let mut m = Model::tiny_conv(&small_arch(), KernelMode::Exact, 4).unwrap();
        let hw = Hardware::default();
        let x = batch(3);
        let mut g = Graph::new();
        let out = m.forward(&mut g, &x, &ctx(&hw, Phase::Exact)).unwrap();
        assert_eq!(g.value(out.logits), &m.predict(&x, &hw).unwrap());
        assert_eq!(out.params.len(), 8);
        assert_eq!(m.parameters().len(), 8);
    }

    #[test]
    fn injection_requires_calibration() {
        let mut m = Model::tiny_conv(&small_arch(), KernelMode::Sc, 4).unwrap();
        let hw = Hardware::default();
        let mut g = Graph::new();
        let r = m.forward(&mut g, &batch(2), &ctx(&hw, Phase::Injection));
        assert!(matches!(r, Err(Error::Uncalibrated { layer: 0 })));
    }

    #[test]
    fn accurate_forward_value_is_predict_value() {
        for mode in [KernelMode::Sc, KernelMode::ApproxMult, KernelMode::Analog] {
            let mut m = Model::tiny_conv(&small_arch(), mode, 5).unwrap();
            let hw = Hardware::default();
            let x = batch(2);
            let mut g = Graph::new();
            let mut c = ctx(&hw, Phase::Accurate);
            c.fit_errors = true;
            let out = m.forward(&mut g, &x, &c).unwrap();
            let logits = g.value(out.logits).clone();
            assert_eq!(logits, m.predict(&x, &hw).unwrap(), "{mode:?}");
            let loss = g.softmax_cross_entropy(out.logits, &[0, 1]).unwrap();
            let grads = g.backward(loss).unwrap();
            assert!(out.params.iter().all(|&p| grads.get(p).is_some()));
            assert!(m.layers.iter().filter(|l| l.weight.is_some()).all(|l| l.state.type1.is_some() || l.state.type2.is_some()));
        }
    }
}

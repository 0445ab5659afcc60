//! Analog in-memory accumulation with low-bit ADCs.
//!
//! Inputs and weights are quantised to 8 bits and weights are split by sign.
//! Each polarity's products are summed in groups (one input channel's kernel
//! window for convolutions, `group_size` consecutive inputs for linear
//! layers); every group sum is clamped and digitised by a uniform ADC before
//! exact digital accumulation.

use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{Error, Result};
use crate::exact::{im2row, ConvParams, ConvShape};
use crate::mult::quantize8;
use crate::tensor::Tensor;

pub const DEFAULT_ADC_BITS: u32 = 4;
pub const DEFAULT_LINEAR_GROUP: usize = 9;
pub const CLIP_PERCENTILE: f64 = 0.999;
pub const CLIP_FLOOR: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdcConfig {
    pub bits: u32,
    pub clip: f32,
    pub group_size: usize,
}

impl AdcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::arg("adc", format!("bits {} outside 2..=8", self.bits)));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::arg("adc", format!("clip {} must be positive and finite", self.clip)));
        }
        if self.group_size == 0 {
            return Err(Error::arg("adc", "group_size must be >= 1"));
        }
        Ok(())
    }
}

fn levels(bits: u32) -> f64 {
    ((1u32 << bits) - 1) as f64
}

/// ADC code of a non-negative partial sum: `round(min(v, clip) * (2^bits - 1) / clip)`.
#[inline]
fn adc_code(v: f64, bits: u32, clip: f64) -> u32 {
    (v.min(clip) * levels(bits) / clip).round() as u32
}

/// Clamps `v` to the clip level and rounds it to the nearest of `2^bits` levels.
pub fn adc_quantize(v: f32, cfg: &AdcConfig) -> Result<f32> {
    cfg.validate()?;
    if !(v >= 0.0) {
        return Err(Error::arg("adc_quantize", format!("partial sum {v} is negative")));
    }
    let clip = cfg.clip as f64;
    Ok((adc_code(v as f64, cfg.bits, clip) as f64 * clip / levels(cfg.bits)) as f32)
}

/// Full-scale ranges of the positive- and negative-weight ADCs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalogClips {
    pub pos: f32,
    pub neg: f32,
}

/// How products are grouped into analog partial sums.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// One group per input channel window.
    Conv(ConvParams),
    /// `group_size` consecutive inputs per group.
    Linear { group_size: usize },
}

/// Quantised operands laid out as rows of one receptive field each.
struct Operands {
    rows: Vec<i32>,
    weights: Vec<i32>,
    field: usize,
    k: usize,
    group: usize,
    scale: f64,
    out_shape: Vec<usize>,
    /// Output positions per sample; rows are `(n, position)` ordered.
    positions: usize,
}

impl Operands {
    fn new(x: &Tensor, w: &Tensor, grouping: Grouping) -> Result<Self> {
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::arg("analog", "inputs must be non-negative"));
        }
        let (qx, qw) = (quantize8(x), quantize8(w));
        let scale = qx.params.scale as f64 * qw.params.scale as f64;
        let weights = qw.values.iter().map(|&v| v as i32).collect();
        match grouping {
            Grouping::Conv(p) => {
                let s = ConvShape::resolve(x.shape(), w.shape(), p)?;
                let lx = Tensor::from_parts(x.shape().to_vec(), qx.values.iter().map(|&v| v as f32).collect());
                Ok(Self {
                    rows: im2row(&lx, &s).into_iter().map(|v| v as i32).collect(),
                    weights,
                    field: s.field(),
                    k: s.k,
                    group: s.kh * s.kw,
                    scale,
                    out_shape: s.output_shape().to_vec(),
                    positions: s.positions(),
                })
            }
            Grouping::Linear { group_size } => {
                if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
                    return Err(Error::shape("analog_linear", format!("x {:?}, w {:?}", x.shape(), w.shape())));
                }
                if group_size == 0 {
                    return Err(Error::arg("analog_linear", "group_size must be >= 1"));
                }
                Ok(Self {
                    rows: qx.values.iter().map(|&v| v as i32).collect(),
                    weights,
                    field: x.shape()[1],
                    k: w.shape()[0],
                    group: group_size,
                    scale,
                    out_shape: vec![x.shape()[0], w.shape()[0]],
                    positions: 1,
                })
            }
        }
    }

    fn nrows(&self) -> usize {
        self.rows.len() / self.field
    }

    fn groups(&self) -> usize {
        self.field.div_ceil(self.group)
    }

    /// Calls `f(row, k, group, pos_sum, neg_sum)` with integer group sums.
    fn for_each_group(&self, mut f: impl FnMut(usize, usize, usize, i32, i32)) {
        for r in 0..self.nrows() {
            let xr = &self.rows[r * self.field..][..self.field];
            for k in 0..self.k {
                let wr = &self.weights[k * self.field..][..self.field];
                for (g, (xs, ws)) in xr.chunks(self.group).zip(wr.chunks(self.group)).enumerate() {
                    let (mut pos, mut neg) = (0i32, 0i32);
                    for (&a, &b) in xs.iter().zip(ws) {
                        if b > 0 {
                            pos += a * b;
                        } else {
                            neg -= a * b;
                        }
                    }
                    f(r, k, g, pos, neg);
                }
            }
        }
    }

    /// Index into the `[N, K, positions]` output for row `r`, channel `k`.
    fn out_index(&self, r: usize, k: usize) -> usize {
        let (n, p) = (r / self.positions, r % self.positions);
        (n * self.k + k) * self.positions + p
    }
}

/// Split-unipolar analog layer: every group sum per polarity goes through
/// the ADC, codes are accumulated exactly and rescaled by the ADC step.
pub fn analog_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    bits: u32,
    clips: AnalogClips,
    grouping: Grouping,
) -> Result<Tensor> {
    for clip in [clips.pos, clips.neg] {
        AdcConfig { bits, clip, group_size: 1 }.validate()?;
    }
    let ops = Operands::new(x, w, grouping)?;
    if let Some(b) = bias {
        if b.shape() != [ops.k] {
            return Err(Error::shape("analog", format!("bias {:?} for {} outputs", b.shape(), ops.k)));
        }
    }
    let (cp, cn) = (clips.pos as f64, clips.neg as f64);
    let (lsb_p, lsb_n) = (cp / levels(bits), cn / levels(bits));
    let total = ops.nrows() * ops.k;
    let mut codes = vec![(0u64, 0u64); total];
    ops.for_each_group(|r, k, _, pos, neg| {
        let c = &mut codes[ops.out_index(r, k)];
        c.0 += adc_code(pos as f64 * ops.scale, bits, cp) as u64;
        c.1 += adc_code(neg as f64 * ops.scale, bits, cn) as u64;
    });
    let out = codes
        .iter()
        .enumerate()
        .map(|(i, &(p, n))| {
            let k = i / ops.positions % ops.k;
            (p as f64 * lsb_p - n as f64 * lsb_n) as f32 + bias.map_or(0.0, |b| b.data()[k])
        })
        .collect();
    counters::bump(|c| {
        c.accurate_products += (total * ops.field) as u64;
        c.accurate_kernel_calls += 1;
    });
    Ok(Tensor::from_parts(ops.out_shape, out))
}

pub fn analog_conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, bits: u32, clips: AnalogClips, p: ConvParams) -> Result<Tensor> {
    analog_forward(x, w, bias, bits, clips, Grouping::Conv(p))
}

pub fn analog_linear(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    bits: u32,
    clips: AnalogClips,
    group_size: usize,
) -> Result<Tensor> {
    analog_forward(x, w, bias, bits, clips, Grouping::Linear { group_size })
}

/// Unquantised group sums per polarity, for range calibration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupSums {
    pub pos: Vec<f32>,
    pub neg: Vec<f32>,
    /// Groups feeding each output element.
    pub groups_per_output: usize,
}

pub fn group_sums(x: &Tensor, w: &Tensor, grouping: Grouping) -> Result<GroupSums> {
    let ops = Operands::new(x, w, grouping)?;
    let n = ops.nrows() * ops.k * ops.groups();
    let mut sums = GroupSums {
        pos: Vec::with_capacity(n),
        neg: Vec::with_capacity(n),
        groups_per_output: ops.groups(),
    };
    ops.for_each_group(|_, _, _, pos, neg| {
        sums.pos.push((pos as f64 * ops.scale) as f32);
        sums.neg.push((neg as f64 * ops.scale) as f32);
    });
    Ok(sums)
}

/// Linearly interpolated percentile, `q` in [0, 1]. Returns 0 for no data.
pub fn percentile(values: &[f32], q: f64) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_unstable_by(f32::total_cmp);
    let rank = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = rank - lo as f64;
    (v[lo] as f64 + (v[hi] as f64 - v[lo] as f64) * frac) as f32
}

/// Clip per polarity: the 99.9th percentile of the observed group sums,
/// floored at `1e-6`.
pub fn calibrate_clip(sums: &GroupSums) -> AnalogClips {
    let clip = |v: &[f32]| percentile(v, CLIP_PERCENTILE).max(CLIP_FLOOR);
    AnalogClips {
        pos: clip(&sums.pos),
        neg: clip(&sums.neg),
    }
}

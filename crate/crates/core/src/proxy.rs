//! Differentiable stand-ins for the nonlinearity of stochastic and analog
//! accumulation, applied to the split outputs of a layer: `x_pos` is the
//! exact output of the positive weights, `x_neg` that of the magnitudes of
//! the negative weights.

use crate::analog::Grouping;
use crate::counters;
use crate::error::{Error, Result};
use crate::exact::{conv2d_exact, linear_exact};
use crate::graph::PointwiseFn;
use crate::tensor::Tensor;

/// Outputs of the positive and negative halves of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitOutput {
    pub x_pos: Tensor,
    pub x_neg: Tensor,
}

impl SplitOutput {
    pub fn new(x_pos: Tensor, x_neg: Tensor) -> Result<Self> {
        x_pos.expect_same_shape(&x_neg, "split output")?;
        check_non_negative("split output", x_pos.data())?;
        check_non_negative("split output", x_neg.data())?;
        Ok(Self { x_pos, x_neg })
    }
}

fn check_non_negative(op: &'static str, v: &[f32]) -> Result<()> {
    match v.iter().find(|&&x| !(x >= 0.0)) {
        Some(x) => Err(Error::arg(op, format!("component {x} is negative"))),
        None => Ok(()),
    }
}

/// Exact outputs of `max(w, 0)` and `max(-w, 0)` on non-negative `x`. Bias
/// is not applied.
pub fn split_forward(x: &Tensor, w: &Tensor, grouping: Grouping) -> Result<SplitOutput> {
    check_non_negative("split_forward", x.data())?;
    let wp = w.map(|v| v.max(0.0));
    let wn = w.map(|v| (-v).max(0.0));
    let (x_pos, x_neg) = match grouping {
        Grouping::Conv(p) => (conv2d_exact(x, &wp, None, p)?, conv2d_exact(x, &wn, None, p)?),
        Grouping::Linear { .. } => (linear_exact(x, &wp, None)?, linear_exact(x, &wn, None)?),
    };
    SplitOutput::new(x_pos, x_neg)
}

#[inline]
fn sc_act_scalar(a: f32, b: f32, scale: f32) -> f32 {
    scale * ((-b / scale).exp() - (-a / scale).exp())
}

#[inline]
fn analog_act_scalar(a: f32, b: f32, clip: f32) -> f32 {
    a.min(clip) - b.min(clip)
}

/// `(1 - e^-x_pos) - (1 - e^-x_neg)` elementwise.
pub fn sc_act(s: &SplitOutput) -> Tensor {
    s.x_pos.zip_map(&s.x_neg, |a, b| sc_act_scalar(a, b, 1.0)).expect("validated shapes")
}

/// `min(x_pos, clip) - min(x_neg, clip)` elementwise.
pub fn analog_act(s: &SplitOutput, clip: f32) -> Tensor {
    s.x_pos.zip_map(&s.x_neg, |a, b| analog_act_scalar(a, b, clip)).expect("validated shapes")
}

fn pair<'a>(inputs: &[&'a [f32]]) -> (&'a [f32], &'a [f32]) {
    (inputs[0], inputs[1])
}

/// Stochastic-computing proxy on values in units of `scale`:
/// `scale * (e^(-x_neg/scale) - e^(-x_pos/scale))`.
#[derive(Clone, Copy, Debug)]
pub struct ScAct {
    pub scale: f32,
}

impl PointwiseFn for ScAct {
    fn name(&self) -> &str {
        "sc_act"
    }

    fn arity(&self) -> usize {
        2
    }

    fn forward(&self, inputs: &[&[f32]], out: &mut [f32]) -> Result<()> {
        let (a, b) = pair(inputs);
        check_non_negative("sc_act", a)?;
        check_non_negative("sc_act", b)?;
        for ((o, &a), &b) in out.iter_mut().zip(a).zip(b) {
            *o = sc_act_scalar(a, b, self.scale);
        }
        counters::bump(|c| c.proxy_calls += 1);
        Ok(())
    }

    fn backward(&self, inputs: &[&[f32]], grad_out: &[f32], grads: &mut [Vec<f32>]) {
        let (a, b) = pair(inputs);
        let s = self.scale;
        let (ga, gb) = grads.split_at_mut(1);
        for i in 0..grad_out.len() {
            ga[0][i] = grad_out[i] * (-a[i] / s).exp();
            gb[0][i] = -grad_out[i] * (-b[i] / s).exp();
        }
    }
}

/// Analog saturation proxy with gradient `1[x < clip]` per branch. Each
/// polarity saturates at its own clip.
#[derive(Clone, Copy, Debug)]
pub struct AnalogAct {
    pub clip_pos: f32,
    pub clip_neg: f32,
}

impl AnalogAct {
    pub fn symmetric(clip: f32) -> Self {
        Self {
            clip_pos: clip,
            clip_neg: clip,
        }
    }
}

impl PointwiseFn for AnalogAct {
    fn name(&self) -> &str {
        "analog_act"
    }

    fn arity(&self) -> usize {
        2
    }

    fn forward(&self, inputs: &[&[f32]], out: &mut [f32]) -> Result<()> {
        let (a, b) = pair(inputs);
        check_non_negative("analog_act", a)?;
        check_non_negative("analog_act", b)?;
        for ((o, &a), &b) in out.iter_mut().zip(a).zip(b) {
            *o = a.min(self.clip_pos) - b.min(self.clip_neg);
        }
        counters::bump(|c| c.proxy_calls += 1);
        Ok(())
    }

    fn backward(&self, inputs: &[&[f32]], grad_out: &[f32], grads: &mut [Vec<f32>]) {
        analog_act_backward(self.clip_pos, self.clip_neg, inputs, grad_out, grads);
    }
}

pub(crate) fn analog_act_backward(clip_pos: f32, clip_neg: f32, inputs: &[&[f32]], grad_out: &[f32], grads: &mut [Vec<f32>]) {
    let (a, b) = pair(inputs);
    let (ga, gb) = grads.split_at_mut(1);
    for i in 0..grad_out.len() {
        ga[0][i] = if a[i] < clip_pos { grad_out[i] } else { 0.0 };
        gb[0][i] = if b[i] < clip_neg { -grad_out[i] } else { 0.0 };
    }
}

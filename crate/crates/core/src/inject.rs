//! Calibrated error injection.
//!
//! Type 1 models the error of an accurate kernel relative to its cheap
//! proxy as a value-dependent Gaussian: polynomials in the proxy output give
//! the mean and the standard deviation. Type 2 keeps one mean and variance
//! per layer. Noise is drawn from [`gaussian_from_key`], so an injected
//! tensor is a pure function of its inputs and key and can be recomputed.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{Error, Result};
use crate::graph::PointwiseFn;
use crate::proxy::analog_act_backward;
use crate::rng::{NoiseKey, NoiseStream};
use crate::tensor::Tensor;

pub const DEFAULT_DEGREE: usize = 3;
pub const DEFAULT_BINS: usize = 32;
const RIDGE: f64 = 1e-8;

/// Least-squares polynomial fit, coefficients in ascending powers. Solves
/// the normal equations with a small ridge term.
pub fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Result<Vec<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::shape("polyfit", format!("{} xs, {} ys", xs.len(), ys.len())));
    }
    if xs.len() <= degree {
        return Err(Error::arg("polyfit", format!("{} points for degree {degree}", xs.len())));
    }
    if degree > 0 && xs.iter().all(|&x| x == xs[0]) {
        return Err(Error::arg("polyfit", "all x values are equal"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("polyfit input".into()));
    }
    let m = degree + 1;
    let mut a = vec![vec![0.0f64; m + 1]; m];
    for (&x, &y) in xs.iter().zip(ys) {
        let mut pow = vec![1.0f64; 2 * m - 1];
        for i in 1..pow.len() {
            pow[i] = pow[i - 1] * x;
        }
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row[..m].iter_mut().enumerate() {
                *v += pow[i + j];
            }
            row[m] += pow[i] * y;
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += RIDGE;
    }
    solve(a)
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let m = a.len();
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::arg("polyfit", "singular normal equations"));
        }
        a.swap(col, piv);
        for r in col + 1..m {
            let f = a[r][col] / a[col][col];
            for c in col..=m {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0f64; m];
    for r in (0..m).rev() {
        let s: f64 = (r + 1..m).map(|c| a[r][c] * x[c]).sum();
        x[r] = (a[r][m] - s) / a[r][r];
    }
    Ok(x)
}

fn polyval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

fn polyder(c: &[f64], x: f64) -> f64 {
    c.iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (i, &k)| acc * x + i as f64 * k)
}

/// Value-dependent error model. Polynomials take the normalised argument
/// `t = (y - mid) / half` with `y` clamped into `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorModelType1 {
    pub mean_poly: Vec<f64>,
    pub std_poly: Vec<f64>,
    pub lo: f32,
    pub hi: f32,
    pub calibrated_at: u64,
}

impl ErrorModelType1 {
    /// Model that adds nothing.
    pub fn zero(lo: f32, hi: f32) -> Self {
        Self {
            mean_poly: vec![0.0],
            std_poly: vec![0.0],
            lo,
            hi,
            calibrated_at: 0,
        }
    }

    fn mid_half(&self) -> (f64, f64) {
        let (lo, hi) = (self.lo as f64, self.hi as f64);
        ((lo + hi) / 2.0, ((hi - lo) / 2.0).max(f64::MIN_POSITIVE))
    }

    /// Normalised argument and whether `y` lies strictly inside the domain.
    fn arg(&self, y: f32) -> (f64, bool) {
        let (mid, half) = self.mid_half();
        let inside = y > self.lo && y < self.hi;
        ((y.clamp(self.lo, self.hi) as f64 - mid) / half, inside)
    }

    pub fn mean_at(&self, y: f32) -> f64 {
        polyval(&self.mean_poly, self.arg(y).0)
    }

    /// Standard deviation, clamped at zero.
    pub fn std_at(&self, y: f32) -> f64 {
        polyval(&self.std_poly, self.arg(y).0).max(0.0)
    }

    /// `d/dy` of mean and of the clamped std; zero outside the domain.
    fn derivatives(&self, y: f32) -> (f64, f64) {
        let (t, inside) = self.arg(y);
        if !inside {
            return (0.0, 0.0);
        }
        let half = self.mid_half().1;
        let dstd = if polyval(&self.std_poly, t) > 0.0 {
            polyder(&self.std_poly, t) / half
        } else {
            0.0
        };
        (polyder(&self.mean_poly, t) / half, dstd)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.mean_poly.iter().chain(&self.std_poly).all(|c| c.is_finite());
        if !finite || self.mean_poly.is_empty() || self.std_poly.is_empty() || !(self.lo <= self.hi) {
            return Err(Error::Invariant("malformed type-1 error model".into()));
        }
        Ok(())
    }
}

/// Polynomial degree and bin count of a Type 1 fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Type1Options {
    pub degree: usize,
    pub bins: usize,
}

impl Default for Type1Options {
    fn default() -> Self {
        Self {
            degree: DEFAULT_DEGREE,
            bins: DEFAULT_BINS,
        }
    }
}

/// Fits a Type 1 model to `e = accurate - proxy`, binned by the proxy value
/// into equal-width bins over its observed range.
pub fn fit_type1(proxy: &Tensor, accurate: &Tensor, opts: Type1Options, step: u64) -> Result<ErrorModelType1> {
    proxy.expect_same_shape(accurate, "fit_type1")?;
    if opts.bins == 0 {
        return Err(Error::arg("fit_type1", "need at least one bin"));
    }
    let (lo, hi) = (proxy.min(), proxy.max());
    let mut model = ErrorModelType1::zero(lo, hi);
    model.calibrated_at = step;
    let (mid, half) = model.mid_half();
    let mut stats = vec![(0u64, 0.0f64, 0.0f64); opts.bins];
    let width = (hi as f64 - lo as f64) / opts.bins as f64;
    for (&p, &a) in proxy.data().iter().zip(accurate.data()) {
        let b = if width > 0.0 {
            (((p as f64 - lo as f64) / width) as usize).min(opts.bins - 1)
        } else {
            0
        };
        let e = a as f64 - p as f64;
        let s = &mut stats[b];
        s.0 += 1;
        s.1 += e;
        s.2 += e * e;
    }
    let (mut xs, mut means, mut stds) = (vec![], vec![], vec![]);
    for (b, &(n, s1, s2)) in stats.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let mean = s1 / n as f64;
        let center = lo as f64 + (b as f64 + 0.5) * width;
        xs.push((center - mid) / half);
        means.push(mean);
        stds.push((s2 / n as f64 - mean * mean).max(0.0).sqrt());
    }
    let degree = if xs.len() < 2 { 0 } else { opts.degree.min(xs.len() - 1) };
    model.mean_poly = polyfit(&xs, &means, degree)?;
    model.std_poly = polyfit(&xs, &stds, degree)?;
    model.validate()?;
    counters::bump(|c| c.type1_calibrations += 1);
    Ok(model)
}

/// `y + mean(y) + max(std(y), 0) * z` with `z` keyed by element index.
pub fn inject_type1(y_proxy: &Tensor, model: Option<&ErrorModelType1>, key: NoiseKey) -> Result<Tensor> {
    let model = model.ok_or(Error::Uncalibrated { layer: key.layer as usize })?;
    let f = InjectType1 {
        model: Arc::new(model.clone()),
        key,
    };
    let mut out = vec![0.0; y_proxy.numel()];
    f.forward(&[y_proxy.data()], &mut out)?;
    Tensor::new(y_proxy.shape().to_vec(), out)
}

/// Per-layer scalar error model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorModelType2 {
    pub mean: f64,
    pub var: f64,
    pub calibrated_at: u64,
}

/// Population mean and variance of `accurate - reference`.
pub fn fit_type2(accurate: &Tensor, reference: &Tensor, step: u64) -> Result<ErrorModelType2> {
    accurate.expect_same_shape(reference, "fit_type2")?;
    let (mut n, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
    for (&a, &r) in accurate.data().iter().zip(reference.data()) {
        let e = a as f64 - r as f64;
        n += 1;
        let d = e - mean;
        mean += d / n as f64;
        m2 += d * (e - mean);
    }
    counters::bump(|c| c.type2_calibrations += 1);
    Ok(ErrorModelType2 {
        mean,
        var: if n > 0 { (m2 / n as f64).max(0.0) } else { 0.0 },
        calibrated_at: step,
    })
}

/// `y + mean + sqrt(var) * z` with `z` keyed by element index.
pub fn inject_type2(y: &Tensor, model: Option<&ErrorModelType2>, key: NoiseKey) -> Result<Tensor> {
    let m = model.ok_or(Error::Uncalibrated { layer: key.layer as usize })?;
    let sd = m.var.max(0.0).sqrt();
    let out = y
        .data()
        .iter()
        .enumerate()
        .zip(NoiseStream::new(key).samples(y.numel()))
        .map(|((_, &v), z)| (v as f64 + m.mean + sd * z as f64) as f32)
        .collect();
    counters::bump(|c| c.inject_calls += 1);
    let t = Tensor::new(y.shape().to_vec(), out)?;
    Ok(t)
}

/// Type 1 injection as a graph function of the proxy output.
#[derive(Clone, Debug)]
pub struct InjectType1 {
    pub model: Arc<ErrorModelType1>,
    pub key: NoiseKey,
}

impl PointwiseFn for InjectType1 {
    fn name(&self) -> &str {
        "inject_type1"
    }

    fn arity(&self) -> usize {
        1
    }

    fn forward(&self, inputs: &[&[f32]], out: &mut [f32]) -> Result<()> {
        NoiseStream::new(self.key).fill(out);
        for (o, &y) in out.iter_mut().zip(inputs[0]) {
            *o = (y as f64 + self.model.mean_at(y) + self.model.std_at(y) * *o as f64) as f32;
        }
        counters::bump(|c| c.inject_calls += 1);
        Ok(())
    }

    fn backward(&self, inputs: &[&[f32]], grad_out: &[f32], grads: &mut [Vec<f32>]) {
        let g = &mut grads[0];
        NoiseStream::new(self.key).fill(g);
        for ((g, &y), &go) in g.iter_mut().zip(inputs[0]).zip(grad_out) {
            let (dm, ds) = self.model.derivatives(y);
            *g = (go as f64 * (1.0 + dm + ds * *g as f64)) as f32;
        }
    }
}

/// Analog training forward during injection: the linear split difference
/// plus Type 2 noise, with the saturation proxy's gradient.
#[derive(Clone, Debug)]
pub struct AnalogInject {
    pub clip_pos: f32,
    pub clip_neg: f32,
    pub model: ErrorModelType2,
    pub key: NoiseKey,
}

impl PointwiseFn for AnalogInject {
    fn name(&self) -> &str {
        "analog_inject"
    }

    fn arity(&self) -> usize {
        2
    }

    fn forward(&self, inputs: &[&[f32]], out: &mut [f32]) -> Result<()> {
        let sd = self.model.var.max(0.0).sqrt();
        NoiseStream::new(self.key).fill(out);
        for (i, o) in out.iter_mut().enumerate() {
            *o = ((inputs[0][i] - inputs[1][i]) as f64 + self.model.mean + sd * *o as f64) as f32;
        }
        counters::bump(|c| c.inject_calls += 1);
        Ok(())
    }

    fn backward(&self, inputs: &[&[f32]], grad_out: &[f32], grads: &mut [Vec<f32>]) {
        analog_act_backward(self.clip_pos, self.clip_neg, inputs, grad_out, grads);
    }
}

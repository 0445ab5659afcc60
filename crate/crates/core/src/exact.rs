//! Reference float kernels: convolution, linear, ReLU, 2x2 max-pooling and
//! softmax cross-entropy, with the backward helpers used by the autograd
//! graph. Every approximate kernel is diffed against these.

use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: usize,
    pub pad: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self { stride: 1, pad: 0 }
    }
}

/// Resolved shapes of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn resolve(x: &[usize], w: &[usize], p: ConvParams) -> Result<Self> {
        const OP: &str = "conv2d";
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape(OP, format!("need 4-D input and weight, got {x:?} and {w:?}")));
        }
        if p.stride == 0 {
            return Err(Error::arg(OP, "stride must be >= 1"));
        }
        let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
        let (k, wc, kh, kw) = (w[0], w[1], w[2], w[3]);
        if wc != c {
            return Err(Error::shape(OP, format!("input has {c} channels, weight expects {wc}")));
        }
        if h + 2 * p.pad < kh || wd + 2 * p.pad < kw {
            return Err(Error::shape(
                OP,
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {})", p.pad),
            ));
        }
        let oh = (h + 2 * p.pad - kh) / p.stride + 1;
        let ow = (wd + 2 * p.pad - kw) / p.stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            k,
            kh,
            kw,
            oh,
            ow,
            stride: p.stride,
            pad: p.pad,
        })
    }

    /// Receptive-field size `c * kh * kw`.
    pub fn field(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Output positions per sample.
    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.k, self.oh, self.ow]
    }
}

/// Unfolds `x` into one row per output position: `[n * oh * ow, c * kh * kw]`,
/// with the receptive field ordered `(c, ky, kx)`. Padding reads as zero.
pub fn im2row(x: &Tensor, s: &ConvShape) -> Vec<f32> {
    let field = s.field();
    let pos = s.positions();
    let xd = x.data();
    let mut rows = vec![0.0f32; s.n * pos * field];
    for n in 0..s.n {
        for oy in 0..s.oh {
            for ox in 0..s.ow {
                let row = (n * pos + oy * s.ow + ox) * field;
                for c in 0..s.c {
                    let plane = (n * s.c + c) * s.h * s.w;
                    for ky in 0..s.kh {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..s.kw {
                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            rows[row + (c * s.kh + ky) * s.kw + kx] =
                                xd[plane + iy as usize * s.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    rows
}

/// Scatter-adds row gradients back onto the input layout (inverse of `im2row`).
fn row2im(rows: &[f32], s: &ConvShape) -> Vec<f32> {
    let field = s.field();
    let pos = s.positions();
    let mut dx = vec![0.0f32; s.n * s.c * s.h * s.w];
    for n in 0..s.n {
        for oy in 0..s.oh {
            for ox in 0..s.ow {
                let row = (n * pos + oy * s.ow + ox) * field;
                for c in 0..s.c {
                    let plane = (n * s.c + c) * s.h * s.w;
                    for ky in 0..s.kh {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..s.kw {
                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            dx[plane + iy as usize * s.w + ix as usize] +=
                                rows[row + (c * s.kh + ky) * s.kw + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Row-major strided view for `gemm`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f32],
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    fn rows(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    fn transposed(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c[m, n] = a[m, k] * b[k, n]`, `c` row-major and overwritten.
fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, c: &mut [f32]) {
    assert!(c.len() >= m * n);
    assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    // SAFETY: the asserts above bound every index the strides can reach,
    // and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_bias(bias: Option<&Tensor>, k: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::shape(op, format!("bias {:?} for {k} outputs", b.shape())));
        }
    }
    Ok(())
}

/// Cross-correlation of `x[N,C,H,W]` with `w[K,C,kh,kw]` plus optional bias.
pub fn conv2d_exact(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, p: ConvParams) -> Result<Tensor> {
    let s = ConvShape::resolve(x.shape(), w.shape(), p)?;
    check_bias(bias, s.k, "conv2d")?;
    let rows = im2row(x, &s);
    let (field, pos) = (s.field(), s.positions());
    let cols = s.n * pos;
    let mut tmp = vec![0.0f32; s.k * cols];
    gemm(
        s.k,
        field,
        cols,
        View::rows(w.data(), field),
        View::transposed(&rows, field),
        &mut tmp,
    );
    counters::bump(|c| c.exact_forward_macs += (s.k * field * cols) as u64);
    let mut out = vec![0.0f32; s.n * s.k * pos];
    for k in 0..s.k {
        let b = bias.map_or(0.0, |b| b.data()[k]);
        for n in 0..s.n {
            let src = &tmp[k * cols + n * pos..k * cols + (n + 1) * pos];
            let dst = &mut out[(n * s.k + k) * pos..(n * s.k + k + 1) * pos];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + b;
            }
        }
    }
    Ok(Tensor::from_parts(s.output_shape().to_vec(), out))
}

/// Gradients of `conv2d_exact` with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    p: ConvParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = ConvShape::resolve(x.shape(), w.shape(), p)?;
    if grad_out.shape() != s.output_shape() {
        return Err(Error::shape("conv2d_backward", format!("grad {:?}", grad_out.shape())));
    }
    let (field, pos) = (s.field(), s.positions());
    let cols = s.n * pos;
    // grad_out as [K, N*P]
    let mut g = vec![0.0f32; s.k * cols];
    let gd = grad_out.data();
    for n in 0..s.n {
        for k in 0..s.k {
            g[k * cols + n * pos..k * cols + (n + 1) * pos]
                .copy_from_slice(&gd[(n * s.k + k) * pos..(n * s.k + k + 1) * pos]);
        }
    }
    let rows = im2row(x, &s);
    let mut dw = vec![0.0f32; s.k * field];
    gemm(s.k, cols, field, View::rows(&g, cols), View::rows(&rows, field), &mut dw);
    let mut drows = vec![0.0f32; cols * field];
    gemm(
        cols,
        s.k,
        field,
        View::transposed(&g, cols),
        View::rows(w.data(), field),
        &mut drows,
    );
    counters::bump(|c| c.exact_backward_macs += 2 * (s.k * field * cols) as u64);
    let dx = row2im(&drows, &s);
    let db: Vec<f32> = (0..s.k).map(|k| g[k * cols..(k + 1) * cols].iter().sum()).collect();
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![s.k], db),
    ))
}

fn linear_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(Error::shape("linear", format!("need 2-D x and w, got {:?} and {:?}", x.shape(), w.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (m, wd) = (w.shape()[0], w.shape()[1]);
    if d != wd {
        return Err(Error::shape("linear", format!("x has {d} features, w expects {wd}")));
    }
    Ok((n, d, m))
}

/// `y = x * w^T + bias` for `x[N,D]`, `w[M,D]`.
pub fn linear_exact(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d, m) = linear_dims(x, w)?;
    check_bias(bias, m, "linear")?;
    let mut out = vec![0.0f32; n * m];
    gemm(n, d, m, View::rows(x.data(), d), View::transposed(w.data(), d), &mut out);
    counters::bump(|c| c.exact_forward_macs += (n * d * m) as u64);
    if let Some(b) = bias {
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Gradients of `linear_exact` with respect to input, weight and bias.
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d, m) = linear_dims(x, w)?;
    if grad_out.shape() != [n, m] {
        return Err(Error::shape("linear_backward", format!("grad {:?}", grad_out.shape())));
    }
    let g = grad_out.data();
    let mut dx = vec![0.0f32; n * d];
    gemm(n, m, d, View::rows(g, m), View::rows(w.data(), d), &mut dx);
    let mut dw = vec![0.0f32; m * d];
    gemm(m, n, d, View::transposed(g, m), View::rows(x.data(), d), &mut dw);
    counters::bump(|c| c.exact_backward_macs += 2 * (n * d * m) as u64);
    let mut db = vec![0.0f32; m];
    for row in g.chunks(m) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok((
        Tensor::from_parts(vec![n, d], dx),
        Tensor::from_parts(vec![m, d], dw),
        Tensor::from_parts(vec![m], db),
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// 2x2 max-pooling with stride 2 (odd trailing rows/columns dropped).
/// Returns the pooled tensor and the flat input index of every maximum.
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    x.expect_rank(4, "maxpool2x2")?;
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::shape("maxpool2x2", format!("input {h}x{w} too small")));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

/// Mean softmax cross-entropy over the batch, computed with log-sum-exp.
/// Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    logits.expect_rank(2, "softmax_cross_entropy")?;
    let (n, m) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for batch of {n}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::arg(
            "softmax_cross_entropy",
            format!("label {bad} out of range for {m} classes"),
        ));
    }
    let mut probs = vec![0.0f32; n * m];
    let mut loss = 0.0f64;
    for (i, row) in logits.data().chunks(m).enumerate() {
        let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&v| ((v - mx) as f64).exp()).sum();
        let lse = mx as f64 + sum.ln();
        loss += lse - row[labels[i]] as f64;
        for (p, &v) in probs[i * m..(i + 1) * m].iter_mut().zip(row) {
            *p = ((v as f64 - lse).exp()) as f32;
        }
    }
    Ok(((loss / n as f64) as f32, Tensor::from_parts(vec![n, m], probs)))
}

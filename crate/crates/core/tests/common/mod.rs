//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use axtrain::analog::AnalogClips;
use axtrain::sc::expected_or;
use axtrain::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod ckpt;
pub mod desk;
pub mod grad;
pub mod noise;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct nested-loop cross-correlation with zero padding, in f64.
pub fn conv_f64(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: Option<&[f64]>, stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [k, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * k * oh * ow);
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[ki]);
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w[((ki * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (out, [n, k, oh, ow])
}

/// `y = x w^T + b` in f64.
pub fn linear_f64(x: &[f64], n: usize, d: usize, w: &[f64], m: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let dot: f64 = (0..d).map(|t| x[i * d + t] * w[j * d + t]).sum();
            out.push(dot + b.map_or(0.0, |b| b[j]));
        }
    }
    out
}

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn shape4(t: &Tensor) -> [usize; 4] {
    [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]]
}

pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let bb = b.map(f64s);
    let (y, s) = conv_f64(&f64s(x), shape4(x), &f64s(w), shape4(w), bb.as_deref(), stride, pad);
    Tensor::new(s.to_vec(), y.into_iter().map(|v| v as f32).collect()).unwrap()
}

pub fn naive_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, d, m) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let y = linear_f64(&f64s(x), n, d, &f64s(w), m, Some(&f64s(b)));
    Tensor::new(vec![n, m], y.into_iter().map(|v| v as f32).collect()).unwrap()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn at4(t: &Tensor, i: [usize; 4]) -> f32 {
    let s = t.shape();
    t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
}

/// Truncated multiplier written as "exact product minus the dropped low
/// partial-product columns".
pub fn oracle_truncated(a: u32, b: u32, k: u32) -> u32 {
    let mut dropped = 0;
    for i in 0..7 {
        for j in 0..7 {
            if i + j < k {
                dropped += ((a >> j) & 1) * ((b >> i) & 1) << (i + j);
            }
        }
    }
    a * b - dropped
}

pub fn oracle_stats(k: u32) -> (f64, u32, f64, f64) {
    let mut errs = vec![];
    let mut rel = vec![];
    for a in 0..128u32 {
        for b in 0..128u32 {
            let e = oracle_truncated(a, b, k) as f64 - (a * b) as f64;
            errs.push(e);
            if a * b != 0 {
                rel.push(e.abs() / (a * b) as f64);
            }
        }
    }
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let max = errs.iter().map(|e| e.abs() as u32).max().unwrap();
    (rel.iter().sum::<f64>() / rel.len() as f64, max, mean, var)
}

pub fn q8(t: &Tensor) -> (Vec<i64>, f64) {
    let m = t.data().iter().fold(0.0f32, |a, &v| a.max(v.abs()));
    let s = if m > 0.0 { m / 127.0 } else { 1.0 };
    let v = t.data().iter().map(|&x| (x / s).round().clamp(-127.0, 127.0) as i64).collect();
    (v, s as f64)
}

pub fn adc(v: f64, clip: f64, bits: u32) -> i64 {
    let levels = ((1u32 << bits) - 1) as f64;
    (v.min(clip) * levels / clip).round() as i64
}

/// Per input channel and output pixel: integer window sums per weight sign,
/// scaled, clipped and digitised; codes summed and rescaled.
pub fn naive_analog_conv(x: &Tensor, w: &Tensor, b: &Tensor, bits: u32, clips: AnalogClips, pad: usize) -> Tensor {
    let (qx, sx) = q8(x);
    let (qw, sw) = q8(w);
    let scale = sx * sw;
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
    let levels = ((1u32 << bits) - 1) as f64;
    let (lp, ln) = (clips.pos as f64 / levels, clips.neg as f64 / levels);
    let mut out = vec![];
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut cp, mut cn) = (0i64, 0i64);
                    for ci in 0..c {
                        let (mut sp, mut sn) = (0i64, 0i64);
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let (iy, ix) = ((oy + dy) as isize - pad as isize, (ox + dx) as isize - pad as isize);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = qx[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = qw[((ki * c + ci) * kh + dy) * kw + dx];
                                if wv > 0 {
                                    sp += xv * wv;
                                } else {
                                    sn += xv * -wv;
                                }
                            }
                        }
                        cp += adc(sp as f64 * scale, clips.pos as f64, bits);
                        cn += adc(sn as f64 * scale, clips.neg as f64, bits);
                    }
                    out.push((cp as f64 * lp - cn as f64 * ln) as f32 + b.data()[ki]);
                }
            }
        }
    }
    Tensor::new(vec![n, k, oh, ow], out).unwrap()
}

/// Expected SC output: each comparator stream is a uniform draw over the
/// LFSR's non-zero states, so a stream of threshold `t` has bit mean
/// `t / (2^width - 1)`; AND multiplies independent means and OR follows the
/// complement-product law per polarity.
pub fn expected_sc_conv(x: &Tensor, w: &Tensor, width: u32, pad: usize) -> Tensor {
    let mask = ((1u32 << width) - 1) as f32;
    let rep = |v: f32| (v.abs() as f64 * mask as f64).round() as f32 / mask;
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
    let mut out = vec![];
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut pos, mut neg) = (vec![], vec![]);
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let (iy, ix) = ((oy + dy) as isize - pad as isize, (ox + dx) as isize - pad as isize);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let wv = at4(w, [ki, ci, dy, dx]);
                                let p = rep(at4(x, [ni, ci, iy as usize, ix as usize])) * rep(wv);
                                if wv < 0.0 {
                                    neg.push(p);
                                } else {
                                    pos.push(p);
                                }
                            }
                        }
                    }
                    out.push(expected_or(&pos).unwrap() - expected_or(&neg).unwrap());
                }
            }
        }
    }
    Tensor::new(vec![n, k, oh, ow], out).unwrap()
}

//! Central-difference gradient checks. The analytic side is the autograd
//! graph in f32; the numeric side differentiates an f64 forward oracle of
//! the same op, so f32 rounding does not swamp the difference quotient.

use std::sync::Arc;

use axtrain::exact::ConvParams;
use axtrain::graph::{Graph, Var};
use axtrain::proxy::{AnalogAct, ScAct};
use axtrain::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{conv_f64, linear_f64, rand_tensor};

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const OPS: [&str; 7] = ["conv2d", "linear", "relu", "maxpool2x2", "cross_entropy", "sc_act", "analog_act"];

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
type Oracle = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
    oracle: Oracle,
}

#[derive(Debug)]
pub struct OpResult {
    pub op: &'static str,
    pub trials: usize,
    /// Largest relative error `|a - n| / max(|a|, |n|)` over all trials.
    pub worst: f64,
    /// Largest forward mismatch against the oracle.
    pub forward_err: f64,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.worst <= TOL && self.forward_err <= 1e-4
    }
}

fn away_from(rng: &mut ChaCha8Rng, lo: f32, hi: f32, kinks: &[f32], margin: f32) -> f32 {
    loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            return v;
        }
    }
}

fn case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    match op {
        "conv2d" => {
            let (stride, pad) = [(1, 0), (1, 1), (2, 1)][rng.random_range(0..3)];
            let (xs, ws) = ([1, 2, 5, 5], [2, 2, 3, 3]);
            let p = ConvParams { stride, pad };
            Case {
                inputs: vec![
                    rand_tensor(rng, &xs, -1.0, 1.0),
                    rand_tensor(rng, &ws, -1.0, 1.0),
                    rand_tensor(rng, &[2], -1.0, 1.0),
                ],
                build: Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), p).unwrap()),
                oracle: Box::new(move |v| conv_f64(&v[0], xs, &v[1], ws, Some(&v[2]), stride, pad).0),
            }
        }
        "linear" => Case {
            inputs: vec![
                rand_tensor(rng, &[3, 6], -1.0, 1.0),
                rand_tensor(rng, &[4, 6], -1.0, 1.0),
                rand_tensor(rng, &[4], -1.0, 1.0),
            ],
            build: Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap()),
            oracle: Box::new(|v| linear_f64(&v[0], 3, 6, &v[1], 4, Some(&v[2]))),
        },
        "relu" => Case {
            inputs: vec![Tensor::from_fn(&[48], |_| away_from(rng, -1.0, 1.0, &[0.0], 0.01))],
            build: Box::new(|g, v| g.relu(v[0])),
            oracle: Box::new(|v| v[0].iter().map(|&x| x.max(0.0)).collect()),
        },
        "maxpool2x2" => {
            let mut levels: Vec<f32> = (0..32).map(|i| i as f32 * 0.01).collect();
            levels.shuffle(rng);
            Case {
                inputs: vec![Tensor::new(vec![1, 2, 4, 4], levels).unwrap()],
                build: Box::new(|g, v| g.maxpool2x2(v[0]).unwrap()),
                oracle: Box::new(|v| {
                    let mut out = vec![];
                    for c in 0..2 {
                        for oy in 0..2 {
                            for ox in 0..2 {
                                let at = |dy: usize, dx: usize| v[0][(c * 4 + oy * 2 + dy) * 4 + ox * 2 + dx];
                                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
                            }
                        }
                    }
                    out
                }),
            }
        }
        "cross_entropy" => {
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
            let l2 = labels.clone();
            Case {
                inputs: vec![rand_tensor(rng, &[4, 6], -2.0, 2.0)],
                build: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels).unwrap()),
                oracle: Box::new(move |v| {
                    let mut loss = 0.0;
                    for (i, row) in v[0].chunks(6).enumerate() {
                        let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
                        loss += lse - row[l2[i]];
                    }
                    vec![loss / 4.0]
                }),
            }
        }
        "sc_act" => {
            let scale: f32 = rng.random_range(0.5..2.0);
            Case {
                inputs: vec![rand_tensor(rng, &[40], 0.01, 2.0), rand_tensor(rng, &[40], 0.01, 2.0)],
                build: Box::new(move |g, v| g.pointwise(Arc::new(ScAct { scale }), &[v[0], v[1]]).unwrap()),
                oracle: Box::new(move |v| {
                    let s = scale as f64;
                    v[0].iter().zip(&v[1]).map(|(a, b)| s * ((-b / s).exp() - (-a / s).exp())).collect()
                }),
            }
        }
        "analog_act" => {
            let (cp, cn): (f32, f32) = (rng.random_range(0.3..1.5), rng.random_range(0.3..1.5));
            Case {
                inputs: vec![
                    Tensor::from_fn(&[40], |_| away_from(rng, 0.01, 2.0, &[cp], 0.01)),
                    Tensor::from_fn(&[40], |_| away_from(rng, 0.01, 2.0, &[cn], 0.01)),
                ],
                build: Box::new(move |g, v| {
                    let f = AnalogAct { clip_pos: cp, clip_neg: cn };
                    g.pointwise(Arc::new(f), &[v[0], v[1]]).unwrap()
                }),
                oracle: Box::new(move |v| {
                    v[0].iter().zip(&v[1]).map(|(a, b)| a.min(cp as f64) - b.min(cn as f64)).collect()
                }),
            }
        }
        other => panic!("unknown op {other}"),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs `trials` random checks of `op`.
pub fn check_op(op: &'static str, trials: usize, rng: &mut ChaCha8Rng) -> OpResult {
    let mut res = OpResult {
        op,
        trials,
        worst: 0.0,
        forward_err: 0.0,
    };
    for _ in 0..trials {
        let c = case(op, rng);
        let mut g = Graph::new();
        let vars: Vec<Var> = c.inputs.iter().map(|t| g.param(t.clone())).collect();
        let y = (c.build)(&mut g, &vars);
        let yv = g.value(y).clone();
        let r = Tensor::from_fn(yv.shape(), |_| rng.random_range(-1.0..1.0));
        let rv = g.constant(r.clone());
        let prod = g.mul(y, rv).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();

        let base: Vec<Vec<f64>> = c.inputs.iter().map(super::f64s).collect();
        let y64 = (c.oracle)(&base);
        for (a, b) in yv.data().iter().zip(&y64) {
            res.forward_err = res.forward_err.max((*a as f64 - b).abs() / (1.0 + b.abs()));
        }
        let objective = |v: &[Vec<f64>]| -> f64 { (c.oracle)(v).iter().zip(r.data()).map(|(y, r)| y * *r as f64).sum() };
        for (i, var) in vars.iter().enumerate() {
            let analytic: Vec<f64> = grads.get(*var).expect("input gradient").data().iter().map(|&v| v as f64).collect();
            let mut numeric = vec![0.0; analytic.len()];
            let mut p = base.clone();
            for (j, n) in numeric.iter_mut().enumerate() {
                p[i][j] = base[i][j] + H;
                let up = objective(&p);
                p[i][j] = base[i][j] - H;
                let down = objective(&p);
                p[i][j] = base[i][j];
                *n = (up - down) / (2.0 * H);
            }
            let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
            let scale = norm(&analytic).max(norm(&numeric)).max(1e-12);
            res.worst = res.worst.max(norm(&diff) / scale);
        }
    }
    res
}

//! Tape-based reverse-mode autograd.
//!
//! A [`Graph`] is built fresh for every training step. Nodes are appended in
//! creation order and only reference earlier nodes, so the tape is acyclic by
//! construction and reverse insertion order is a valid reverse topological
//! order.

use std::fmt;
use std::sync::Arc;

use crate::counters;
use crate::error::{Error, Result};
use crate::exact::{self, ConvParams};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An elementwise function of one or two equally shaped tensors.
///
/// Implementations must be pure functions of the input values and the
/// element index: the checkpointed path re-runs `forward` during the
/// backward pass and relies on getting the same bits back.
pub trait PointwiseFn: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Number of inputs, 1 or 2.
    fn arity(&self) -> usize;

    fn forward(&self, inputs: &[&[f32]], out: &mut [f32]) -> Result<()>;

    /// Overwrites `grads[i]` with `grad_out * d out / d input_i`.
    fn backward(&self, inputs: &[&[f32]], grad_out: &[f32], grads: &mut [Vec<f32>]);

    /// False for functions that draw unkeyed randomness; those cannot be
    /// recomputed and are refused by [`Graph::checkpointed_apply`].
    fn is_deterministic(&self) -> bool {
        true
    }
}

pub type Pointwise = Arc<dyn PointwiseFn>;

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        p: ConvParams,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    PositivePart(Var),
    NegativePart(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    BiasAdd {
        x: Var,
        b: Var,
    },
    FakeQuant(Var),
    Pointwise {
        f: Pointwise,
        inputs: Vec<Var>,
    },
    Checkpointed {
        chain: Vec<Pointwise>,
        inputs: Vec<Var>,
    },
    StraightThrough {
        proxy: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn elementwise_sum(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a new constant leaf, cutting the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Bytes held by the tape for the backward pass: every node value plus
    /// op-private saved state.
    pub fn stored_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                n.value.nbytes()
                    + match &n.op {
                        Op::MaxPool { argmax, .. } => argmax.len() * 4,
                        Op::SoftmaxCe { probs, labels, .. } => probs.nbytes() + labels.len() * 8,
                        _ => 0,
                    }
            })
            .sum()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: ConvParams) -> Result<Var> {
        let value = exact::conv2d_exact(self.value(x), self.value(w), b.map(|b| self.value(b)), p)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, p }, &parents))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = exact::linear_exact(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = exact::relu(self.value(x));
        counters::bump(|c| c.pointwise_elements += value.numel() as u64);
        self.push(value, Op::Relu(x), &[x])
    }

    /// `max(x, 0)`; used to split weights by sign.
    pub fn positive_part(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::PositivePart(x), &[x])
    }

    /// `max(-x, 0)`.
    pub fn negative_part(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| (-v).max(0.0));
        self.push(value, Op::NegativePart(x), &[x])
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (value, argmax) = exact::maxpool2x2(self.value(x))?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Collapses `[N, ...]` to `[N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Adds `b[C]` along axis 1 of `x[N, C, ...]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bv = self.value(b);
        if xs.len() < 2 || bv.shape() != [xs[1]] {
            return Err(Error::shape("bias_add", format!("x {xs:?}, bias {:?}", bv.shape())));
        }
        let inner: usize = xs[2..].iter().product();
        let c = xs[1];
        let mut data = self.value(x).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bv.data()[(i / inner) % c];
        }
        Ok(self.push(Tensor::from_parts(xs, data), Op::BiasAdd { x, b }, &[x, b]))
    }

    /// 8-bit sign-magnitude fake quantisation with a straight-through
    /// gradient.
    pub fn fake_quant(&mut self, x: Var) -> Var {
        let value = crate::mult::fake_quantize8(self.value(x));
        self.push(value, Op::FakeQuant(x), &[x])
    }

    fn check_pointwise_inputs(&self, f: &dyn PointwiseFn, inputs: &[Var]) -> Result<()> {
        if f.arity() != inputs.len() {
            return Err(Error::arg(
                "pointwise",
                format!("{} takes {} inputs, got {}", f.name(), f.arity(), inputs.len()),
            ));
        }
        let shape = self.value(inputs[0]).shape();
        for &v in &inputs[1..] {
            if self.value(v).shape() != shape {
                return Err(Error::shape("pointwise", format!("{} input shapes differ", f.name())));
            }
        }
        Ok(())
    }

    /// Applies `f` as an ordinary node whose output stays on the tape.
    pub fn pointwise(&mut self, f: Pointwise, inputs: &[Var]) -> Result<Var> {
        self.check_pointwise_inputs(f.as_ref(), inputs)?;
        let shape = self.value(inputs[0]).shape().to_vec();
        let slices: Vec<&[f32]> = inputs.iter().map(|&v| self.value(v).data()).collect();
        let mut out = vec![0.0f32; slices[0].len()];
        f.forward(&slices, &mut out)?;
        counters::bump(|c| c.pointwise_elements += out.len() as u64);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Pointwise {
                f,
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    /// Applies a chain of pointwise functions `chain[n-1](...chain[0](inputs))`
    /// as a single checkpointed node: only the chain inputs and the final
    /// output are kept, and the intermediate values are recomputed in the
    /// backward pass.
    pub fn checkpointed_apply(&mut self, chain: Vec<Pointwise>, inputs: &[Var]) -> Result<Var> {
        let Some(first) = chain.first() else {
            return Err(Error::arg("checkpointed_apply", "empty chain"));
        };
        self.check_pointwise_inputs(first.as_ref(), inputs)?;
        for f in &chain {
            if !f.is_deterministic() {
                return Err(Error::arg(
                    "checkpointed_apply",
                    format!("{} is not a pure function of its inputs and key", f.name()),
                ));
            }
        }
        if let Some(f) = chain[1..].iter().find(|f| f.arity() != 1) {
            return Err(Error::arg(
                "checkpointed_apply",
                format!("{} must be unary to follow another function", f.name()),
            ));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        let slices: Vec<&[f32]> = inputs.iter().map(|&v| self.value(v).data()).collect();
        let outs = run_chain(&chain, &slices)?;
        let value = Tensor::new(shape, outs.into_iter().last().expect("non-empty chain"))?;
        Ok(self.push(
            value,
            Op::Checkpointed {
                chain,
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    /// A node whose forward value is `value` (e.g. from an accurate
    /// approximate-hardware kernel) and whose gradient flows unchanged to
    /// `proxy`.
    pub fn straight_through(&mut self, value: Tensor, proxy: Var) -> Result<Var> {
        value.expect_same_shape(self.value(proxy), "straight_through")?;
        value.ensure_finite("straight_through value")?;
        Ok(self.push(value, Op::StraightThrough { proxy }, &[proxy]))
    }

    /// Mean softmax cross-entropy; returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = exact::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::arg(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, contribution) in self.local_backward(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                grads[parent.0] = Some(match grads[parent.0].take() {
                    Some(acc) => elementwise_sum(&acc, &contribution),
                    None => contribution,
                });
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, p } => {
                let (dx, dw, db) = exact::conv2d_backward(val(*x), val(*w), g, *p)?;
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = exact::linear_backward(val(*x), val(*w), g)?;
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::Relu(x) | Op::PositivePart(x) => {
                let d = val(*x).zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 })?;
                vec![(*x, d)]
            }
            Op::NegativePart(x) => {
                let d = val(*x).zip_map(g, |v, gv| if v < 0.0 { -gv } else { 0.0 })?;
                vec![(*x, d)]
            }
            Op::MaxPool { x, argmax } => {
                let mut d = Tensor::zeros(val(*x).shape());
                let dd = d.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dd[src as usize] += gv;
                }
                vec![(*x, d)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |gv, bv| gv * bv)?),
                (*b, g.zip_map(val(*a), |gv, av| gv * av)?),
            ],
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * s))],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
            Op::BiasAdd { x, b } => {
                let xs = val(*x).shape();
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                let mut db = vec![0.0f32; c];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[(i / inner) % c] += gv;
                }
                vec![(*x, g.clone()), (*b, Tensor::from_parts(vec![c], db))]
            }
            Op::FakeQuant(x) | Op::StraightThrough { proxy: x } => vec![(*x, g.clone())],
            Op::Pointwise { f, inputs } => {
                let slices: Vec<&[f32]> = inputs.iter().map(|&v| val(v).data()).collect();
                let mut grads = vec![vec![0.0f32; g.numel()]; inputs.len()];
                f.backward(&slices, g.data(), &mut grads);
                counters::bump(|c| c.pointwise_elements += g.numel() as u64);
                let shape = g.shape().to_vec();
                inputs
                    .iter()
                    .zip(grads)
                    .map(|(&v, d)| (v, Tensor::from_parts(shape.clone(), d)))
                    .collect()
            }
            Op::Checkpointed { chain, inputs } => {
                let slices: Vec<&[f32]> = inputs.iter().map(|&v| val(v).data()).collect();
                let outs = run_chain(&chain[..chain.len() - 1], &slices)?;
                let mut grad = g.data().to_vec();
                for i in (1..chain.len()).rev() {
                    let mut gi = vec![vec![0.0f32; grad.len()]];
                    chain[i].backward(&[&outs[i - 1]], &grad, &mut gi);
                    counters::bump(|c| c.pointwise_elements += grad.len() as u64);
                    grad = gi.pop().expect("unary");
                }
                let mut grads = vec![vec![0.0f32; grad.len()]; inputs.len()];
                chain[0].backward(&slices, &grad, &mut grads);
                counters::bump(|c| c.pointwise_elements += grad.len() as u64);
                let shape = g.shape().to_vec();
                inputs
                    .iter()
                    .zip(grads)
                    .map(|(&v, d)| (v, Tensor::from_parts(shape.clone(), d)))
                    .collect()
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let m = probs.shape()[1];
                let n = labels.len() as f32;
                let scale = g.data()[0] / n;
                let mut d = probs.data().to_vec();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * m + l] -= 1.0;
                }
                for v in &mut d {
                    *v *= scale;
                }
                vec![(*logits, Tensor::from_parts(probs.shape().to_vec(), d))]
            }
        })
    }
}

/// Runs a pointwise chain, returning the output of every stage.
fn run_chain(chain: &[Pointwise], inputs: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
    let n = inputs[0].len();
    let mut outs: Vec<Vec<f32>> = Vec::with_capacity(chain.len());
    for (i, f) in chain.iter().enumerate() {
        let mut out = vec![0.0f32; n];
        if i == 0 {
            f.forward(inputs, &mut out)?;
        } else {
            f.forward(&[&outs[i - 1]], &mut out)?;
        }
        counters::bump(|c| c.pointwise_elements += n as u64);
        outs.push(out);
    }
    Ok(outs)
}

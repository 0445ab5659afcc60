//! Recompute-in-backward against keeping every pointwise output on the tape.

use std::sync::Arc;

use axtrain::data::{synth_dataset_with, SynthOptions};
use axtrain::graph::{Graph, Pointwise, Var};
use axtrain::inject::{ErrorModelType1, InjectType1};
use axtrain::model::{ArchConfig, Hardware, KernelMode, Model, Phase, StepCtx};
use axtrain::proxy::ScAct;
use axtrain::rng::NoiseKey;
use axtrain::trainer::{calibrate, time_steps, TrainPlan};
use rand::Rng;

use super::{rand_tensor, rng};

/// Gradient bit patterns and tape bytes of a three-stage proxy chain:
/// each stage splits `h` by sign, applies sc_act then Type 1 injection,
/// and scales by a parameter.
pub fn proxy_chain(seed: u64, checkpoint: bool) -> (Vec<Vec<u32>>, usize) {
    let mut r = rng(seed);
    let n = r.random_range(8..200);
    let mut g = Graph::new();
    let x = g.param(rand_tensor(&mut r, &[n], -2.0, 2.0));
    let mut params = vec![x];
    let mut h = x;
    for stage in 0..3u32 {
        let a = g.positive_part(h);
        let b = g.negative_part(h);
        let model = ErrorModelType1 {
            mean_poly: (0..4).map(|_| r.random_range(-0.1..0.1)).collect(),
            std_poly: (0..4).map(|_| r.random_range(0.0..0.1)).collect(),
            lo: -1.0,
            hi: 1.0,
            calibrated_at: 0,
        };
        let key = NoiseKey {
            base_seed: seed,
            layer: stage,
            batch: 0,
            element: 0,
        };
        let chain: Vec<Pointwise> = vec![
            Arc::new(ScAct {
                scale: r.random_range(0.5..2.0),
            }),
            Arc::new(InjectType1 {
                model: Arc::new(model),
                key,
            }),
        ];
        let y = if checkpoint {
            g.checkpointed_apply(chain, &[a, b]).unwrap()
        } else {
            let mut cur = vec![a, b];
            for f in chain {
                cur = vec![g.pointwise(f, &cur).unwrap()];
            }
            cur[0]
        };
        let w = g.param(rand_tensor(&mut r, &[n], -1.5, 1.5));
        params.push(w);
        h = g.mul(y, w).unwrap();
    }
    let rv = g.constant(rand_tensor(&mut r, &[n], -1.0, 1.0));
    let prod = g.mul(h, rv).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();
    let bits = params
        .iter()
        .map(|&p: &Var| grads.get(p).unwrap().data().iter().map(|v| v.to_bits()).collect())
        .collect();
    (bits, g.stored_bytes())
}

pub struct Equivalence {
    pub trials: usize,
    pub identical: bool,
    pub always_smaller: bool,
    pub bytes_with: usize,
    pub bytes_without: usize,
}

pub fn chain_equivalence(trials: usize) -> Equivalence {
    let mut e = Equivalence {
        trials,
        identical: true,
        always_smaller: true,
        bytes_with: 0,
        bytes_without: 0,
    };
    for t in 0..trials as u64 {
        let (ga, ba) = proxy_chain(t, true);
        let (gb, bb) = proxy_chain(t, false);
        e.identical &= ga == gb;
        e.always_smaller &= ba < bb;
        e.bytes_with += ba;
        e.bytes_without += bb;
    }
    e
}

/// Median over `rounds` of the checkpointed / plain injection-step time on
/// the reference TinyConv shapes at batch 64. Rounds alternate the order.
pub fn recompute_overhead(method: KernelMode, rounds: usize, iters: usize) -> f64 {
    let arch = ArchConfig::default();
    let opts = SynthOptions {
        channels: arch.input_channels,
        size: arch.input_size,
        noise: 0.5,
    };
    let data = synth_dataset_with(10, 250, 3, &opts).unwrap();
    let hw = Hardware::default();
    let mut model = Model::tiny_conv(&arch, method, 1).unwrap();
    let (x, _) = data.batch(&(0..64).collect::<Vec<_>>()).unwrap();
    calibrate(&mut model, &x, &hw, true, 0).unwrap();
    let plan = |checkpoint_pointwise| TrainPlan {
        method,
        batch_size: 64,
        checkpoint_pointwise,
        ..Default::default()
    };
    let secs = |c: bool| {
        time_steps(&plan(c), &mut model.clone(), &data, &hw, Phase::Injection, iters)
            .unwrap()
            .mean_secs()
            .unwrap()
    };
    secs(false);
    let mut ratios: Vec<f64> = (0..rounds)
        .map(|r| {
            if r % 2 == 0 {
                let on = secs(true);
                on / secs(false)
            } else {
                let off = secs(false);
                secs(true) / off
            }
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    ratios[ratios.len() / 2]
}

/// Tape bytes of one calibrated injection step with and without
/// checkpointing, and whether the parameter gradients are bit-identical.
pub fn injection_step_equivalence(method: KernelMode) -> (usize, usize, bool) {
    let (tr, _) = super::desk::desk_data(0.5, 60, 10);
    let hw = Hardware::default();
    let mut m = super::desk::model(method, 3);
    calibrate(&mut m, &tr.images, &hw, true, 0).unwrap();
    let mut out = vec![];
    for checkpoint in [true, false] {
        let ctx = StepCtx {
            hw: &hw,
            phase: Phase::Injection,
            proxy: true,
            checkpoint,
            noise_seed: 9,
            step: 1,
            refresh_scales: false,
            fit_errors: false,
        };
        let mut g = Graph::new();
        let f = m.forward(&mut g, &tr.images, &ctx).unwrap();
        let loss = g.softmax_cross_entropy(f.logits, &tr.labels).unwrap();
        let grads = g.backward(loss).unwrap();
        let bits: Vec<Vec<u32>> = f
            .params
            .iter()
            .map(|&p| grads.get(p).unwrap().data().iter().map(|v| v.to_bits()).collect())
            .collect();
        out.push((g.stored_bytes(), bits));
    }
    (out[0].0, out[1].0, out[0].1 == out[1].1)
}

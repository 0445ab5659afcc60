//! Training schedule: a main phase (exact pretraining, error injection or
//! accurate modeling) followed by accurate-model fine-tuning, with
//! calibration batches and per-epoch evaluation on accurate kernels.

use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::counters;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Hardware, KernelMode, Model, Phase, StepCtx};
use crate::optim::{Sgd, SgdConfig};
use crate::rng::{mix, seeded};
use crate::tensor::Tensor;

pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub method: KernelMode,
    /// Forward model of the main phase.
    pub main_phase: Phase,
    /// Length of the main phase, in epochs.
    pub injection_epochs: f64,
    /// Accurate-model epochs after the main phase, at a tenth of the rate.
    pub finetune_epochs: f64,
    /// Nonlinear proxy activations in the backward model.
    pub proxy: bool,
    /// Recompute the pointwise proxy and injection chain during backward.
    pub checkpoint_pointwise: bool,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Type 1 calibrations per epoch.
    pub type1_per_epoch: usize,
    /// Batches between Type 2 calibrations.
    pub type2_every: usize,
    /// Evaluate every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            method: KernelMode::Sc,
            main_phase: Phase::Injection,
            injection_epochs: 1.0,
            finetune_epochs: 0.0,
            proxy: true,
            checkpoint_pointwise: false,
            batch_size: 64,
            sgd: SgdConfig::default(),
            seed: 0,
            type1_per_epoch: 5,
            type2_every: 10,
            eval_every: 1,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, e) in [("injection_epochs", self.injection_epochs), ("finetune_epochs", self.finetune_epochs)] {
            if !(e >= 0.0 && e.is_finite()) {
                return bad(format!("{name} = {e} must be finite and non-negative"));
            }
        }
        if self.injection_epochs + self.finetune_epochs <= 0.0 {
            return bad("injection_epochs + finetune_epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.sgd.lr > 0.0 && self.sgd.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.sgd.lr));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) || !(self.sgd.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight decay non-negative".into());
        }
        if self.type1_per_epoch == 0 || self.type2_every == 0 {
            return bad("calibration cadence must be positive".into());
        }
        if self.method == KernelMode::Exact && self.main_phase != Phase::Exact {
            return bad("method exact only supports main_phase = exact".into());
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// `ceil(epochs * B)`, with a small tolerance for decimal fractions.
    pub fn steps_for(epochs: f64, batches: usize) -> usize {
        let s = epochs * batches as f64;
        let r = s.round();
        if (s - r).abs() < 1e-9 {
            r as usize
        } else {
            s.ceil() as usize
        }
    }

    /// Batch indices within an epoch of `batches` that calibrate.
    pub fn calibration_batches(&self, batches: usize) -> Vec<usize> {
        let mut v: Vec<usize> = match self.method {
            KernelMode::Analog => (0..batches).step_by(self.type2_every).collect(),
            _ => (0..self.type1_per_epoch).map(|i| i * batches / self.type1_per_epoch).collect(),
        };
        v.dedup();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// Epoch index within the phase.
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub mean_iter_secs: f64,
    pub calibrations: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub steps: u64,
    pub total_secs: f64,
}

impl StepTiming {
    fn add(&mut self, secs: f64) {
        self.steps += 1;
        self.total_secs += secs;
    }

    pub fn mean_secs(&self) -> Option<f64> {
        (self.steps > 0).then(|| self.total_secs / self.steps as f64)
    }
}

/// Wall time per kind of step. Injection-phase calibration batches are
/// counted under `calibration`, not under `injection`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub exact: StepTiming,
    pub injection: StepTiming,
    pub calibration: StepTiming,
    pub accurate: StepTiming,
}

impl Timing {
    /// Mean over all injection-phase steps, calibration batches included.
    pub fn injection_phase_mean(&self) -> Option<f64> {
        let steps = self.injection.steps + self.calibration.steps;
        (steps > 0).then(|| (self.injection.total_secs + self.calibration.total_secs) / steps as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub loss: f32,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: KernelMode,
    pub epochs: Vec<EpochRecord>,
    /// Accurate-kernel accuracy after training; absent if training diverged.
    pub final_accuracy: Option<f64>,
    pub total_steps: usize,
    pub type1_calibrations: u64,
    pub type2_calibrations: u64,
    pub peak_stored_bytes: usize,
    pub timing: Timing,
    pub diverged: Option<Divergence>,
}

impl RunReport {
    /// The report with every wall-clock field zeroed.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        r.timing = Timing::default();
        for e in &mut r.epochs {
            e.mean_iter_secs = 0.0;
        }
        r
    }
}

/// Top-1 accuracy of the accurate kernels; touches no proxies, injection or
/// layer state.
pub fn evaluate(model: &Model, data: &Dataset, hw: &Hardware) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::arg("evaluate", "dataset is empty"));
    }
    let before = counters::snapshot();
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let logits = model.predict(&data.images.slice_batch(start, end)?, hw)?;
        correct += argmax_rows(&logits).iter().zip(&data.labels[start..end]).filter(|(p, l)| p == l).count();
    }
    let d = counters::snapshot().since(&before);
    if d.proxy_calls != 0 || d.inject_calls != 0 {
        return Err(Error::Invariant("evaluation invoked a proxy or injection function".into()));
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

struct Stage {
    phase: Phase,
    steps: usize,
    lr: f32,
}

enum StepKind {
    Exact,
    Injection,
    Calibration,
    Accurate,
}

/// Runs the plan on `model` (switched to `plan.method`). Evaluates on
/// `eval`, or on `train` when `eval` is `None`.
pub fn train(plan: &TrainPlan, model: &mut Model, train: &Dataset, eval: Option<&Dataset>, hw: &Hardware) -> Result<RunReport> {
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::arg("train", "training set is empty"));
    }
    let eval = eval.unwrap_or(train);
    model.set_mode(plan.method);
    let batches = plan.batches_per_epoch(train.len());
    let calib = plan.calibration_batches(batches);
    let stages = [
        Stage {
            phase: plan.main_phase,
            steps: TrainPlan::steps_for(plan.injection_epochs, batches),
            lr: plan.sgd.lr,
        },
        Stage {
            phase: if plan.method == KernelMode::Exact { Phase::Exact } else { Phase::Accurate },
            steps: TrainPlan::steps_for(plan.finetune_epochs, batches),
            lr: plan.sgd.lr / 10.0,
        },
    ];
    let noise_seed = mix(&[plan.seed, 0x6e6f697365]);
    let mut opt = Sgd::new(plan.sgd);
    let start_counters = counters::snapshot();
    let mut report = RunReport {
        method: plan.method,
        epochs: vec![],
        final_accuracy: None,
        total_steps: 0,
        type1_calibrations: 0,
        type2_calibrations: 0,
        peak_stored_bytes: 0,
        timing: Timing::default(),
        diverged: None,
    };
    let mut global_step = 0u64;

    'stages: for (si, stage) in stages.iter().enumerate() {
        let mut order: Vec<usize> = vec![];
        let (mut loss_sum, mut epoch_steps, mut epoch_secs) = (0.0f64, 0usize, 0.0f64);
        let mut epoch_calibs = 0u64;
        for s in 0..stage.steps {
            let (epoch, b) = (s / batches, s % batches);
            if b == 0 {
                order = (0..train.len()).collect();
                order.shuffle(&mut seeded(&[plan.seed, si as u64, epoch as u64]));
            }
            let idx = &order[b * plan.batch_size..((b + 1) * plan.batch_size).min(train.len())];
            let (x, labels) = train.batch(idx)?;
            let is_calib = stage.phase != Phase::Exact && calib.binary_search(&b).is_ok();
            let injecting = stage.phase == Phase::Injection;
            let ctx = StepCtx {
                hw,
                phase: if injecting && is_calib { Phase::Accurate } else { stage.phase },
                proxy: plan.proxy,
                checkpoint: plan.checkpoint_pointwise,
                noise_seed,
                step: global_step,
                refresh_scales: is_calib,
                fit_errors: injecting && is_calib,
            };
            let kind = match stage.phase {
                Phase::Exact => StepKind::Exact,
                Phase::Injection if is_calib => StepKind::Calibration,
                Phase::Injection => StepKind::Injection,
                Phase::Accurate => StepKind::Accurate,
            };

            if matches!(kind, StepKind::Calibration) {
                epoch_calibs += 1;
                match plan.method {
                    KernelMode::Analog => report.type2_calibrations += 1,
                    _ => report.type1_calibrations += 1,
                }
            }
            let t0 = Instant::now();
            match step(model, &mut opt, &x, &labels, &ctx, stage.lr, &mut report.peak_stored_bytes)? {
                Ok(loss) => loss_sum += loss as f64,
                Err(d) => {
                    warn!("training diverged at step {global_step}: {}", d.detail);
                    report.diverged = Some(Divergence {
                        step: global_step as usize,
                        ..d
                    });
                    report.total_steps = global_step as usize;
                    break 'stages;
                }
            }
            let secs = t0.elapsed().as_secs_f64();
            match kind {
                StepKind::Exact => report.timing.exact.add(secs),
                StepKind::Injection => report.timing.injection.add(secs),
                StepKind::Calibration => report.timing.calibration.add(secs),
                StepKind::Accurate => report.timing.accurate.add(secs),
            }
            epoch_secs += secs;
            epoch_steps += 1;
            global_step += 1;

            if b + 1 == batches || s + 1 == stage.steps {
                let eval_accuracy = match plan.eval_every {
                    0 => None,
                    k if (epoch + 1) % k == 0 || s + 1 == stage.steps => Some(evaluate(model, eval, hw)?),
                    _ => None,
                };
                let rec = EpochRecord {
                    phase: stage.phase,
                    epoch,
                    steps: epoch_steps,
                    train_loss: loss_sum / epoch_steps as f64,
                    eval_accuracy,
                    mean_iter_secs: epoch_secs / epoch_steps as f64,
                    calibrations: epoch_calibs,
                };
                info!(
                    "{:?} epoch {} loss {:.4} acc {:?} ({} steps)",
                    rec.phase, rec.epoch, rec.train_loss, rec.eval_accuracy, rec.steps
                );
                report.epochs.push(rec);
                (loss_sum, epoch_steps, epoch_secs, epoch_calibs) = (0.0, 0, 0.0, 0);
            }
        }
    }
    let d = counters::snapshot().since(&start_counters);
    let weighted = model.layers.iter().filter(|l| l.weight.is_some()).count() as u64;
    if d.type1_calibrations != report.type1_calibrations * weighted || d.type2_calibrations != report.type2_calibrations * weighted {
        return Err(Error::Invariant(format!(
            "{} + {} layer fits for {} + {} calibration batches over {weighted} layers",
            d.type1_calibrations, d.type2_calibrations, report.type1_calibrations, report.type2_calibrations
        )));
    }
    if report.diverged.is_none() {
        report.total_steps = global_step as usize;
        report.final_accuracy = Some(match report.epochs.last().and_then(|e| e.eval_accuracy) {
            Some(a) => a,
            None => evaluate(model, eval, hw)?,
        });
    }
    Ok(report)
}

/// One optimizer step. Numerical failures come back as `Ok(Err(..))`.
fn step(
    model: &mut Model,
    opt: &mut Sgd,
    x: &Tensor,
    labels: &[usize],
    ctx: &StepCtx<'_>,
    lr: f32,
    peak: &mut usize,
) -> Result<std::result::Result<f32, Divergence>> {
    let diverged = |loss: f32, e: Error| match e {
        Error::NonFinite(detail) => Ok(Err(Divergence { step: 0, loss, detail })),
        e => Err(e),
    };
    let mut g = Graph::new();
    let out = match model.forward(&mut g, x, ctx) {
        Ok(o) => o,
        Err(e) => return diverged(f32::NAN, e),
    };
    let loss = match g.softmax_cross_entropy(out.logits, labels) {
        Ok(l) => l,
        Err(e) => return diverged(f32::NAN, e),
    };
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return diverged(value, Error::NonFinite(format!("loss {value}")));
    }
    let mut grads = match g.backward(loss) {
        Ok(gr) => gr,
        Err(e) => return diverged(value, e),
    };
    let grads = out
        .params
        .iter()
        .map(|&p| grads.take(p).ok_or_else(|| Error::Invariant("parameter without gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    *peak = (*peak).max(g.stored_bytes());
    match opt.step(model.parameters_mut(), &grads, lr) {
        Ok(()) => Ok(Ok(value)),
        Err(e) => diverged(value, e),
    }
}

/// Accurate forward pass on `x` that refreshes layer scales and fits the
/// error models; weights are untouched.
pub fn calibrate(model: &mut Model, x: &Tensor, hw: &Hardware, proxy: bool, step: u64) -> Result<()> {
    let ctx = StepCtx {
        hw,
        phase: Phase::Accurate,
        proxy,
        checkpoint: false,
        noise_seed: 0,
        step,
        refresh_scales: true,
        fit_errors: true,
    };
    model.forward(&mut Graph::new(), x, &ctx)?;
    Ok(())
}

/// Times `iters` optimizer steps in `phase` on consecutive batches of
/// `data`. Injection needs calibrated error models.
pub fn time_steps(plan: &TrainPlan, model: &mut Model, data: &Dataset, hw: &Hardware, phase: Phase, iters: usize) -> Result<StepTiming> {
    plan.validate()?;
    let batches = plan.batches_per_epoch(data.len());
    let mut opt = Sgd::new(plan.sgd);
    let mut timing = StepTiming::default();
    let mut peak = 0;
    for s in 0..iters {
        let b = s % batches;
        let idx: Vec<usize> = (b * plan.batch_size..((b + 1) * plan.batch_size).min(data.len())).collect();
        let (x, labels) = data.batch(&idx)?;
        let ctx = StepCtx {
            hw,
            phase,
            proxy: plan.proxy,
            checkpoint: plan.checkpoint_pointwise,
            noise_seed: plan.seed,
            step: s as u64,
            refresh_scales: false,
            fit_errors: false,
        };
        let t0 = Instant::now();
        if let Err(d) = step(model, &mut opt, &x, &labels, &ctx, plan.sgd.lr, &mut peak)? {
            return Err(Error::Diverged { step: s, loss: d.loss });
        }
        timing.add(t0.elapsed().as_secs_f64());
    }
    Ok(timing)
}

/// Accurate-model training on the first `ceil(fraction * B)` batches of one
/// epoch.
pub fn finetune_fraction(plan: &TrainPlan, model: &mut Model, data: &Dataset, eval: Option<&Dataset>, hw: &Hardware, fraction: f64) -> Result<RunReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fine-tune fraction {fraction} must be in (0, 1]")));
    }
    let plan = TrainPlan {
        injection_epochs: 0.0,
        finetune_epochs: fraction,
        main_phase: if plan.method == KernelMode::Exact { Phase::Exact } else { plan.main_phase },
        ..plan.clone()
    };
    train(&plan, model, data, eval, hw)
}

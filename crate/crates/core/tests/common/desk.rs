//! Small synthetic training setups shared by the trainer tests and the
//! acceptance harness.

use axtrain::checkpoint::{encode, model_records};
use axtrain::data::{synth_dataset_with, Dataset, SynthOptions};
use axtrain::model::{ArchConfig, Hardware, KernelMode, Model, Phase};
use axtrain::optim::SgdConfig;
use axtrain::trainer::{evaluate, train, RunReport, TrainPlan};

pub const TRAIN_N: usize = 1280;
pub const TEST_N: usize = 1000;
pub const DATA_SEED: u64 = 7;
pub const EPOCHS: f64 = 8.0;

pub fn small_arch() -> ArchConfig {
    ArchConfig {
        input_channels: 1,
        input_size: 16,
        widths: [8, 16, 16],
        classes: 10,
    }
}

/// Disjoint train and test splits of one synthetic draw.
pub fn desk_data(noise: f32, train_n: usize, test_n: usize) -> (Dataset, Dataset) {
    let opts = SynthOptions {
        channels: 1,
        size: 16,
        noise,
    };
    let all = synth_dataset_with(10, train_n + test_n, DATA_SEED, &opts).unwrap();
    (all.slice(0, train_n, "train").unwrap(), all.slice(train_n, train_n + test_n, "test").unwrap())
}

pub fn plan(method: KernelMode, phase: Phase, epochs: f64, lr: f32, seed: u64) -> TrainPlan {
    TrainPlan {
        method,
        main_phase: phase,
        injection_epochs: epochs,
        batch_size: 64,
        seed,
        eval_every: 0,
        sgd: SgdConfig { lr, ..Default::default() },
        ..Default::default()
    }
}

pub fn model(method: KernelMode, seed: u64) -> Model {
    Model::tiny_conv(&small_arch(), method, seed).unwrap()
}

pub fn model_bytes(m: &Model) -> Vec<u8> {
    encode(&model_records(m))
}

pub fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Final accuracy, with a diverged run scored as chance.
pub fn accuracy_or_chance(r: &RunReport, classes: usize) -> f64 {
    match (&r.diverged, r.final_accuracy) {
        (None, Some(a)) => a,
        _ => 1.0 / classes as f64,
    }
}

/// Accuracies of the four arms compared by the injection-ordering check.
#[derive(Clone, Copy, Debug)]
pub struct Arms {
    pub inference_only: f64,
    pub injection: f64,
    pub accurate: f64,
    pub injection_finetune: f64,
}

/// Per-method protocol of the injection-ordering check.
#[derive(Clone, Copy, Debug)]
pub struct ArmSetup {
    pub method: KernelMode,
    pub noise: f32,
    pub lr: f32,
    /// Start the injection and accurate arms from the pretrained weights,
    /// with half the epochs.
    pub from_pretrained: bool,
    pub finetune_epochs: f64,
}

pub fn run_arms(s: &ArmSetup, seed: u64) -> Arms {
    let (tr, te) = desk_data(s.noise, TRAIN_N, TEST_N);
    let hw = Hardware::default();
    let run = |p: TrainPlan, m: &mut Model| train(&p, m, &tr, Some(&te), &hw).unwrap().final_accuracy.unwrap();

    let mut pre = model(KernelMode::Exact, seed);
    run(plan(KernelMode::Exact, Phase::Exact, EPOCHS, 0.05, seed), &mut pre);
    let mut as_hw = pre.clone();
    as_hw.set_mode(s.method);
    let inference_only = evaluate(&as_hw, &te, &hw).unwrap();

    let start = || if s.from_pretrained { pre.clone() } else { model(s.method, seed) };
    let epochs = if s.from_pretrained { EPOCHS / 2.0 } else { EPOCHS };

    let mut m = start();
    let injection = run(plan(s.method, Phase::Injection, epochs, s.lr, seed), &mut m);
    let ft = TrainPlan {
        injection_epochs: 0.0,
        finetune_epochs: s.finetune_epochs,
        ..plan(s.method, Phase::Injection, 0.0, s.lr, seed)
    };
    let injection_finetune = run(ft, &mut m);

    let mut m = start();
    let accurate = run(plan(s.method, Phase::Accurate, epochs, s.lr, seed), &mut m);
    Arms {
        inference_only,
        injection,
        accurate,
        injection_finetune,
    }
}

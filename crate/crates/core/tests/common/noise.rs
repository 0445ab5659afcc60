//! Empirical moments of the injected noise.

use axtrain::inject::{inject_type1, inject_type2, ErrorModelType1, ErrorModelType2};
use axtrain::rng::{gaussian_from_key, NoiseKey};
use axtrain::Tensor;

fn key(layer: u32, batch: u64) -> NoiseKey {
    NoiseKey {
        base_seed: 0xacce,
        layer,
        batch,
        element: 0,
    }
}

fn moments(v: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for x in v {
        n += 1;
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    (mean, (m2 / n as f64).sqrt(), n)
}

/// Worst relative error of the injected mean and std against the model,
/// over several operating points, each with `n` samples.
pub fn injection_moment_errors(n: usize) -> (f64, f64) {
    let t1 = ErrorModelType1 {
        mean_poly: vec![0.4, 0.15, -0.05, 0.02],
        std_poly: vec![0.25, 0.05, 0.01, 0.0],
        lo: -1.0,
        hi: 3.0,
        calibrated_at: 0,
    };
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for (i, y) in [-0.5f32, 0.5, 1.0, 2.5].into_iter().enumerate() {
        let out = inject_type1(&Tensor::full(&[n], y), Some(&t1), key(1, i as u64)).unwrap();
        let (m, s, _) = moments(out.data().iter().map(|&v| v as f64 - y as f64));
        worst_mean = worst_mean.max((m / t1.mean_at(y) - 1.0).abs());
        worst_std = worst_std.max((s / t1.std_at(y) - 1.0).abs());
    }
    for (i, (mean, var)) in [(0.3, 0.04), (-0.2, 0.25), (1.0, 1.0)].into_iter().enumerate() {
        let t2 = ErrorModelType2 { mean, var, calibrated_at: 0 };
        let out = inject_type2(&Tensor::full(&[n], 0.5), Some(&t2), key(2, i as u64)).unwrap();
        let (m, s, _) = moments(out.data().iter().map(|&v| v as f64 - 0.5));
        worst_mean = worst_mean.max((m / mean - 1.0).abs());
        worst_std = worst_std.max((s / var.sqrt() - 1.0).abs());
    }
    (worst_mean, worst_std)
}

/// Mean and variance of `gaussian_from_key` over `n` keys varying in every
/// field.
pub fn keyed_gaussian_moments(n: u64) -> (f64, f64) {
    let (m, s, _) = moments((0..n).map(|i| {
        let k = NoiseKey {
            base_seed: i % 7,
            layer: (i % 5) as u32,
            batch: i % 3,
            element: i,
        };
        gaussian_from_key(k) as f64
    }));
    (m, s * s)
}

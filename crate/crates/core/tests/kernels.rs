//! Accurate kernels against independently written oracles.

mod common;

use axtrain::analog::{analog_conv2d, analog_linear, AnalogClips};
use axtrain::exact::{conv2d_exact, linear_exact, ConvParams};
use axtrain::mult::{am_conv2d, am_linear, characterize, fake_quantize8, MultErrorStats, MultTable};
use axtrain::sc::{sc_conv2d, ScConfig, ScScales};
use axtrain::Tensor;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn conv_trivial_examples() {
    let one = |v: f32| Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap();
    let y = conv2d_exact(&one(1.0), &one(2.0), Some(&Tensor::zeros(&[1])), ConvParams::default()).unwrap();
    assert_eq!(y.data(), &[2.0]);
    let ones = Tensor::full(&[1, 1, 2, 2], 1.0);
    assert_eq!(conv2d_exact(&ones, &ones, None, ConvParams::default()).unwrap().data(), &[4.0]);
    assert!(conv2d_exact(&ones, &Tensor::full(&[1, 2, 2, 2], 1.0), None, ConvParams::default()).is_err());
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 2, 5), (2, 0, 1)] {
        let x = rand_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 3, k, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let got = conv2d_exact(&x, &w, Some(&b), ConvParams { stride, pad }).unwrap();
        let want = naive_conv(&x, &w, Some(&b), stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-5, "stride {stride} pad {pad} k {k}");
    }
}

#[test]
fn linear_matches_naive_loops() {
    let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let w = Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap();
    assert_eq!(linear_exact(&x, &w, Some(&Tensor::full(&[1], 1.0))).unwrap().data(), &[4.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[4, 8], -1.0, 1.0);
    let eye = Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
    assert_eq!(linear_exact(&x, &eye, Some(&Tensor::zeros(&[8]))).unwrap(), x);
    let w = rand_tensor(&mut rng, &[5, 8], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[5], -1.0, 1.0);
    let got = linear_exact(&x, &w, Some(&b)).unwrap();
    assert!(got.max_abs_diff(&naive_linear(&x, &w, &b)).unwrap() <= 1e-5);
    assert!(linear_exact(&x, &Tensor::zeros(&[5, 7]), None).is_err());
}

#[test]
fn exact_table_multiplier_is_quantised_exact_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = MultTable::exact();
    for pad in [0, 1] {
        let x = rand_tensor(&mut rng, &[2, 3, 7, 7], 0.0, 2.0);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let p = ConvParams { stride: 1, pad };
        let got = am_conv2d(&x, &w, Some(&b), &table, p).unwrap();
        let want = conv2d_exact(&fake_quantize8(&x), &fake_quantize8(&w), Some(&b), p).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-5);
    }
    let x = rand_tensor(&mut rng, &[3, 20], 0.0, 1.0);
    let w = rand_tensor(&mut rng, &[6, 20], -1.0, 1.0);
    let got = am_linear(&x, &w, None, &table).unwrap();
    let want = linear_exact(&fake_quantize8(&x), &fake_quantize8(&w), None).unwrap();
    assert!(got.max_abs_diff(&want).unwrap() <= 1e-5);
}

#[test]
fn default_multiplier_matches_enumeration_oracle() {
    // Frozen from oracle_stats(3).
    let golden = (0.007144209268309219, 17u32, -4.25, 16.1875);
    let o = oracle_stats(3);
    assert!((o.0 - golden.0).abs() < 1e-15 && o.1 == golden.1 && o.2 == golden.2 && (o.3 - golden.3).abs() < 1e-9);
    let table = MultTable::truncated(3);
    assert_eq!(table.get(127, 127), 16112);
    assert_eq!(oracle_truncated(127, 127, 3), 16112);
    for a in 0..128u8 {
        for b in 0..128u8 {
            assert_eq!(table.get(a, b) as u32, oracle_truncated(a as u32, b as u32, 3));
        }
    }
    let s = characterize(&table);
    assert!((s.mean_relative_error - golden.0).abs() < 1e-12);
    assert_eq!(s.max_abs_error, golden.1);
    assert_eq!(s.mean_error, golden.2);
    assert!((s.error_variance - golden.3).abs() < 1e-9);
}

#[test]
fn exact_table_has_zero_error_and_mre_grows_with_k() {
    let zero = MultErrorStats {
        mean_relative_error: 0.0,
        max_abs_error: 0,
        mean_error: 0.0,
        error_variance: 0.0,
    };
    assert_eq!(characterize(&MultTable::exact()), zero);
    assert_eq!(characterize(&MultTable::from_spec("default:0").unwrap()), zero);
    let mres: Vec<f64> = (0..=6).map(|k| characterize(&MultTable::truncated(k)).mean_relative_error).collect();
    for (k, w) in mres.windows(2).enumerate() {
        assert!(w[1] > w[0], "MRE not increasing at k={k}: {mres:?}");
    }
    for k in 0..=6 {
        assert!((mres[k as usize] - oracle_stats(k).0).abs() < 1e-12);
    }
}

#[test]
fn analog_conv_is_bit_exact_with_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (bits, pad) in [(4, 1), (4, 0), (3, 1), (6, 1)] {
        let x = rand_tensor(&mut rng, &[2, 3, 6, 6], 0.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[4], -0.2, 0.2);
        let clips = AnalogClips {
            pos: rng.random_range(0.2..1.0),
            neg: rng.random_range(0.2..1.0),
        };
        let got = analog_conv2d(&x, &w, Some(&b), bits, clips, ConvParams { stride: 1, pad }).unwrap();
        let want = naive_analog_conv(&x, &w, &b, bits, clips, pad);
        assert_eq!(got, want, "bits {bits} pad {pad}");
    }
}

#[test]
fn analog_linear_is_bit_exact_with_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for group in [1, 4, 9, 25] {
        let x = rand_tensor(&mut rng, &[3, 25], 0.0, 1.0);
        let w = rand_tensor(&mut rng, &[5, 25], -1.0, 1.0);
        let clips = AnalogClips { pos: 0.6, neg: 0.5 };
        let got = analog_linear(&x, &w, None, 4, clips, group).unwrap();
        let (qx, sx) = q8(&x);
        let (qw, sw) = q8(&w);
        let mut want = vec![];
        for i in 0..3 {
            for j in 0..5 {
                let (mut cp, mut cn) = (0i64, 0i64);
                for g in (0..25).step_by(group) {
                    let (mut sp, mut sn) = (0i64, 0i64);
                    for t in g..(g + group).min(25) {
                        let p = qx[i * 25 + t] * qw[j * 25 + t];
                        if qw[j * 25 + t] > 0 {
                            sp += p;
                        } else {
                            sn -= p;
                        }
                    }
                    cp += adc(sp as f64 * (sx * sw), 0.6f32 as f64, 4);
                    cn += adc(sn as f64 * (sx * sw), 0.5f32 as f64, 4);
                }
                want.push((cp as f64 * (0.6f32 as f64 / 15.0) - cn as f64 * (0.5f32 as f64 / 15.0)) as f32);
            }
        }
        assert_eq!(got.data(), &want[..], "group {group}");
    }
}

#[test]
fn sc_conv_mean_matches_or_pipeline_within_three_standard_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4], 0.0, 1.0);
    let w = rand_tensor(&mut rng, &[2, 2, 3, 3], -0.6, 0.6);
    let p = ConvParams { stride: 1, pad: 1 };
    let want = expected_sc_conv(&x, &w, 5, 1);
    let draws = 400;
    let numel = want.numel();
    let (mut s1, mut s2) = (vec![0.0f64; numel], vec![0.0f64; numel]);
    for seed in 0..draws {
        let cfg = ScConfig::new(32, 1000 + seed).unwrap();
        let y = sc_conv2d(&x, &w, None, &cfg, ScScales { x: 1.0, w: 1.0 }, 0, p).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            s1[i] += v as f64;
            s2[i] += v as f64 * v as f64;
        }
    }
    let n = draws as f64;
    for i in 0..numel {
        let mean = s1[i] / n;
        let se = ((s2[i] / n - mean * mean).max(0.0) / n).sqrt();
        let e = want.data()[i] as f64;
        assert!((mean - e).abs() <= 3.0 * se + 1e-6, "element {i}: mean {mean}, expected {e}, se {se}");
    }
}

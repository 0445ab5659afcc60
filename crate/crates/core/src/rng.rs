//! Counter-based randomness.
//!
//! Everything random that must be reproducible independently of evaluation
//! order (injected noise, stochastic-stream start states) is a pure function
//! of a key, hashed with the splitmix64 finalizer.

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 output function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a tuple of words.
#[inline]
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(GOLDEN, |h, &p| mix64(h.wrapping_add(GOLDEN) ^ mix64(p.wrapping_add(h))))
}

/// Seeded generator for non-keyed randomness (initialisation, shuffling).
pub fn seeded(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Identifies one injected-noise sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub base_seed: u64,
    pub layer: u32,
    pub batch: u64,
    pub element: u64,
}

impl NoiseKey {
    pub fn with_element(self, element: u64) -> Self {
        Self { element, ..self }
    }
}

/// Gaussian samples of every element under one `(base_seed, layer, batch)`
/// prefix.
#[derive(Clone, Copy, Debug)]
pub struct NoiseStream {
    prefix: u64,
}

impl NoiseStream {
    pub fn new(key: NoiseKey) -> Self {
        Self {
            prefix: mix(&[key.base_seed, key.layer as u64, key.batch]),
        }
    }

    #[inline]
    pub fn at(&self, element: u64) -> f32 {
        let mut rng = SplitMix(mix64(self.prefix.wrapping_add(element.wrapping_mul(GOLDEN))));
        let z: f64 = StandardNormal.sample(&mut rng);
        z as f32
    }

    /// Samples of elements `0..out.len()`.
    pub fn fill(&self, out: &mut [f32]) {
        for (e, o) in out.iter_mut().enumerate() {
            *o = self.at(e as u64);
        }
    }

    pub fn samples(&self, n: usize) -> Vec<f32> {
        let mut v = vec![0.0; n];
        self.fill(&mut v);
        v
    }
}

/// splitmix64 generator feeding the ziggurat sampler.
struct SplitMix(u64);

impl RngCore for SplitMix {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(GOLDEN);
        mix64(self.0)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

/// Deterministic standard-normal sample for `key`.
pub fn gaussian_from_key(key: NoiseKey) -> f32 {
    NoiseStream::new(key).at(key.element)
}

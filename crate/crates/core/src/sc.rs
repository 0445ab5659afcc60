//! Bit-level stochastic-computing simulation.
//!
//! Values in [0, 1] become unipolar bitstreams by comparing an LFSR state
//! sequence against a threshold. AND multiplies two streams, OR accumulates
//! many. Signed layers run split-unipolar: products with positive weights
//! are OR-ed into one stream, products with negative weights into another,
//! and the decoded difference is the output.

use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{Error, Result};
use crate::exact::{im2row, ConvParams, ConvShape};
use crate::rng::{mix, mix64};
use crate::tensor::Tensor;

pub const STREAM_LENGTHS: [usize; 4] = [8, 16, 32, 64];
pub const DEFAULT_STREAM_LENGTH: usize = 32;

/// Maximal-length Fibonacci tap positions (1-based) for widths 3..=16.
const TAP_POSITIONS: [&[u32]; 14] = [
    &[3, 2],
    &[4, 3],
    &[5, 3],
    &[6, 5],
    &[7, 6],
    &[8, 6, 5, 4],
    &[9, 5],
    &[10, 7],
    &[11, 9],
    &[12, 6, 4, 1],
    &[13, 4, 3, 1],
    &[14, 5, 3, 1],
    &[15, 14],
    &[16, 15, 13, 4],
];

fn tap_mask(positions: impl IntoIterator<Item = u32>) -> u32 {
    positions.into_iter().fold(0, |m, p| m | 1 << (p - 1))
}

/// Fibonacci LFSR: width, feedback taps and current (start) state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LfsrConfig {
    pub width: u32,
    pub taps: u32,
    pub seed: u32,
}

impl LfsrConfig {
    /// Checks the seed and that `taps` give period `2^width - 1`.
    pub fn new(width: u32, taps: u32, seed: u32) -> Result<Self> {
        if !(2..=16).contains(&width) {
            return Err(Error::arg("lfsr", format!("width {width} outside 2..=16")));
        }
        let cfg = Self { width, taps, seed };
        if seed == 0 {
            return Err(Error::ZeroLfsrState);
        }
        if seed > cfg.mask() || taps == 0 || taps > cfg.mask() {
            return Err(Error::arg("lfsr", format!("seed {seed:#x} or taps {taps:#x} wider than {width} bits")));
        }
        let period = cfg.orbit_length(1);
        if period != cfg.period() {
            return Err(Error::NonMaximalLfsr { width, taps, period });
        }
        Ok(cfg)
    }

    /// Default taps for activations at `width`.
    pub fn input_default(width: u32) -> Result<Self> {
        let taps = default_positions(width)?;
        Self::new(width, tap_mask(taps.iter().copied()), 1)
    }

    /// Default taps for weights: the reciprocal polynomial of the activation
    /// taps, a different maximal sequence of the same width.
    pub fn weight_default(width: u32) -> Result<Self> {
        let taps = default_positions(width)?;
        let recip = std::iter::once(width).chain(taps[1..].iter().map(|&t| width - t));
        Self::new(width, tap_mask(recip), 1)
    }

    pub fn with_seed(self, seed: u32) -> Result<Self> {
        Self::new(self.width, self.taps, seed)
    }

    pub fn mask(&self) -> u32 {
        ((1u64 << self.width) - 1) as u32
    }

    /// `2^width - 1`.
    pub fn period(&self) -> u64 {
        self.mask() as u64
    }

    fn orbit_length(&self, start: u32) -> u64 {
        let mut s = step(start, self.taps, self.mask());
        let mut n = 1u64;
        while s != start && n <= self.period() {
            s = step(s, self.taps, self.mask());
            n += 1;
        }
        n
    }
}

fn default_positions(width: u32) -> Result<&'static [u32]> {
    width
        .checked_sub(3)
        .and_then(|i| TAP_POSITIONS.get(i as usize).copied())
        .ok_or_else(|| Error::arg("lfsr", format!("no default taps for width {width}")))
}

#[inline]
fn step(state: u32, taps: u32, mask: u32) -> u32 {
    let bit = (state & taps).count_ones() & 1;
    ((state << 1) | bit) & mask
}

/// One LFSR step: shifts in the parity of `state & taps`.
pub fn lfsr_next(state: u32, cfg: &LfsrConfig) -> Result<u32> {
    if state == 0 {
        return Err(Error::ZeroLfsrState);
    }
    Ok(step(state, cfg.taps, cfg.mask()))
}

/// A unipolar bitstream of `len` bits, bit `i` at position `i % 64` of word `i / 64`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedStream {
    words: Vec<u64>,
    len: usize,
}

impl PackedStream {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut s = Self::zeros(len);
        for i in 0..len {
            s.set(i);
        }
        s
    }

    fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn bit(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn popcount(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn decode(&self) -> f32 {
        self.popcount() as f32 / self.len as f32
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(u64, u64) -> u64) -> Result<Self> {
        if self.len != other.len {
            return Err(Error::shape(op, format!("stream lengths {} and {}", self.len, other.len)));
        }
        Ok(Self {
            words: self.words.iter().zip(&other.words).map(|(&a, &b)| f(a, b)).collect(),
            len: self.len,
        })
    }
}

/// Comparator threshold `round(v * (2^width - 1))`.
fn threshold(v: f32, mask: u32) -> u32 {
    (v as f64 * mask as f64).round() as u32
}

/// `len` comparator bits starting from `start`; the LFSR steps after each bit.
#[inline]
fn stream_bits(start: u32, thresh: u32, taps: u32, mask: u32, len: usize) -> u64 {
    let mut s = start;
    let mut bits = 0u64;
    for i in 0..len {
        bits |= ((s <= thresh) as u64) << i;
        s = step(s, taps, mask);
    }
    bits
}

/// Encodes `v` starting from the LFSR's seed state.
pub fn encode_stream(v: f32, len: usize, lfsr: &LfsrConfig) -> Result<PackedStream> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::arg("encode_stream", format!("value {v} outside [0, 1]")));
    }
    if len == 0 {
        return Err(Error::arg("encode_stream", "empty stream"));
    }
    let t = threshold(v, lfsr.mask());
    let mut out = PackedStream::zeros(len);
    let mut s = lfsr.seed;
    for i in 0..len {
        if s <= t {
            out.set(i);
        }
        s = step(s, lfsr.taps, lfsr.mask());
    }
    Ok(out)
}

/// Bitwise AND.
pub fn sc_mul(a: &PackedStream, b: &PackedStream) -> Result<PackedStream> {
    a.zip(b, "sc_mul", |x, y| x & y)
}

/// Bitwise OR over all streams.
pub fn sc_or_accumulate(streams: &[PackedStream]) -> Result<PackedStream> {
    let (first, rest) = streams
        .split_first()
        .ok_or_else(|| Error::arg("sc_or_accumulate", "no streams"))?;
    rest.iter().try_fold(first.clone(), |acc, s| acc.zip(s, "sc_or_accumulate", |x, y| x | y))
}

/// `1 - prod(1 - a_i)`, the expected OR of independent streams.
pub fn expected_or(values: &[f32]) -> Result<f32> {
    let mut keep = 1.0f64;
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::arg("expected_or", format!("value {v} outside [0, 1]")));
        }
        keep *= 1.0 - v as f64;
    }
    Ok((1.0 - keep) as f32)
}

/// Stream length, the two LFSRs and the base seed for per-product start states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScConfig {
    pub stream_length: usize,
    pub input_lfsr: LfsrConfig,
    pub weight_lfsr: LfsrConfig,
    pub base_seed: u64,
}

impl ScConfig {
    /// Default LFSRs of width `log2(stream_length)`.
    pub fn new(stream_length: usize, base_seed: u64) -> Result<Self> {
        if !STREAM_LENGTHS.contains(&stream_length) {
            return Err(Error::arg("sc", format!("stream length {stream_length} not in {STREAM_LENGTHS:?}")));
        }
        let width = stream_length.trailing_zeros();
        Self::with_lfsrs(
            stream_length,
            LfsrConfig::input_default(width)?,
            LfsrConfig::weight_default(width)?,
            base_seed,
        )
    }

    pub fn with_lfsrs(stream_length: usize, input_lfsr: LfsrConfig, weight_lfsr: LfsrConfig, base_seed: u64) -> Result<Self> {
        let cfg = Self {
            stream_length,
            input_lfsr,
            weight_lfsr,
            base_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !STREAM_LENGTHS.contains(&self.stream_length) {
            return Err(Error::arg("sc", format!("stream length {} not in {STREAM_LENGTHS:?}", self.stream_length)));
        }
        if self.input_lfsr == self.weight_lfsr {
            return Err(Error::arg("sc", "input and weight LFSRs must differ in taps or seed"));
        }
        LfsrConfig::new(self.input_lfsr.width, self.input_lfsr.taps, self.input_lfsr.seed)?;
        LfsrConfig::new(self.weight_lfsr.width, self.weight_lfsr.taps, self.weight_lfsr.seed)?;
        Ok(())
    }

    /// Start states of the activation and weight streams of product
    /// `index` in `layer`.
    pub fn starts(&self, layer: u32, index: u64) -> (u32, u32) {
        self.start_hasher(layer).starts(index)
    }

    fn start_hasher(&self, layer: u32) -> StartHasher {
        StartHasher {
            prefix: mix(&[self.base_seed, self.input_lfsr.seed as u64, self.weight_lfsr.seed as u64, layer as u64]),
            input_period: self.input_lfsr.period(),
            weight_period: self.weight_lfsr.period(),
        }
    }
}

struct StartHasher {
    prefix: u64,
    input_period: u64,
    weight_period: u64,
}

impl StartHasher {
    #[inline]
    fn starts(&self, index: u64) -> (u32, u32) {
        let h = mix64(self.prefix.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        (
            1 + ((h & 0xffff_ffff) % self.input_period) as u32,
            1 + ((h >> 32) % self.weight_period) as u32,
        )
    }
}

/// Streams of every (start state, threshold) pair for narrow LFSRs.
struct StreamTable {
    levels: usize,
    bits: Vec<u64>,
}

impl StreamTable {
    const MAX_WIDTH: u32 = 8;

    fn new(lfsr: &LfsrConfig, len: usize) -> Option<Self> {
        if lfsr.width > Self::MAX_WIDTH {
            return None;
        }
        let levels = lfsr.mask() as usize + 1;
        let mut bits = vec![0u64; levels * levels];
        let mut states = vec![0u32; len];
        for start in 1..levels {
            let mut s = start as u32;
            for st in states.iter_mut() {
                *st = s;
                s = step(s, lfsr.taps, lfsr.mask());
            }
            for t in 0..levels {
                let mut b = 0u64;
                for (i, &st) in states.iter().enumerate() {
                    b |= ((st as usize <= t) as u64) << i;
                }
                bits[start * levels + t] = b;
            }
        }
        Some(Self { levels, bits })
    }
}

struct StreamSource<'a> {
    lfsr: &'a LfsrConfig,
    len: usize,
    table: Option<StreamTable>,
}

impl<'a> StreamSource<'a> {
    fn new(lfsr: &'a LfsrConfig, len: usize) -> Self {
        Self {
            lfsr,
            len,
            table: StreamTable::new(lfsr, len),
        }
    }

    #[inline]
    fn bits(&self, start: u32, thresh: u32) -> u64 {
        match &self.table {
            Some(t) => t.bits[start as usize * t.levels + thresh as usize],
            None => stream_bits(start, thresh, self.lfsr.taps, self.lfsr.mask(), self.len),
        }
    }
}

/// Divisors that map activations and weight magnitudes into [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScScales {
    pub x: f32,
    pub w: f32,
}

impl ScScales {
    pub fn output(&self) -> f32 {
        self.x * self.w
    }
}

fn scaled_thresholds(values: &[f32], scale: f32, mask: u32, signed: bool) -> Result<Vec<u32>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::arg("sc_conv2d", format!("value scale {scale} must be positive")));
    }
    values
        .iter()
        .map(|&v| {
            if !signed && v < 0.0 {
                return Err(Error::arg("sc_conv2d", format!("negative input {v}")));
            }
            let u = v.abs() / scale;
            if u > 1.0 + 1e-6 {
                return Err(Error::arg("sc_conv2d", format!("|{v}| / {scale} = {u} exceeds 1")));
            }
            Ok(threshold(u.min(1.0), mask))
        })
        .collect()
}

/// Split-unipolar stochastic convolution. Every product gets a fresh pair of
/// streams whose start states are hashed from `(base_seed, layer, product)`,
/// so the result does not depend on evaluation order.
pub fn sc_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    cfg: &ScConfig,
    scales: ScScales,
    layer: u32,
    p: ConvParams,
) -> Result<Tensor> {
    let s = ConvShape::resolve(x.shape(), w.shape(), p)?;
    if let Some(b) = bias {
        if b.shape() != [s.k] {
            return Err(Error::shape("sc_conv2d", format!("bias {:?} for {} channels", b.shape(), s.k)));
        }
    }
    let (il, wl) = (&cfg.input_lfsr, &cfg.weight_lfsr);
    let len = cfg.stream_length;
    let field = s.field();
    let rows = scaled_thresholds(&im2row(x, &s), scales.x, il.mask(), false)?;
    let tw = scaled_thresholds(w.data(), scales.w, wl.mask(), true)?;
    let negative: Vec<bool> = w.data().iter().map(|&v| v < 0.0).collect();
    let pos = s.positions();
    let unit = scales.output() / len as f32;
    let hasher = cfg.start_hasher(layer);
    let (isrc, wsrc) = (StreamSource::new(il, len), StreamSource::new(wl, len));
    let mut out = vec![0.0f32; s.n * s.k * pos];
    for n in 0..s.n {
        for k in 0..s.k {
            let b = bias.map_or(0.0, |b| b.data()[k]);
            for p in 0..pos {
                let o = (n * s.k + k) * pos + p;
                let xr = &rows[(n * pos + p) * field..][..field];
                let (mut yp, mut yn) = (0u64, 0u64);
                for j in 0..field {
                    let (ta, tb) = (xr[j], tw[k * field + j]);
                    if ta == 0 || tb == 0 {
                        continue;
                    }
                    let (sa, sb) = hasher.starts((o * field + j) as u64);
                    let a = isrc.bits(sa, ta);
                    let bb = wsrc.bits(sb, tb);
                    if negative[k * field + j] {
                        yn |= a & bb;
                    } else {
                        yp |= a & bb;
                    }
                }
                out[o] = (yp.count_ones() as f32 - yn.count_ones() as f32) * unit + b;
            }
        }
    }
    counters::bump(|c| {
        c.accurate_products += (s.n * s.k * pos * field) as u64;
        c.accurate_kernel_calls += 1;
    });
    Ok(Tensor::from_parts(s.output_shape().to_vec(), out))
}

/// Fully connected counterpart of [`sc_conv2d`]: `x[N,D]`, `w[M,D]`.
pub fn sc_linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, cfg: &ScConfig, scales: ScScales, layer: u32) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(Error::shape("sc_linear", format!("x {:?}, w {:?}", x.shape(), w.shape())));
    }
    let (n, d, m) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let y = sc_conv2d(
        &x.reshape(&[n, d, 1, 1])?,
        &w.reshape(&[m, w.shape()[1], 1, 1])?,
        bias,
        cfg,
        scales,
        layer,
        ConvParams::default(),
    )?;
    y.reshape(&[n, m])
}

//! Approximate-multiplier simulation.
//!
//! A 7-bit unsigned multiplier core is described by a full 128x128 product
//! table. Signed 8-bit operands are sign-magnitude: the sign bits are XORed
//! and the magnitudes go through the table. Tables come either from the
//! built-in truncated partial-product multiplier or from a file, so a real
//! library multiplier can be exported and plugged in.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{Error, Result};
use crate::exact::{im2row, ConvParams, ConvShape};
use crate::tensor::Tensor;

pub const OPERAND_BITS: u32 = 7;
pub const OPERAND_LEVELS: usize = 1 << OPERAND_BITS;
pub const TABLE_ENTRIES: usize = OPERAND_LEVELS * OPERAND_LEVELS;
/// 127 * 127 = 16129 fits in 14 bits.
pub const PRODUCT_BITS: u32 = 14;
const MAX_MAGNITUDE: i32 = 127;
const BINARY_MAGIC: &[u8; 4] = b"MTBL";

/// Default truncation depth of the built-in multiplier.
pub const DEFAULT_DROP_K: u32 = 3;

/// Product of two 7-bit operands with the `drop_k` least significant
/// partial-product columns left out. `drop_k == 0` is exact.
pub fn default_truncated_mul(a: u8, b: u8, drop_k: u32) -> u16 {
    debug_assert!(a < 128 && b < 128 && drop_k <= 6);
    let mut sum = 0u32;
    for i in 0..OPERAND_BITS {
        if (b >> i) & 1 == 0 {
            continue;
        }
        for j in 0..OPERAND_BITS {
            if (a >> j) & 1 == 1 && i + j >= drop_k {
                sum += 1 << (i + j);
            }
        }
    }
    sum as u16
}

/// A 128x128 product table for a 7-bit unsigned multiplier.
#[derive(Clone, PartialEq, Eq)]
pub struct MultTable {
    products: Vec<u16>,
    pub name: String,
    /// Declared output width in bits.
    pub bits: u32,
}

impl fmt::Debug for MultTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MultTable")
            .field("name", &self.name)
            .field("bits", &self.bits)
            .finish_non_exhaustive()
    }
}

impl MultTable {
    pub fn from_products(name: impl Into<String>, products: Vec<u16>) -> Result<Self> {
        if products.len() != TABLE_ENTRIES {
            return Err(Error::MultTable {
                entry: products.len().min(TABLE_ENTRIES),
                detail: format!("expected {TABLE_ENTRIES} entries, found {}", products.len()),
            });
        }
        let limit = (1u32 << PRODUCT_BITS) - 1;
        if let Some(i) = products.iter().position(|&p| p as u32 > limit) {
            return Err(Error::MultTable {
                entry: i,
                detail: format!("product {} exceeds {PRODUCT_BITS}-bit range", products[i]),
            });
        }
        Ok(Self {
            products,
            name: name.into(),
            bits: PRODUCT_BITS,
        })
    }

    pub fn exact() -> Self {
        Self::truncated(0)
    }

    /// Table of [`default_truncated_mul`] with `drop_k` columns dropped.
    pub fn truncated(drop_k: u32) -> Self {
        assert!(drop_k <= 6, "drop_k must be in 0..=6");
        let products = (0..TABLE_ENTRIES)
            .map(|i| default_truncated_mul((i / OPERAND_LEVELS) as u8, (i % OPERAND_LEVELS) as u8, drop_k))
            .collect();
        Self {
            products,
            name: format!("truncated-k{drop_k}"),
            bits: PRODUCT_BITS,
        }
    }

    /// Resolves `default:<k>` to a truncated table, anything else to a file.
    pub fn from_spec(spec: &str) -> Result<Self> {
        match spec.strip_prefix("default:") {
            Some(k) => {
                let k: u32 = k
                    .parse()
                    .map_err(|_| Error::Config(format!("bad truncation depth in {spec:?}")))?;
                if k > 6 {
                    return Err(Error::Config(format!("truncation depth {k} outside 0..=6")));
                }
                Ok(Self::truncated(k))
            }
            None if spec == "default" => Ok(Self::truncated(DEFAULT_DROP_K)),
            None => load_mult_table(spec),
        }
    }

    #[inline]
    pub fn get(&self, a: u8, b: u8) -> u16 {
        self.products[a as usize * OPERAND_LEVELS + b as usize]
    }

    pub fn products(&self) -> &[u16] {
        &self.products
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(4 + 2 * TABLE_ENTRIES);
        buf.extend_from_slice(BINARY_MAGIC);
        for p in &self.products {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = String::with_capacity(12 * TABLE_ENTRIES);
        for (i, p) in self.products.iter().enumerate() {
            s.push_str(&format!("{} {} {}\n", i / OPERAND_LEVELS, i % OPERAND_LEVELS, p));
        }
        fs::write(path, s)?;
        Ok(())
    }
}

/// Loads a table in either the binary (`MTBL` magic) or the text
/// (`a b product` per line, a-major order) format.
pub fn load_mult_table(path: impl AsRef<Path>) -> Result<MultTable> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "table".into());
    let table = if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(&bytes[4..], name)?
    } else {
        parse_text(&bytes, name)?
    };
    let stats = characterize(&table);
    log::info!(
        "loaded multiplier table {:?}: MRE {:.5}, max |err| {}, mean err {:.3}, err var {:.3}",
        table.name,
        stats.mean_relative_error,
        stats.max_abs_error,
        stats.mean_error,
        stats.error_variance
    );
    Ok(table)
}

fn parse_binary(body: &[u8], name: String) -> Result<MultTable> {
    let entries = body.len() / 2;
    if body.len() != 2 * TABLE_ENTRIES {
        return Err(Error::MultTable {
            entry: entries.min(TABLE_ENTRIES),
            detail: format!(
                "binary table holds {} bytes after the magic, expected {}",
                body.len(),
                2 * TABLE_ENTRIES
            ),
        });
    }
    let products = body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    MultTable::from_products(name, products)
}

fn parse_text(bytes: &[u8], name: String) -> Result<MultTable> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::MultTable {
        entry: 0,
        detail: format!("not UTF-8 text: {e}"),
    })?;
    let mut products = Vec::with_capacity(TABLE_ENTRIES);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let entry = products.len();
        if entry == TABLE_ENTRIES {
            return Err(Error::MultTable {
                entry,
                detail: "more than 16384 entries".into(),
            });
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed: Option<Vec<u32>> = fields.iter().map(|f| f.parse().ok()).collect();
        let Some([a, b, p]) = parsed.as_deref().and_then(|v| <[u32; 3]>::try_from(v).ok()) else {
            return Err(Error::MultTable {
                entry,
                detail: format!("cannot parse {line:?} as `a b product`"),
            });
        };
        let (ea, eb) = ((entry / OPERAND_LEVELS) as u32, (entry % OPERAND_LEVELS) as u32);
        if (a, b) != (ea, eb) {
            return Err(Error::MultTable {
                entry,
                detail: format!("expected operands ({ea}, {eb}), found ({a}, {b})"),
            });
        }
        let p = u16::try_from(p).map_err(|_| Error::MultTable {
            entry,
            detail: format!("product {p} does not fit 16 bits"),
        })?;
        products.push(p);
    }
    if products.len() != TABLE_ENTRIES {
        return Err(Error::MultTable {
            entry: products.len(),
            detail: format!("table ends after {} of {TABLE_ENTRIES} entries", products.len()),
        });
    }
    MultTable::from_products(name, products)
}

/// Signed product of two sign-magnitude operands in `[-127, 127]`.
#[inline]
pub fn approx_mul_signed(a: i8, b: i8, table: &MultTable) -> i32 {
    let mag = table.get(a.unsigned_abs(), b.unsigned_abs()) as i32;
    if (a < 0) != (b < 0) {
        -mag
    } else {
        mag
    }
}

/// Per-tensor quantisation scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
}

/// 8-bit sign-magnitude tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i8>,
    pub params: QuantParams,
}

/// Symmetric sign-magnitude quantisation: `scale = max|x| / 127`,
/// round half away from zero. An all-zero tensor gets `scale = 1`.
pub fn quantize8(x: &Tensor) -> QuantTensor {
    let m = x.max_abs();
    let scale = if m > 0.0 { m / MAX_MAGNITUDE as f32 } else { 1.0 };
    let values = x
        .data()
        .iter()
        .map(|&v| (v / scale).round().clamp(-MAX_MAGNITUDE as f32, MAX_MAGNITUDE as f32) as i8)
        .collect();
    QuantTensor {
        shape: x.shape().to_vec(),
        values,
        params: QuantParams { scale },
    }
}

pub fn dequantize(q: &QuantTensor) -> Tensor {
    let s = q.params.scale;
    Tensor::from_parts(q.shape.clone(), q.values.iter().map(|&v| v as f32 * s).collect())
}

/// `dequantize(quantize8(x))`.
pub fn fake_quantize8(x: &Tensor) -> Tensor {
    dequantize(&quantize8(x))
}

/// Quantised values as an `f32` tensor of integers (exactly representable).
fn levels(q: &QuantTensor) -> Tensor {
    Tensor::from_parts(q.shape.clone(), q.values.iter().map(|&v| v as f32).collect())
}

fn check_accumulator(table: &MultTable, field: usize) -> Result<()> {
    let max_entry = table.products.iter().copied().max().unwrap_or(0) as u64;
    if max_entry.max(1) * field as u64 >= 1 << 31 {
        return Err(Error::Invariant(format!(
            "integer accumulator could overflow: {field} products of up to {max_entry}"
        )));
    }
    Ok(())
}

/// Dot products of quantised rows `[rows, field]` against `[k, field]`.
fn am_products(rows: &[i8], w: &[i8], field: usize, k: usize, table: &MultTable) -> Vec<i32> {
    let nrows = rows.len() / field;
    let mut out = vec![0i32; nrows * k];
    for r in 0..nrows {
        let xr = &rows[r * field..(r + 1) * field];
        for ki in 0..k {
            let wr = &w[ki * field..(ki + 1) * field];
            out[r * k + ki] = xr.iter().zip(wr).map(|(&a, &b)| approx_mul_signed(a, b, table)).sum();
        }
    }
    counters::bump(|c| {
        c.accurate_products += (nrows * k * field) as u64;
        c.accurate_kernel_calls += 1;
    });
    out
}

/// Convolution with every scalar product taken from `table`: operands are
/// quantised to 8-bit sign-magnitude, accumulated exactly in `i32`, then
/// rescaled by `scale_x * scale_w` and offset by the float bias.
pub fn am_conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, table: &MultTable, p: ConvParams) -> Result<Tensor> {
    let s = ConvShape::resolve(x.shape(), w.shape(), p)?;
    check_accumulator(table, s.field())?;
    let (qx, qw) = (quantize8(x), quantize8(w));
    let rows: Vec<i8> = im2row(&levels(&qx), &s).into_iter().map(|v| v as i8).collect();
    let acc = am_products(&rows, &qw.values, s.field(), s.k, table);
    let scale = qx.params.scale * qw.params.scale;
    let pos = s.positions();
    let mut out = vec![0.0f32; s.n * s.k * pos];
    for n in 0..s.n {
        for p in 0..pos {
            for k in 0..s.k {
                let b = bias.map_or(0.0, |b| b.data()[k]);
                out[(n * s.k + k) * pos + p] = acc[(n * pos + p) * s.k + k] as f32 * scale + b;
            }
        }
    }
    Ok(Tensor::from_parts(s.output_shape().to_vec(), out))
}

/// Fully connected counterpart of [`am_conv2d`]: `x[N,D]`, `w[M,D]`.
pub fn am_linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, table: &MultTable) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::shape("am_linear", format!("x {:?}, w {:?}", x.shape(), w.shape())));
    }
    let (d, m) = (x.shape()[1], w.shape()[0]);
    check_accumulator(table, d)?;
    let (qx, qw) = (quantize8(x), quantize8(w));
    let acc = am_products(&qx.values, &qw.values, d, m, table);
    let scale = qx.params.scale * qw.params.scale;
    let out = acc
        .iter()
        .enumerate()
        .map(|(i, &v)| v as f32 * scale + bias.map_or(0.0, |b| b.data()[i % m]))
        .collect();
    Ok(Tensor::from_parts(vec![x.shape()[0], m], out))
}

/// Error statistics of a table over all 128x128 operand pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultErrorStats {
    /// Mean of `|approx - exact| / exact` over pairs with a non-zero exact product.
    pub mean_relative_error: f64,
    pub max_abs_error: u32,
    /// Mean signed error `approx - exact` (bias).
    pub mean_error: f64,
    /// Population variance of the signed error.
    pub error_variance: f64,
}

pub fn characterize(table: &MultTable) -> MultErrorStats {
    let (mut rel_sum, mut rel_n) = (0.0f64, 0u32);
    let (mut sum, mut sum_sq, mut max_abs) = (0i64, 0i64, 0u32);
    for a in 0..OPERAND_LEVELS {
        for b in 0..OPERAND_LEVELS {
            let exact = (a * b) as i64;
            let err = table.get(a as u8, b as u8) as i64 - exact;
            sum += err;
            sum_sq += err * err;
            max_abs = max_abs.max(err.unsigned_abs() as u32);
            if exact != 0 {
                rel_sum += err.abs() as f64 / exact as f64;
                rel_n += 1;
            }
        }
    }
    let n = TABLE_ENTRIES as f64;
    let mean = sum as f64 / n;
    MultErrorStats {
        mean_relative_error: rel_sum / rel_n as f64,
        max_abs_error: max_abs,
        mean_error: mean,
        error_variance: sum_sq as f64 / n - mean * mean,
    }
}

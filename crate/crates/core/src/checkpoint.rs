//! Binary model checkpoints.
//!
//! Layout: magic `AXTN`, version `u32`, then records until end of file. A
//! record is a `u32` name length, the UTF-8 name, a `u32` rank, `rank` dims
//! as `u32`, and the `f32` data. All integers and floats are little-endian.
//!
//! Parameters are stored as `layers.<i>.weight|bias`, calibration state as
//! `state.<i>.*` and error models as `errmodel.<i>.*`. Values that need
//! more than single precision (polynomial coefficients, step indices) are
//! stored as `[n, 2]` high/low `f32` pairs.

use std::fs;
use std::path::Path;

use crate::analog::AnalogClips;
use crate::error::{Error, Result};
use crate::inject::{ErrorModelType1, ErrorModelType2};
use crate::model::{LayerState, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AXTN";
pub const VERSION: u32 = 1;

pub fn encode(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                what: format!("checkpoint {what}"),
                expected: n as u64,
                actual: (self.buf.len() - self.pos) as u64,
                offset: self.pos as u64,
            });
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint".into(),
            found: u32::from_be_bytes(magic.try_into().expect("4 bytes")),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let mut out = vec![];
    while r.pos < buf.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("record name is not UTF-8: {e}")))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("record too large".into()))?, &name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("record {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, records: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(records))?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

fn encode_f64s(values: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(2 * values.len());
    for &v in values {
        let hi = v as f32;
        data.push(hi);
        data.push((v - hi as f64) as f32);
    }
    Tensor::from_parts(vec![values.len(), 2], data)
}

fn decode_f64s(t: &Tensor) -> Result<Vec<f64>> {
    if t.rank() != 2 || t.shape()[1] != 2 {
        return Err(Error::Checkpoint(format!("expected [n, 2] pairs, found {:?}", t.shape())));
    }
    Ok(t.data().chunks_exact(2).map(|c| c[0] as f64 + c[1] as f64).collect())
}

/// Parameters, calibration state and error models as named tensors.
pub fn model_records(model: &Model) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model.parameters().into_iter().map(|(n, t)| (n, t.clone())).collect();
    for (i, l) in model.layers.iter().enumerate() {
        let s = &l.state;
        if let Some(v) = s.sc_x_scale {
            out.push((format!("state.{i}.sc_x_scale"), Tensor::from_parts(vec![1], vec![v])));
        }
        if let Some(c) = s.analog_clips {
            out.push((format!("state.{i}.analog_clips"), Tensor::from_parts(vec![2], vec![c.pos, c.neg])));
        }
        if let Some(m) = &s.type1 {
            out.push((format!("errmodel.{i}.type1.mean"), encode_f64s(&m.mean_poly)));
            out.push((format!("errmodel.{i}.type1.std"), encode_f64s(&m.std_poly)));
            out.push((format!("errmodel.{i}.type1.domain"), Tensor::from_parts(vec![2], vec![m.lo, m.hi])));
            out.push((format!("errmodel.{i}.type1.step"), encode_f64s(&[m.calibrated_at as f64])));
        }
        if let Some(m) = &s.type2 {
            out.push((format!("errmodel.{i}.type2"), encode_f64s(&[m.mean, m.var, m.calibrated_at as f64])));
        }
    }
    out
}

/// Loads records into a model of matching architecture. Every parameter
/// must be present; state and error models are restored when present.
pub fn load_model_records(model: &mut Model, records: &[(String, Tensor)]) -> Result<()> {
    let find = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let known = |name: &str| {
        name.starts_with("state.") || name.starts_with("errmodel.") || model.parameters().iter().any(|(n, _)| n == name)
    };
    if let Some((n, _)) = records.iter().find(|(n, _)| !known(n)) {
        return Err(Error::Checkpoint(format!("unexpected record {n:?}")));
    }
    let mut layers = model.layers.clone();
    for (i, l) in layers.iter_mut().enumerate() {
        for (slot, suffix) in [(&mut l.weight, "weight"), (&mut l.bias, "bias")] {
            if let Some(cur) = slot {
                let name = format!("layers.{i}.{suffix}");
                let t = find(&name).ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
                if t.shape() != cur.shape() {
                    return Err(Error::Checkpoint(format!("{name}: shape {:?}, model expects {:?}", t.shape(), cur.shape())));
                }
                *cur = t.clone();
            }
        }
        let mut s = LayerState {
            sc_x_scale: find(&format!("state.{i}.sc_x_scale")).map(|t| t.data()[0]),
            analog_clips: find(&format!("state.{i}.analog_clips")).map(|t| AnalogClips {
                pos: t.data()[0],
                neg: t.data()[1],
            }),
            ..Default::default()
        };
        if let Some(mean) = find(&format!("errmodel.{i}.type1.mean")) {
            let get = |k: &str| find(&format!("errmodel.{i}.type1.{k}")).ok_or_else(|| Error::Checkpoint(format!("layer {i}: type1 {k} missing")));
            let domain = get("domain")?;
            let m = ErrorModelType1 {
                mean_poly: decode_f64s(mean)?,
                std_poly: decode_f64s(get("std")?)?,
                lo: domain.data()[0],
                hi: domain.data()[1],
                calibrated_at: decode_f64s(get("step")?)?[0] as u64,
            };
            m.validate()?;
            s.type1 = Some(m);
        }
        if let Some(t) = find(&format!("errmodel.{i}.type2")) {
            let v = decode_f64s(t)?;
            if v.len() != 3 {
                return Err(Error::Checkpoint(format!("layer {i}: type2 record has {} values", v.len())));
            }
            s.type2 = Some(ErrorModelType2 {
                mean: v[0],
                var: v[1],
                calibrated_at: v[2] as u64,
            });
        }
        l.state = s;
    }
    model.layers = layers;
    Ok(())
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    write_records(path, &model_records(model))
}

pub fn load_model(path: impl AsRef<Path>, model: &mut Model) -> Result<()> {
    load_model_records(model, &read_records(path)?)
}

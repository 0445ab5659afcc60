//! Datasets: MNIST-style IDX files, CIFAR-10 binary batches and a
//! synthetic template-plus-noise generator.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: impl Into<String>) -> Result<Self> {
        images.expect_rank(4, "dataset")?;
        if images.shape()[0] != labels.len() {
            return Err(Error::shape("dataset", format!("{} images, {} labels", images.shape()[0], labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::arg("dataset", format!("label {l} outside 0..{classes}")));
        }
        if let Some(v) = images.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::arg("dataset", format!("pixel {v} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.gather_batch(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Examples `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize, split: impl Into<String>) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.slice_batch(start, end)?,
            labels: self.labels[start..end].to_vec(),
            classes: self.classes,
            split: split.into(),
        })
    }

    /// Concatenates datasets with equal image shapes.
    pub fn concat(parts: &[Dataset], split: impl Into<String>) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::arg("concat", "no datasets"))?;
        let shape = first.image_shape();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.image_shape() != shape {
                return Err(Error::shape("concat", format!("{:?} vs {shape:?}", p.image_shape())));
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        let classes = parts.iter().map(|p| p.classes).max().unwrap_or(0);
        let images = Tensor::new(vec![labels.len(), shape[0], shape[1], shape[2]], data)?;
        Dataset::new(images, labels, classes, split)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn truncated(what: &str, expected: usize, actual: usize, offset: usize) -> Error {
    Error::Truncated {
        what: what.into(),
        expected: expected as u64,
        actual: actual as u64,
        offset: offset as u64,
    }
}

fn be_u32(buf: &[u8], offset: usize, what: &str) -> Result<u32> {
    match buf.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().expect("4 bytes"))),
        None => Err(truncated(what, offset + 4, buf.len(), offset)),
    }
}

/// Parsed IDX file: dims and raw u8 payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(buf: &[u8], expected_magic: u32, what: &str) -> Result<Idx> {
    let magic = be_u32(buf, 0, what)?;
    if magic != expected_magic {
        return Err(Error::BadMagic {
            what: what.into(),
            found: magic,
        });
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(be_u32(buf, 4 + 4 * i, what)? as usize);
    }
    let header = 4 + 4 * rank;
    let numel: usize = dims.iter().product();
    let expected = header + numel;
    if buf.len() < expected {
        return Err(truncated(what, expected, buf.len(), buf.len()));
    }
    Ok(Idx {
        dims,
        data: buf[header..expected].to_vec(),
    })
}

pub fn idx_images(buf: &[u8]) -> Result<Tensor> {
    let idx = parse_idx(buf, IDX_IMAGES_MAGIC, "IDX images")?;
    let (n, h, w) = (idx.dims[0], idx.dims[1], idx.dims[2]);
    Tensor::new(vec![n, 1, h, w], idx.data.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn idx_labels(buf: &[u8]) -> Result<Vec<usize>> {
    Ok(parse_idx(buf, IDX_LABELS_MAGIC, "IDX labels")?.data.into_iter().map(usize::from).collect())
}

/// MNIST-style image and label files; `classes` defaults to 10.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: &str) -> Result<Dataset> {
    let x = idx_images(&fs::read(images)?)?;
    let y = idx_labels(&fs::read(labels)?)?;
    let classes = y.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(x, y, classes, split)
}

pub fn write_idx(path: impl AsRef<Path>, magic: u32, dims: &[usize], data: &[u8]) -> Result<()> {
    let mut buf = magic.to_be_bytes().to_vec();
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_be_bytes());
    }
    buf.extend_from_slice(data);
    fs::write(path, buf)?;
    Ok(())
}

/// CIFAR-10 binary batch: per record one label byte then 1024 red, 1024
/// green and 1024 blue pixels, each plane row-major.
pub fn parse_cifar(buf: &[u8], split: &str) -> Result<Dataset> {
    if buf.len() % CIFAR_RECORD != 0 {
        let whole = buf.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(truncated("CIFAR record", whole + CIFAR_RECORD, buf.len(), whole));
    }
    let n = buf.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for rec in buf.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10, split)
}

pub fn load_cifar_bin(path: impl AsRef<Path>, split: &str) -> Result<Dataset> {
    parse_cifar(&fs::read(path)?, split)
}

/// Shape and difficulty of [`synth_dataset_with`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOptions {
    pub channels: usize,
    pub size: usize,
    /// Weight of the uniform noise; the class template gets `1 - noise`.
    pub noise: f32,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            channels: 1,
            size: 16,
            noise: 0.5,
        }
    }
}

/// Class `c` images are `(1 - noise) * T_c + noise * U(0, 1)` with a fixed
/// random template `T_c`. Labels cycle through the classes, then the order
/// is shuffled.
pub fn synth_dataset_with(classes: usize, n: usize, seed: u64, opts: &SynthOptions) -> Result<Dataset> {
    if classes < 2 || n % classes != 0 {
        return Err(Error::arg("synth_dataset", format!("n = {n} must be a positive multiple of {classes} classes")));
    }
    if !(0.0..=1.0).contains(&opts.noise) || opts.channels == 0 || opts.size == 0 {
        return Err(Error::arg("synth_dataset", format!("bad options {opts:?}")));
    }
    let numel = opts.channels * opts.size * opts.size;
    let mut trng = seeded(&[seed, 0x7e3a]);
    let templates: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..numel).map(|_| if trng.random::<f32>() < 0.5 { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut rng = seeded(&[seed, 0x5a17]);
    labels.shuffle(&mut rng);
    let mut pixels = Vec::with_capacity(n * numel);
    for &l in &labels {
        for &t in &templates[l] {
            let v = (1.0 - opts.noise) * t + opts.noise * rng.random::<f32>();
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    Dataset::new(
        Tensor::new(vec![n, opts.channels, opts.size, opts.size], pixels)?,
        labels,
        classes,
        "synth",
    )
}

pub fn synth_dataset(classes: usize, n: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_with(classes, n, seed, &SynthOptions::default())
}

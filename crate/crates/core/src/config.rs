//! Run configuration: a TOML file with `[run]`, `[data]`, `[model]`,
//! `[hardware]` and `[train]` tables. Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analog::{DEFAULT_ADC_BITS, DEFAULT_LINEAR_GROUP};
use crate::data::{load_cifar_bin, load_idx, synth_dataset_with, Dataset, SynthOptions};
use crate::error::{Error, Result};
use crate::inject::{Type1Options, DEFAULT_BINS, DEFAULT_DEGREE};
use crate::model::{ArchConfig, Hardware, Model, ScScaling};
use crate::mult::{MultTable, DEFAULT_DROP_K};
use crate::rng::mix;
use crate::sc::{ScConfig, DEFAULT_STREAM_LENGTH, STREAM_LENGTHS};
use crate::trainer::TrainPlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ArchConfig,
    #[serde(default)]
    pub hardware: HardwareConfig,
    #[serde(default)]
    pub train: TrainPlan,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Directory for the report, checkpoint and manifest.
    pub output_dir: PathBuf,
    /// Checkpoint to start from instead of a fresh initialization.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    Synth {
        classes: usize,
        train_size: usize,
        eval_size: usize,
        #[serde(default = "default_synth_size")]
        size: usize,
        #[serde(default = "default_synth_channels")]
        channels: usize,
        #[serde(default = "default_synth_noise")]
        noise: f32,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval_labels: Option<PathBuf>,
        /// Keep only the first `limit` records of each split.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
    Cifar {
        train_files: Vec<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval_file: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
}

fn default_synth_size() -> usize {
    SynthOptions::default().size
}
fn default_synth_channels() -> usize {
    SynthOptions::default().channels
}
fn default_synth_noise() -> f32 {
    SynthOptions::default().noise
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareConfig {
    pub stream_length: usize,
    pub sc_scaling: ScScaling,
    /// `default`, `default:<k>` or a path to a table file.
    pub mult_table: String,
    pub adc_bits: u32,
    /// Inputs per ADC group in linear layers.
    pub analog_group_size: usize,
    pub type1_degree: usize,
    pub type1_bins: usize,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        Self {
            stream_length: DEFAULT_STREAM_LENGTH,
            sc_scaling: ScScaling::default(),
            mult_table: format!("default:{DEFAULT_DROP_K}"),
            adc_bits: DEFAULT_ADC_BITS,
            analog_group_size: DEFAULT_LINEAR_GROUP,
            type1_degree: DEFAULT_DEGREE,
            type1_bins: DEFAULT_BINS,
        }
    }
}

/// Train and optional eval split.
pub struct Splits {
    pub train: Dataset,
    pub eval: Option<Dataset>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and validates `path`; relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invariant(format!("config serialization: {e}")))
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.train.validate()?;
        self.model.tiny_conv(self.train.method)?;
        let h = &self.hardware;
        if !STREAM_LENGTHS.contains(&h.stream_length) {
            return bad(format!("stream_length {} not in {STREAM_LENGTHS:?}", h.stream_length));
        }
        if !(1..=16).contains(&h.adc_bits) {
            return bad(format!("adc_bits {} outside 1..=16", h.adc_bits));
        }
        if h.analog_group_size == 0 || h.type1_bins == 0 {
            return bad("analog_group_size and type1_bins must be positive".into());
        }
        if h.type1_degree + 1 > h.type1_bins {
            return bad(format!("type1_degree {} needs more than {} bins", h.type1_degree, h.type1_bins));
        }
        if h.mult_table.is_empty() {
            return bad("mult_table must not be empty".into());
        }
        match &self.data {
            DataConfig::Synth {
                classes,
                train_size,
                eval_size,
                size,
                channels,
                noise,
            } => {
                if *classes < 2 || train_size % classes != 0 || eval_size % classes != 0 || *train_size == 0 {
                    return bad("synth train_size and eval_size must be multiples of classes >= 2".into());
                }
                if !(0.0..=1.0).contains(noise) {
                    return bad(format!("synth noise {noise} outside [0, 1]"));
                }
                if *classes != self.model.classes || *size != self.model.input_size || *channels != self.model.input_channels {
                    return bad("synth data shape and class count must match [model]".into());
                }
            }
            DataConfig::Idx { eval_images, eval_labels, limit, .. } => {
                if eval_images.is_some() != eval_labels.is_some() {
                    return bad("eval_images and eval_labels must be given together".into());
                }
                if *limit == Some(0) {
                    return bad("limit must be positive".into());
                }
            }
            DataConfig::Cifar { train_files, limit, .. } => {
                if train_files.is_empty() {
                    return bad("cifar train_files is empty".into());
                }
                if *limit == Some(0) {
                    return bad("limit must be positive".into());
                }
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        match &mut self.data {
            DataConfig::Synth { .. } => {}
            DataConfig::Idx {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
                ..
            } => {
                fix(train_images);
                fix(train_labels);
                eval_images.iter_mut().for_each(fix);
                eval_labels.iter_mut().for_each(fix);
            }
            DataConfig::Cifar { train_files, eval_file, .. } => {
                train_files.iter_mut().for_each(fix);
                eval_file.iter_mut().for_each(fix);
            }
        }
        if let Some(p) = &mut self.run.pretrained {
            fix(p);
        }
    }

    pub fn hardware(&self) -> Result<Hardware> {
        let h = &self.hardware;
        Ok(Hardware {
            sc: ScConfig::new(h.stream_length, mix(&[self.train.seed, 0x5c]))?,
            sc_scaling: h.sc_scaling,
            table: Arc::new(MultTable::from_spec(&h.mult_table)?),
            adc_bits: h.adc_bits,
            analog_group_size: h.analog_group_size,
            type1: Type1Options {
                degree: h.type1_degree,
                bins: h.type1_bins,
            },
        })
    }

    /// Fresh TinyConv in the plan's kernel mode, or the pretrained weights.
    pub fn build_model(&self) -> Result<Model> {
        let mut model = Model::tiny_conv(&self.model, self.train.method, self.train.seed)?;
        if let Some(p) = &self.run.pretrained {
            crate::checkpoint::load_model(p, &mut model)?;
            model.set_mode(self.train.method);
        }
        Ok(model)
    }

    pub fn load_data(&self) -> Result<Splits> {
        let limit = |d: Dataset, n: Option<usize>| match n {
            Some(n) if n < d.len() => {
                let split = d.split.clone();
                d.slice(0, n, split)
            }
            _ => Ok(d),
        };
        let splits = match &self.data {
            DataConfig::Synth {
                classes,
                train_size,
                eval_size,
                size,
                channels,
                noise,
            } => {
                let opts = SynthOptions {
                    channels: *channels,
                    size: *size,
                    noise: *noise,
                };
                let all = synth_dataset_with(*classes, train_size + eval_size, self.train.seed, &opts)?;
                Splits {
                    train: all.slice(0, *train_size, "train")?,
                    eval: Some(all.slice(*train_size, train_size + eval_size, "eval")?),
                }
            }
            DataConfig::Idx {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
                limit: n,
            } => Splits {
                train: limit(load_idx(train_images, train_labels, "train")?, *n)?,
                eval: match (eval_images, eval_labels) {
                    (Some(i), Some(l)) => Some(limit(load_idx(i, l, "eval")?, *n)?),
                    _ => None,
                },
            },
            DataConfig::Cifar {
                train_files,
                eval_file,
                limit: n,
            } => {
                let parts = train_files
                    .iter()
                    .map(|p| load_cifar_bin(p, "train"))
                    .collect::<Result<Vec<_>>>()?;
                Splits {
                    train: limit(Dataset::concat(&parts, "train")?, *n)?,
                    eval: match eval_file {
                        Some(p) => Some(limit(load_cifar_bin(p, "eval")?, *n)?),
                        None => None,
                    },
                }
            }
        };
        let want = [self.model.input_channels, self.model.input_size, self.model.input_size];
        for d in std::iter::once(&splits.train).chain(splits.eval.as_ref()) {
            if d.image_shape() != want {
                return Err(Error::Config(format!(
                    "{} images have shape {:?} but [model] expects {want:?}",
                    d.split,
                    d.image_shape()
                )));
            }
            if d.classes > self.model.classes {
                return Err(Error::Config(format!(
                    "{} labels span {} classes but [model] has {}",
                    d.split, d.classes, self.model.classes
                )));
            }
        }
        Ok(splits)
    }
}

//! Run configuration files.
//!
//! A run is described in TOML:
//!
//! ```toml
//! stage = "scaffnet"          # or "fusionnet"
//! seed = 1
//! preset = "tiny"             # or "full"
//!
//! [data]
//! train = "data/room"         # relative to this file
//! validation = "data/room-val"
//!
//! [model]
//! spp = true
//! spp_kernels = [5, 7, 9, 11, 13]
//! head = "scale-residual"     # or "direct" (fusionnet)
//! scaffnet_checkpoint = "runs/scaffnet/latest.ckpt"   # fusionnet only
//!
//! [optim]
//! learning_rate = 1e-3
//! halve_at_epochs = [6, 8]
//! batch_size = 8
//! epochs = 10
//! crop = [64, 96]             # height, width; scaffnet only
//! flip = true
//!
//! [fusion]
//! pose_source = "ground-truth"    # or "learned"
//! tp_start_step = 200             # default: 20% of all steps
//! joint_finetune = false
//!
//! [loss]                      # default: the corner weights
//! w_ph = 1.0
//! w_co = 0.2
//! w_st = 0.4
//! w_sz = 1.0
//! w_sm = 0.4
//! w_tp = 0.1
//! ```
//!
//! Unknown keys are rejected, and every error names the offending key path.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::{OutputHead, Preset, ScaffNetConfig};
use crate::optim::{AdamConfig, LrSchedule};
use crate::pipeline::{FusionOptions, PoseSource, TrainOptions};
use crate::spp::SppConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Scaffnet,
    Fusionnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    #[serde(default)]
    pub validation: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "yes")]
    pub spp: bool,
    #[serde(default)]
    pub spp_kernels: Option<Vec<usize>>,
    #[serde(default = "default_head")]
    pub head: OutputHead,
    #[serde(default)]
    pub scaffnet_checkpoint: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            spp: true,
            spp_kernels: None,
            head: default_head(),
            scaffnet_checkpoint: None,
        }
    }
}

fn yes() -> bool {
    true
}
fn default_head() -> OutputHead {
    OutputHead::ScaleResidual
}
fn default_preset() -> Preset {
    Preset::Tiny
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub halve_at_epochs: Vec<usize>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub crop: Option<[usize; 2]>,
    #[serde(default)]
    pub flip: bool,
    #[serde(default)]
    pub max_steps: Option<u64>,
}

fn default_beta1() -> f64 {
    AdamConfig::default().beta1
}
fn default_beta2() -> f64 {
    AdamConfig::default().beta2
}
fn default_epsilon() -> f64 {
    AdamConfig::default().epsilon
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    #[serde(default)]
    pub pose_source: PoseSource,
    #[serde(default)]
    pub tp_start_step: Option<u64>,
    #[serde(default)]
    pub joint_finetune: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub optim: OptimConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub loss: Option<LossWeights>,
}

/// Deserialize TOML, reporting failures with the key path they occurred at.
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = toml::de::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." { "<document>".to_string() } else { path };
        Error::config(key, e.into_inner().message().trim())
    })
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_toml(&std::fs::read_to_string(path)?)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = parse_toml(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Load a config file; relative data and checkpoint paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c: Self = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut c.data.train);
        if let Some(v) = &mut c.data.validation {
            rebase(v);
        }
        if let Some(s) = &mut c.model.scaffnet_checkpoint {
            rebase(s);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::config("optim.learning_rate", format!("must be > 0, got {}", o.learning_rate)));
        }
        if o.epochs < 1 {
            return Err(Error::config("optim.epochs", "must be at least 1"));
        }
        if o.batch_size < 1 {
            return Err(Error::config("optim.batch_size", "must be at least 1"));
        }
        for (key, b) in [("optim.beta1", o.beta1), ("optim.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(o.epsilon > 0.0) {
            return Err(Error::config("optim.epsilon", "must be > 0"));
        }
        if let Some([h, w]) = o.crop {
            if self.stage == Stage::Fusionnet {
                return Err(Error::config("optim.crop", "cropping breaks the camera model; scaffnet only"));
            }
            crate::nets::check_resolution(w, h).map_err(|e| Error::config("optim.crop", e.to_string()))?;
        }
        if let Some(k) = &self.model.spp_kernels {
            SppConfig {
                kernel_sizes: k.clone(),
                ..SppConfig::corner()
            }
            .validate()
            .map_err(|e| Error::config("model.spp_kernels", e.to_string()))?;
        }
        if let Some(w) = &self.loss {
            w.validate().map_err(|e| Error::config("loss", e.to_string()))?;
        }
        if self.stage == Stage::Fusionnet && self.model.scaffnet_checkpoint.is_none() {
            return Err(Error::config("model.scaffnet_checkpoint", "required for the fusionnet stage"));
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        let o = &self.optim;
        TrainOptions {
            seed: self.seed,
            epochs: o.epochs,
            batch_size: o.batch_size,
            schedule: LrSchedule {
                base: o.learning_rate,
                halve_at_epochs: o.halve_at_epochs.clone(),
            },
            adam: AdamConfig {
                beta1: o.beta1,
                beta2: o.beta2,
                epsilon: o.epsilon,
            },
            crop: o.crop.map(|[h, w]| (h, w)),
            flip: o.flip,
            max_steps: o.max_steps,
            workers: None,
        }
    }

    pub fn fusion_options(&self) -> FusionOptions {
        FusionOptions {
            weights: self.loss.unwrap_or_else(LossWeights::corner),
            tp_start_step: self.fusion.tp_start_step,
            pose_source: self.fusion.pose_source,
            joint_finetune: self.fusion.joint_finetune,
        }
    }

    pub fn scaffnet_config(&self) -> ScaffNetConfig {
        let spp = self.model.spp.then(|| {
            let mut c = SppConfig::corner();
            if let Some(k) = &self.model.spp_kernels {
                c.kernel_sizes = k.clone();
            }
            c
        });
        ScaffNetConfig::preset(self.preset, spp)
    }
}

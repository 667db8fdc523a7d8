//! Run configuration: a flat JSON object with dotted keys.
//!
//! ```json
//! { "fusion.mode": "SCTF", "model.d": 32, "data.manifest": "data/manifest.json" }
//! ```
//!
//! Unknown keys are rejected. Relative paths resolve against the directory
//! of the configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::{FusionMode, ModelConfig, TsvitConfig};
use crate::train::{AdamConfig, TrainConfig};

pub const SEED_ENV: &str = "MMTSVIT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(rename = "fusion.mode")]
    pub mode: FusionMode,
    #[serde(rename = "model.t")]
    pub t: usize,
    #[serde(rename = "model.h")]
    pub h: usize,
    #[serde(rename = "model.w")]
    pub w: usize,
    #[serde(rename = "model.d")]
    pub d: usize,
    /// Optional cross-check against the dataset's class count.
    #[serde(rename = "model.K", skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(rename = "model.L_T")]
    pub temporal_depth: usize,
    #[serde(rename = "model.L_S")]
    pub spatial_depth: usize,
    #[serde(rename = "model.heads")]
    pub heads: usize,
    #[serde(rename = "model.mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(rename = "optim.lr")]
    pub lr: f64,
    #[serde(rename = "optim.beta1")]
    pub beta1: f64,
    #[serde(rename = "optim.beta2")]
    pub beta2: f64,
    #[serde(rename = "optim.eps")]
    pub eps: f64,
    #[serde(rename = "train.epochs")]
    pub epochs: usize,
    #[serde(rename = "train.batch_size")]
    pub batch_size: usize,
    #[serde(rename = "train.augment")]
    pub augment: bool,
    #[serde(rename = "train.ignore_background")]
    pub ignore_background: bool,
    #[serde(rename = "data.manifest")]
    pub manifest: PathBuf,
    /// Modality ids in stream order; empty means every manifest modality.
    #[serde(rename = "data.modalities")]
    pub modalities: Vec<String>,
    #[serde(rename = "out.dir")]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let optim = AdamConfig::default();
        Self {
            seed: 0,
            mode: FusionMode::SyncClassToken,
            t: 1,
            h: 2,
            w: 2,
            d: 128,
            k: None,
            temporal_depth: 6,
            spatial_depth: 2,
            heads: 4,
            mlp_ratio: 4,
            lr: optim.lr,
            beta1: optim.beta1,
            beta2: optim.beta2,
            eps: optim.eps,
            epochs: 50,
            batch_size: 8,
            augment: true,
            ignore_background: false,
            manifest: PathBuf::from("manifest.json"),
            modalities: Vec::new(),
            out_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a configuration file, resolves its relative paths and applies
    /// the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.manifest = base.join(&cfg.manifest);
        cfg.out_dir = base.join(&cfg.out_dir);
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn optim(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optim: self.optim(),
            seed: self.seed,
            augment: self.augment,
            ignore_background: self.ignore_background,
        }
    }

    /// Model configuration for a dataset: class count, grid and channels
    /// come from the manifest.
    pub fn model_config(&self, manifest: &DatasetManifest) -> Result<ModelConfig> {
        if let Some(k) = self.k {
            if k != manifest.num_classes {
                return Err(Error::Config(format!(
                    "model.K = {k} but the dataset has {} classes",
                    manifest.num_classes
                )));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("optim.lr must be finite and ≥ 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be ≥ 1".into()));
        }
        let ids: Vec<String> = if self.modalities.is_empty() {
            manifest.modalities.iter().map(|m| m.id.clone()).collect()
        } else {
            self.modalities.clone()
        };
        let channels = ids
            .iter()
            .map(|id| {
                manifest
                    .modality(id)
                    .map(|m| m.channels)
                    .ok_or_else(|| Error::Config(format!("modality {id} not in the dataset")))
            })
            .collect::<Result<Vec<_>>>()?;
        let t = manifest.target_dates.len();
        if self.t == 0 || !t.is_multiple_of(self.t) {
            return Err(Error::Config(format!(
                "temporal patch {} does not divide axis T = {t}",
                self.t
            )));
        }
        let cfg = ModelConfig {
            mode: self.mode,
            tsvit: TsvitConfig {
                patch_t: self.t,
                patch_h: self.h,
                patch_w: self.w,
                dim: self.d,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
                temporal_depth: self.temporal_depth,
                spatial_depth: self.spatial_depth,
                num_classes: manifest.num_classes,
                height: manifest.size,
                width: manifest.size,
            },
            modalities: ids,
            channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

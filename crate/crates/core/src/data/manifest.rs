use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::{read_container, write_atomic};
use super::resample::{bilinear_upsample, rbf_gapfill, temporal_align, DEFAULT_MAX_GAP, RBF_WINDOWS};
use super::sample::{CoRegisteredSet, SitsSample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST_VERSION: u32 = 1;

/// How a modality's native date grid is mapped onto the target dates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalMode {
    /// Irregular acquisitions, resampled with the RBF ensemble.
    Gapfill,
    /// Dense acquisitions, nearest frame per target date.
    Align,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub id: String,
    pub channels: usize,
    /// Native square grid size.
    pub size: usize,
    pub temporal: TemporalMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Label grid, the finest modality grid.
    pub size: usize,
    /// Common dates every modality is resampled onto.
    pub target_dates: Vec<u16>,
    pub modalities: Vec<ModalitySpec>,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Data(format!("unsupported manifest version {}", self.version)));
        }
        if self.num_classes < 2 {
            return Err(Error::Data("a dataset needs at least 2 classes".into()));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Data(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        super::sample::validate_dates("target", &self.target_dates)?;
        if self.target_dates.is_empty() {
            return Err(Error::Data("no target dates".into()));
        }
        for m in &self.modalities {
            if m.size == 0 || m.size > self.size {
                return Err(Error::Data(format!("modality {}: grid {} exceeds label grid {}", m.id, m.size, self.size)));
            }
        }
        Ok(())
    }

    pub fn modality(&self, id: &str) -> Option<&ModalitySpec> {
        self.modalities.iter().find(|m| m.id == id)
    }

    /// Reads and validates a manifest; every referenced file must exist.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for entry in &manifest.samples {
            let p = base.join(&entry.path);
            if !p.is_file() {
                return Err(Error::Data(format!("manifest references missing file {}", p.display())));
            }
        }
        Ok((manifest, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    /// Reads every container of `split` and resamples it onto the common
    /// grid, in manifest order.
    pub fn load_split<S: Scalar>(&self, base: &Path, split: Split) -> Result<Vec<CoRegisteredSet<S>>> {
        self.samples
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let raw = read_container(&base.join(&e.path))?;
                if raw.num_classes != self.num_classes {
                    return Err(Error::Data(format!(
                        "{}: {} classes, manifest declares {}",
                        e.path, raw.num_classes, self.num_classes
                    )));
                }
                self.prepare(&raw)
            })
            .collect()
    }

    /// Resamples every declared modality of a raw set to the target dates
    /// and the label grid.
    pub fn prepare<S: Scalar>(&self, raw: &CoRegisteredSet<S>) -> Result<CoRegisteredSet<S>> {
        let samples = self
            .modalities
            .iter()
            .map(|spec| {
                let s = raw
                    .modality(&spec.id)
                    .ok_or_else(|| Error::Data(format!("modality {} missing from container", spec.id)))?;
                prepare_modality(s, spec, &self.target_dates, self.size)
            })
            .collect::<Result<Vec<_>>>()?;
        CoRegisteredSet::new(samples, raw.labels.clone(), self.num_classes)
    }
}

pub fn prepare_modality<S: Scalar>(
    s: &SitsSample<S>,
    spec: &ModalitySpec,
    targets: &[u16],
    size: usize,
) -> Result<SitsSample<S>> {
    let (_, h, w, c) = s.dims();
    if c != spec.channels {
        return Err(Error::Data(format!(
            "modality {}: {c} channels, manifest declares {}",
            spec.id, spec.channels
        )));
    }
    if (h, w) != (spec.size, spec.size) {
        return Err(Error::Data(format!(
            "modality {}: grid {h}×{w}, manifest declares {}×{}",
            spec.id, spec.size, spec.size
        )));
    }
    let timed = match spec.temporal {
        TemporalMode::Gapfill => rbf_gapfill(s, targets, &RBF_WINDOWS)?,
        TemporalMode::Align => temporal_align(s, targets, DEFAULT_MAX_GAP)?,
    };
    let (name, x, dates) = timed.into_parts();
    SitsSample::new(name, bilinear_upsample(&x, size, size)?, dates)
}

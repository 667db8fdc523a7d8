//! Seeded synthetic co-registered scenes.
//!
//! Each scene is a background (class 0) label map overlaid with
//! rectangular fields of classes `1..K`, aligned to the coarsest modality
//! grid. Every pixel of every modality carries a seasonal sinusoid chosen
//! by its class, plus Gaussian noise.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::container::write_container;
use super::manifest::{DatasetManifest, ManifestEntry, ModalitySpec, Split, TemporalMode, MANIFEST_VERSION};
use super::sample::{CoRegisteredSet, LabelMap, SitsSample, MAX_DAY_OF_YEAR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignatureMode {
    /// Every class has its own signature in every modality.
    Distinct,
    /// Modality `m` only sees bit `m mod ⌈log2 K⌉` of the class index, so
    /// each modality alone confuses classes in pairs.
    Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub num_classes: usize,
    /// Label grid, equal to the finest modality grid.
    pub size: usize,
    pub modalities: Vec<ModalitySpec>,
    /// Number of common dates `15, 25, ...`.
    pub n_timesteps: usize,
    pub signature: SignatureMode,
    pub noise: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl SynthConfig {
    /// Sentinel-like optical and SAR grids at a third of the commercial
    /// grid's resolution:
    /// `M=1: [s2]`, `M=2: [s2, pf]`, `M=3: [s1, s2, pf]`, extra modalities
    /// are coarse `m3, m4, ...`.
    pub fn preset(modalities: usize, num_classes: usize, size: usize, n_samples: usize, seed: u64) -> Result<Self> {
        if modalities == 0 {
            return Err(Error::Config("at least one modality is required".into()));
        }
        let coarse = size / 3;
        if modalities > 1 && (!size.is_multiple_of(3) || coarse == 0) {
            return Err(Error::Config(format!(
                "grid size {size} must be a positive multiple of 3 for multi-resolution presets"
            )));
        }
        let spec = |id: &str, channels, size, temporal| ModalitySpec {
            id: id.into(),
            channels,
            size,
            temporal,
        };
        let mods = match modalities {
            1 => vec![spec("s2", 10, size, TemporalMode::Gapfill)],
            2 => vec![
                spec("s2", 10, coarse, TemporalMode::Gapfill),
                spec("pf", 4, size, TemporalMode::Align),
            ],
            m => {
                let mut v = vec![
                    spec("s1", 2, coarse, TemporalMode::Gapfill),
                    spec("s2", 10, coarse, TemporalMode::Gapfill),
                    spec("pf", 4, size, TemporalMode::Align),
                ];
                v.extend((3..m).map(|j| spec(&format!("m{j}"), 3, coarse, TemporalMode::Gapfill)));
                v
            }
        };
        Ok(Self {
            seed,
            n_samples,
            num_classes,
            size,
            modalities: mods,
            n_timesteps: 12,
            signature: SignatureMode::Distinct,
            noise: 0.05,
            val_fraction: 0.2,
            test_fraction: 0.2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("classification needs K ≥ 2 classes".into()));
        }
        if self.num_classes > u16::MAX as usize {
            return Err(Error::Config("too many classes".into()));
        }
        if self.n_samples == 0 || self.modalities.is_empty() || self.size == 0 {
            return Err(Error::Config("samples, modalities and grid size must be ≥ 1".into()));
        }
        if self.n_timesteps == 0 || 15 + 10 * (self.n_timesteps - 1) > MAX_DAY_OF_YEAR as usize {
            return Err(Error::Config(format!("{} time steps do not fit in one year", self.n_timesteps)));
        }
        for m in &self.modalities {
            if m.size == 0 || m.channels == 0 || !self.size.is_multiple_of(m.size) {
                return Err(Error::Config(format!(
                    "modality {}: grid {} must divide the label grid {}",
                    m.id, m.size, self.size
                )));
            }
        }
        if self.modalities.iter().all(|m| m.size != self.size) {
            return Err(Error::Config("label grid must equal the finest modality grid".into()));
        }
        let fractions = self.val_fraction + self.test_fraction;
        if !(0.0..=1.0).contains(&self.val_fraction) || !(0.0..=1.0).contains(&self.test_fraction) || fractions > 1.0 {
            return Err(Error::Config("split fractions must lie in [0, 1] and sum to ≤ 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    pub fn target_dates(&self) -> Vec<u16> {
        (0..self.n_timesteps).map(|i| 15 + 10 * i as u16).collect()
    }

    /// Train, then val, then test, by sample index.
    pub fn split_of(&self, index: usize) -> Split {
        let n = self.n_samples as f64;
        let n_val = (n * self.val_fraction).round() as usize;
        let n_test = (n * self.test_fraction).round() as usize;
        let n_train = self.n_samples.saturating_sub(n_val + n_test);
        if index < n_train {
            Split::Train
        } else if index < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }

    fn coarsest(&self) -> usize {
        self.modalities.iter().map(|m| m.size).min().unwrap_or(self.size)
    }
}

#[derive(Clone, Copy, Debug)]
struct Signature {
    base: f64,
    amp: f64,
    phase: f64,
}

/// Generator with the per-class signature table drawn once from the seed.
#[derive(Clone, Debug)]
pub struct SyntheticGenerator {
    config: SynthConfig,
    /// `[modality][key][channel]`
    signatures: Vec<Vec<Vec<Signature>>>,
    period: f64,
}

impl SyntheticGenerator {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let keys = match config.signature {
            SignatureMode::Distinct => config.num_classes,
            SignatureMode::Split => 2,
        };
        let signatures = config
            .modalities
            .iter()
            .map(|m| {
                (0..keys)
                    .map(|_| {
                        (0..m.channels)
                            .map(|_| Signature {
                                base: rng.random_range(0.1..0.6),
                                amp: rng.random_range(0.05..0.3),
                                phase: rng.random_range(0.0..TAU),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let period = (15 + 10 * config.n_timesteps) as f64;
        Ok(Self {
            config,
            signatures,
            period,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    fn bits(&self) -> usize {
        let k = self.config.num_classes;
        (usize::BITS - (k - 1).leading_zeros()).max(1) as usize
    }

    fn key(&self, modality: usize, class: u16) -> usize {
        match self.config.signature {
            SignatureMode::Distinct => class as usize,
            SignatureMode::Split => (class as usize >> (modality % self.bits())) & 1,
        }
    }

    fn sample_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(index as u64 + 1);
        rng
    }

    fn label_map(&self, rng: &mut ChaCha8Rng) -> LabelMap {
        let size = self.config.size;
        let cells = self.config.coarsest();
        let cell = size / cells;
        let k = self.config.num_classes;
        let mut grid = vec![0u16; cells * cells];
        let max_side = (cells / 2).max(1);
        let n_rects = rng.random_range(k - 1..=2 * k);
        for r in 0..n_rects {
            // the first K-1 rectangles cover every foreground class once
            let class = if r < k - 1 { r + 1 } else { rng.random_range(1..k) } as u16;
            let h = rng.random_range(1..=max_side);
            let w = rng.random_range(1..=max_side);
            let y0 = rng.random_range(0..=cells - h);
            let x0 = rng.random_range(0..=cells - w);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    grid[y * cells + x] = class;
                }
            }
        }
        let classes = (0..size * size)
            .map(|p| grid[(p / size / cell) * cells + (p % size) / cell])
            .collect();
        LabelMap::new(size, size, classes).expect("label grid is size × size")
    }

    fn acquisition_dates(&self, spec: &ModalitySpec, rng: &mut ChaCha8Rng) -> Vec<u16> {
        let targets = self.config.target_dates();
        let (first, last) = (targets[0], *targets.last().unwrap());
        match spec.temporal {
            TemporalMode::Align => {
                let lo = first.saturating_sub(5).max(1);
                let hi = (last + 5).min(MAX_DAY_OF_YEAR);
                // every fourth day is always kept, bounding gaps to 3 days
                (lo..=hi).filter(|&d| d % 4 == 0 || rng.random_bool(0.8)).collect()
            }
            TemporalMode::Gapfill => {
                let hi = (last + 30).min(MAX_DAY_OF_YEAR);
                let offset = rng.random_range(1..=5u16);
                let dates: Vec<u16> = (offset..=hi)
                    .step_by(5)
                    .filter(|_| rng.random_bool(0.6))
                    .collect();
                if dates.is_empty() {
                    vec![offset]
                } else {
                    dates
                }
            }
        }
    }

    /// One raw scene at native resolutions and date grids.
    pub fn scene(&self, index: usize) -> Result<CoRegisteredSet<f64>> {
        let mut rng = self.sample_rng(index);
        let labels = self.label_map(&mut rng);
        let noise = Normal::new(0.0, self.config.noise).map_err(|e| Error::Config(e.to_string()))?;
        let mut samples = Vec::with_capacity(self.config.modalities.len());
        for (m, spec) in self.config.modalities.iter().enumerate() {
            let dates = self.acquisition_dates(spec, &mut rng);
            let cell = self.config.size / spec.size;
            let (n, c) = (spec.size, spec.channels);
            let mut data = Vec::with_capacity(dates.len() * n * n * c);
            for &d in &dates {
                let season = TAU * d as f64 / self.period;
                for y in 0..n {
                    for x in 0..n {
                        let class = labels.at(y * cell + cell / 2, x * cell + cell / 2);
                        let sig = &self.signatures[m][self.key(m, class)];
                        for s in sig {
                            let v = s.base + s.amp * (season + s.phase).sin() + noise.sample(&mut rng);
                            data.push(v as f32 as f64);
                        }
                    }
                }
            }
            let x = Tensor::new(vec![dates.len(), n, n, c], data)?;
            samples.push(SitsSample::new(spec.id.clone(), x, dates)?);
        }
        CoRegisteredSet::new(samples, labels, self.config.num_classes)
    }

    pub fn manifest(&self, paths: Vec<String>) -> DatasetManifest {
        let cfg = &self.config;
        DatasetManifest {
            version: MANIFEST_VERSION,
            seed: cfg.seed,
            num_classes: cfg.num_classes,
            class_names: (0..cfg.num_classes)
                .map(|c| if c == 0 { "background".into() } else { format!("crop_{c}") })
                .collect(),
            size: cfg.size,
            target_dates: cfg.target_dates(),
            modalities: cfg.modalities.clone(),
            samples: paths
                .into_iter()
                .enumerate()
                .map(|(i, path)| ManifestEntry {
                    path,
                    split: cfg.split_of(i),
                })
                .collect(),
        }
    }
}

/// Writes `sample_NNNN.msit` files and `manifest.json` into `out_dir`;
/// returns the manifest path.
pub fn gen_synthetic_dataset(config: SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    let generator = SyntheticGenerator::new(config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(generator.config.n_samples);
    for i in 0..generator.config.n_samples {
        let name = format!("sample_{i:04}.msit");
        write_container(&generator.scene(i)?, &out_dir.join(&name))?;
        paths.push(name);
    }
    let manifest_path = out_dir.join("manifest.json");
    generator.manifest(paths).save(&manifest_path)?;
    Ok(manifest_path)
}

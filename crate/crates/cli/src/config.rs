use std::path::{Path, PathBuf};

use adpm_core::data::{generate_longtail, load_csv, train_test_split, DatasetTable, LongTailSpec};
use adpm_core::metrics::BoundSettings;
use adpm_core::trainer::TrainConfig;
use anyhow::Context;
use serde::{Deserialize, Serialize};

/// Where samples come from: a CSV file or the synthetic long-tail mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub csv: Option<PathBuf>,
    /// Separate test file; otherwise the held-out part of the split.
    pub test_csv: Option<PathBuf>,
    pub classes: Option<usize>,
    pub synthetic: LongTailSpec,
    pub train_frac: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            csv: None,
            test_csv: None,
            classes: None,
            synthetic: LongTailSpec::default(),
            train_frac: 0.7,
            split_seed: 0,
        }
    }
}

impl DataConfig {
    fn full(&self) -> anyhow::Result<DatasetTable> {
        Ok(match &self.csv {
            Some(path) => load_csv(path, self.classes)?,
            None => generate_longtail(&self.synthetic)?,
        })
    }

    /// Training and test tables.
    pub fn load(&self) -> anyhow::Result<(DatasetTable, DatasetTable)> {
        let full = self.full()?;
        let (train, test) = if self.train_frac >= 1.0 {
            (full.clone(), full.subset(&[]))
        } else {
            train_test_split(&full, self.train_frac, self.split_seed)?
        };
        let test = match &self.test_csv {
            Some(path) => load_csv(path, Some(self.classes.unwrap_or(train.classes())))?,
            None => test,
        };
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundConfig {
    pub settings: BoundSettings,
    pub dim: usize,
    pub separation: f64,
    pub spread: f64,
    pub thresholds: usize,
    pub threshold_range: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            settings: BoundSettings::default(),
            dim: 2,
            separation: 2.0,
            spread: 1.0,
            thresholds: 16,
            threshold_range: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub cs: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.0, 1.0 / 6.0, 0.5],
            cs: vec![1.0, 5.0],
            seeds: vec![0],
        }
    }
}

/// Everything a run needs. Loaded from `--config`, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bound: BoundConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
            None => Ok(Self::default()),
        }
    }

    /// One seed for training, data generation, splitting and the bound check.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.synthetic.seed = seed;
        self.data.split_seed = seed;
        self.bound.settings.seed = seed;
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}

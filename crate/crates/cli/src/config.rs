//! Run configuration: a single strict JSON document covering training,
//! attack, corruption, and data settings for every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use p2be_core::attack::AttackConfig;
use p2be_core::corruptions::CorruptionLadders;
use p2be_core::training::{Dataset, TrainConfig};
use p2be_core::{Error, Result};

/// Sample source. With `ppm_dir` set the loader reads that directory
/// against `labels_csv`; otherwise the built-in synthetic generator runs
/// with the dimensions below, seeded from the training seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub samples: usize,
    pub size: usize,
    pub ppm_dir: Option<PathBuf>,
    pub labels_csv: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 4,
            samples: 512,
            size: 8,
            ppm_dir: None,
            labels_csv: None,
        }
    }
}

impl DataConfig {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match (&self.ppm_dir, &self.labels_csv) {
            (Some(dir), Some(csv)) => Dataset::from_ppm_dir(dir, csv),
            (Some(_), None) => Err(Error::Config("data.ppm_dir requires data.labels_csv".into())),
            (None, Some(_)) => Err(Error::Config("data.labels_csv requires data.ppm_dir".into())),
            (None, None) => Dataset::synthetic(self.classes, self.samples, self.size, seed),
        }
    }
}

/// Everything a run needs. Parsing is strict: an unknown key anywhere in
/// the document is rejected with a field-level message. `p2be defaults`
/// writes the complete document with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub corruptions: CorruptionLadders,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            corruptions: CorruptionLadders::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config `{}`: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.attack.validate()?;
        self.corruptions.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        text.push('\n');
        Ok(text)
    }
}

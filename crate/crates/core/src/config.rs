//! Run configuration: dataset, networks, training, navigation and output paths
//! in one serializable document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datakit::DatasetSpec;
use crate::error::{io_err, Error, Result};
use crate::navsim::NavConfig;
use crate::trainer::{ModelConfig, TrainConfig};

/// Overrides [`RunConfig::output_root`] when set.
pub const OUTPUT_ROOT_ENV: &str = "ULRSEG_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavSettings {
    /// Repeats per target/start pair in the trial protocol.
    pub repeats: usize,
    /// World files; empty selects the bundled worlds.
    #[serde(default)]
    pub worlds: Vec<PathBuf>,
    pub fsm: NavConfig,
}

impl Default for NavSettings {
    fn default() -> Self {
        Self {
            repeats: 5,
            worlds: Vec::new(),
            fsm: NavConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Run directory name under the output root.
    pub name: String,
    pub output_root: PathBuf,
    pub dataset: DatasetSpec,
    pub models: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub nav: NavSettings,
}

impl RunConfig {
    /// Small networks on the synthetic 8→32 corpus.
    pub fn desk() -> Self {
        let dataset = DatasetSpec::desk("datasets/desk");
        Self {
            name: "desk".into(),
            output_root: "runs".into(),
            models: ModelConfig::toy(dataset.num_classes),
            dataset,
            train: TrainConfig::desk(),
            nav: NavSettings::default(),
        }
    }

    /// Full networks on 16→384 data with the published hyperparameters.
    pub fn full_scale() -> Self {
        let dataset = DatasetSpec::full_scale("datasets/full");
        let mut nav = NavSettings::default();
        nav.fsm.view.size = dataset.crop_size;
        Self {
            name: "full".into(),
            output_root: "runs".into(),
            models: ModelConfig::full(dataset.num_classes),
            dataset,
            train: TrainConfig::full(),
            nav,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full_scale()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk or full)"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "run name {:?} must be a non-empty single path component",
                self.name
            )));
        }
        self.dataset.validate()?;
        self.models.validate()?;
        self.train.validate()?;
        self.nav.fsm.validate()?;
        if self.models.num_classes() != self.dataset.num_classes {
            return Err(Error::Config(format!(
                "segmenter predicts {} classes but the dataset has {}",
                self.models.num_classes(),
                self.dataset.num_classes
            )));
        }
        if self.models.generator.scale != self.dataset.scale() {
            return Err(Error::Config(format!(
                "generator magnifies ×{} but the dataset needs ×{}",
                self.models.generator.scale,
                self.dataset.scale()
            )));
        }
        if self.train.ignore_index != self.dataset.ignore_index {
            return Err(Error::Config(
                "training and dataset ignore indices differ".into(),
            ));
        }
        if self.nav.fsm.view.size != self.dataset.crop_size {
            return Err(Error::Config(format!(
                "navigation views are {} px but the model outputs {} px",
                self.nav.fsm.view.size, self.dataset.crop_size
            )));
        }
        if self.nav.repeats == 0 {
            return Err(Error::Config("navigation needs at least one repeat".into()));
        }
        Ok(())
    }

    /// JSON copy embedded in every artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    /// `output_root`, or the environment override.
    pub fn resolved_output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_root.clone(),
        }
    }

    /// Dataset directory; relative paths are taken under the output root.
    pub fn dataset_dir(&self) -> PathBuf {
        self.resolved_output_root().join(&self.dataset.root_path)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolved_output_root().join(&self.name)
    }
}

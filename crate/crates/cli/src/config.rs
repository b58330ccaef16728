use std::fs;
use std::path::{Path, PathBuf};

use handwash_core::ingest::DEFAULT_ACTIVITY_THRESHOLD;
use handwash_core::label::{validate_class_order, GestureLabel};
use handwash_core::model::HeadSpec;
use handwash_core::predictor::DEFAULT_WINDOW;
use handwash_core::prep::{PreprocessConfig, SplitSpec};
use handwash_core::trainer::{Optimizer, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Problems with the configuration or the paths it references; these map
/// to the validation exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub classes: Vec<GestureLabel>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub predict: PredictSection,
}

fn default_classes() -> Vec<GestureLabel> {
    GestureLabel::SET_2.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory of session videos (MP4 files or frame directories).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub videos_dir: Option<PathBuf>,
    /// Existing manifest directory; when unset, the run's own ingest output is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_dir: Option<PathBuf>,
    #[serde(default = "one")]
    pub sample_every: usize,
    #[serde(default = "default_threshold")]
    pub activity_threshold: f64,
    /// Defaults to half a second of frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_pause_frames: Option<usize>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            videos_dir: None,
            manifest_dir: None,
            sample_every: 1,
            activity_threshold: DEFAULT_ACTIVITY_THRESHOLD,
            min_pause_frames: None,
        }
    }
}

fn one() -> usize {
    1
}

fn default_threshold() -> f64 {
    DEFAULT_ACTIVITY_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub val_fraction: f64,
    /// Classes are undersampled to within this fraction of the smallest one;
    /// unset disables balancing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balance_tolerance: Option<f64>,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            val_fraction: 0.25,
            balance_tolerance: Some(0.2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Backbone weights (safetensors). When unset a seeded stand-in is
    /// generated inside the run directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_sha256: Option<String>,
    pub hidden_units: usize,
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let h = HeadSpec::new(2);
        Self {
            weights: None,
            weights_sha256: None,
            hidden_units: h.hidden_units,
            dropout_rate: h.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(&[], 25);
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    pub window: usize,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self { window: DEFAULT_WINDOW }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: default_classes(),
            dataset: DatasetSection::default(),
            split: SplitSection::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            predict: PredictSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.dataset.videos_dir,
            &mut cfg.dataset.manifest_dir,
            &mut cfg.model.weights,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        validate_class_order(&self.classes).map_err(|e| invalid(e.to_string()))?;
        if self.dataset.sample_every == 0 {
            return Err(invalid("dataset.sample_every must be at least 1"));
        }
        if !(self.split.val_fraction > 0.0 && self.split.val_fraction < 1.0) {
            return Err(invalid(format!(
                "split.val_fraction must lie in (0, 1), got {}",
                self.split.val_fraction
            )));
        }
        if self.split.balance_tolerance.is_some_and(|t| t.is_nan() || t < 0.0) {
            return Err(invalid("split.balance_tolerance must be non-negative"));
        }
        if self.predict.window == 0 {
            return Err(invalid("predict.window must be at least 1"));
        }
        self.head_spec().validate().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// First 12 hex digits of the SHA-256 of the resolved config.
    pub fn hash(&self) -> anyhow::Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(hex::encode(digest)[..12].to_string())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            val_fraction: self.split.val_fraction,
            seed: self.seed,
            ..SplitSpec::default()
        }
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            hidden_units: self.model.hidden_units,
            dropout_rate: self.model.dropout_rate,
            num_classes: self.classes.len(),
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            optimizer: self.train.optimizer,
            seed: self.seed,
            class_order: self.classes.clone(),
        }
    }
}

/// Fails with a validation error unless `path` exists.
pub fn require_path(what: &str, path: &Path) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", path.display())))
    }
}

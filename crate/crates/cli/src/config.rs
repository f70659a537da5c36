//! Run configuration: one JSON document holding every stage's settings.

use std::fs;
use std::path::{Path, PathBuf};

use actionformer::data::{stride_downsample, Dataset};
use actionformer::eval::EvalConfig;
use actionformer::model::ModelConfig;
use actionformer::postprocess::PostprocessConfig;
use actionformer::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn default_train_subset() -> String {
    "train".into()
}
fn default_eval_subset() -> String {
    "test".into()
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset directory holding `annotations.json` and `features/`.
    /// Relative paths are resolved against the config file's directory.
    pub root: PathBuf,
    #[serde(default = "default_train_subset")]
    pub train_subset: String,
    #[serde(default = "default_eval_subset")]
    pub eval_subset: String,
    /// Keep every k-th feature step, multiplying the feature stride by k.
    #[serde(default = "one")]
    pub feature_stride_factor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub postprocess: PostprocessConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Evaluate with the averaged weights rather than the raw ones.
    #[serde(default = "yes")]
    pub use_ema: bool,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = read_json(path)?;
        if cfg.data.root.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.data.root = base.join(&cfg.data.root);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks each section and the constraints that span sections.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.postprocess.validate()?;
        self.eval.validate()?;
        if self.train.t_max > self.model.max_seq_len {
            return Err(CliError::config(format!(
                "train.t_max {} exceeds model.max_seq_len {}",
                self.train.t_max, self.model.max_seq_len
            )));
        }
        if self.data.feature_stride_factor == 0 {
            return Err(CliError::config("data.feature_stride_factor must be at least 1"));
        }
        Ok(())
    }

    /// Loads the dataset, applies the stride factor and checks it against
    /// the model's input width and class count.
    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        let mut data = Dataset::load(&self.data.root, Some(self.model.num_classes))?;
        self.check_dataset(&mut data)?;
        Ok(data)
    }

    pub fn check_dataset(&self, data: &mut Dataset) -> Result<(), CliError> {
        if self.data.feature_stride_factor > 1 {
            for v in &mut data.videos {
                v.features = stride_downsample(&v.features, self.data.feature_stride_factor)?;
            }
        }
        if let Some(dim) = data.input_dim() {
            if dim != self.model.input_dim {
                return Err(CliError::config(format!(
                    "features have dimension {dim}, model.input_dim is {}",
                    self.model.input_dim
                )));
            }
        }
        if data.num_classes > self.model.num_classes {
            return Err(CliError::config(format!(
                "annotations use {} classes, model.num_classes is {}",
                data.num_classes, self.model.num_classes
            )));
        }
        Ok(())
    }
}

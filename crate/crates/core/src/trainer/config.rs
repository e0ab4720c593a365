//! Training configuration, read from a TOML file.
//!
//! ```toml
//! alpha = 0.001
//! epochs = 10
//! stride = 2
//! filter_width = 4
//! n_filters = 4
//! n_layers = 1
//! qubit_count = 5
//! seed = 7
//! class_labels = [3, 9]
//! head = "per_class"        # or "binary"
//! # shots = 1000
//! # max_samples = 45
//! # train_dense = false
//! # retries = 2
//! # window = 32
//! # client_id = "job-a"
//!
//! [dataset]
//! kind = "idx"               # "idx", "csv" or "synthetic"
//! images = "train-images-idx3-ubyte"
//! labels = "train-labels-idx1-ubyte"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::loss::Head;
use crate::circuit::LayerSpec;
use crate::dataset::{self, Dataset, DatasetError};

pub const DEFAULT_ALPHA: f64 = 0.001;
pub const DEFAULT_RETRIES: u32 = 2;
pub const DEFAULT_WINDOW: usize = 32;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_epochs() -> usize {
    1
}
fn default_stride() -> usize {
    2
}
fn default_filter_width() -> usize {
    4
}
fn default_n_filters() -> usize {
    4
}
fn default_n_layers() -> usize {
    1
}
fn default_qubit_count() -> usize {
    5
}
fn default_retries() -> u32 {
    DEFAULT_RETRIES
}
fn default_window() -> usize {
    DEFAULT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_filter_width")]
    pub filter_width: usize,
    #[serde(default = "default_n_filters")]
    pub n_filters: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_qubit_count")]
    pub qubit_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    pub class_labels: Vec<u32>,
    #[serde(default)]
    pub head: Head,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_samples: Option<usize>,
    /// Also train the dense encoder through encoding-angle shifts.
    #[serde(default)]
    pub train_dense: bool,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        height: Option<usize>,
    },
    Synthetic {
        samples: usize,
        side: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl TrainConfig {
    /// Config with every default and the given labels.
    pub fn new(class_labels: Vec<u32>) -> Self {
        TrainConfig {
            alpha: DEFAULT_ALPHA,
            epochs: default_epochs(),
            stride: default_stride(),
            filter_width: default_filter_width(),
            n_filters: default_n_filters(),
            n_layers: default_n_layers(),
            qubit_count: default_qubit_count(),
            shots: None,
            seed: 0,
            class_labels,
            head: Head::PerClass,
            max_samples: None,
            train_dense: false,
            retries: DEFAULT_RETRIES,
            window: DEFAULT_WINDOW,
            client_id: None,
            dataset: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        match &mut cfg.dataset {
            Some(DatasetSpec::Idx { images, labels }) => {
                *images = base.join(&*images);
                *labels = base.join(&*labels);
            }
            Some(DatasetSpec::Csv { path, .. }) => *path = base.join(&*path),
            _ => {}
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        self.layer_spec()?;
        if self.epochs == 0 || self.stride == 0 || self.filter_width == 0 || self.n_filters == 0 {
            return bad("epochs, stride, filter_width and n_filters must be positive".into());
        }
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        if self.shots == Some(0) {
            return bad("shots must be positive when given".into());
        }
        let mut sorted = self.class_labels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.class_labels.len() || sorted.is_empty() {
            return bad("class_labels must be non-empty and distinct".into());
        }
        if self.head == Head::Binary && self.class_labels.len() != 2 {
            return bad("the binary head needs exactly two class labels".into());
        }
        Ok(())
    }

    pub fn layer_spec(&self) -> Result<LayerSpec, ConfigError> {
        LayerSpec::new(self.qubit_count, self.n_layers).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn n_models(&self) -> usize {
        self.head.n_models(self.class_labels.len())
    }

    /// Loads the configured dataset, keeps the configured labels and
    /// min-max normalizes pixels.
    pub fn load_dataset(&self) -> Result<Dataset, ConfigError> {
        let raw = match &self.dataset {
            Some(DatasetSpec::Idx { images, labels }) => dataset::load_idx(images, labels)?,
            Some(DatasetSpec::Csv { path, height }) => dataset::load_csv(path, *height)?,
            Some(DatasetSpec::Synthetic {
                samples,
                side,
                noise,
                seed,
            }) => {
                if self.class_labels.len() != 2 {
                    return Err(ConfigError::Invalid(
                        "the synthetic dataset has exactly two classes".into(),
                    ));
                }
                dataset::synthetic_bars(
                    *samples,
                    *side,
                    [self.class_labels[0], self.class_labels[1]],
                    *noise,
                    *seed,
                )
            }
            None => return Err(ConfigError::Invalid("no [dataset] section".into())),
        };
        let mut ds = raw.select(&self.class_labels, self.max_samples)?;
        ds.normalize();
        Ok(ds)
    }
}

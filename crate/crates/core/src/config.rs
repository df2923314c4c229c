//! Run configuration: one TOML record holding every knob of a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmark::BenchmarkSpec;
use crate::diffusion::{self, GuidanceConfig, ScheduleKind};
use crate::embedding::Format;
use crate::evaluation::ProxyKind;
use crate::preprocess::Preprocess;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Input and output locations. Without `train` the run generates the
/// configured benchmark instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Sidecar for `train`; defaults to `<stem>.labels.json`.
    pub train_labels: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub format: Format,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            train_labels: None,
            test_labels: None,
            format: Format::Binary,
            out: PathBuf::from("coda-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub ipc: usize,
    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub preprocess: Preprocess,
    pub gamma: f64,
    pub pis: usize,
    pub steps: usize,
    pub cfg_scale: f64,
    pub schedule: ScheduleKind,
    /// Mixture components per class in the score model.
    pub score_components: usize,
    pub proxy: ProxyKind,
    pub seed: u64,
    pub benchmark: BenchmarkSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            ipc: 10,
            min_cluster_size: 10,
            min_samples: 3,
            preprocess: Preprocess::None,
            gamma: diffusion::DEFAULT_GAMMA,
            pis: diffusion::DEFAULT_PIS,
            steps: diffusion::DEFAULT_STEPS,
            cfg_scale: diffusion::DEFAULT_CFG_SCALE,
            schedule: ScheduleKind::LinearBeta,
            score_components: 5,
            proxy: ProxyKind::NearestCentroid,
            seed: 0,
            benchmark: BenchmarkSpec::standard(0),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            gamma: self.gamma,
            pis: self.pis,
            cfg_scale: self.cfg_scale,
            seed: self.seed,
        }
    }

    pub fn train_labels(&self) -> Option<PathBuf> {
        let train = self.paths.train.as_ref()?;
        Some(
            self.paths
                .train_labels
                .clone()
                .unwrap_or_else(|| crate::embedding::default_labels_path(train)),
        )
    }

    pub fn test_labels(&self) -> Option<PathBuf> {
        let test = self.paths.test.as_ref()?;
        Some(
            self.paths
                .test_labels
                .clone()
                .unwrap_or_else(|| crate::embedding::default_labels_path(test)),
        )
    }

    /// Checks ranges and that every referenced input exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.ipc == 0 {
            return bad("ipc must be at least 1".into());
        }
        if self.min_cluster_size < 2 {
            return bad(format!("min_cluster_size = {} (need ≥ 2)", self.min_cluster_size));
        }
        if self.min_samples == 0 {
            return bad("min_samples must be at least 1".into());
        }
        if let Preprocess::Pca { dim: 0 } = self.preprocess {
            return bad("pca dim must be at least 1".into());
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.score_components == 0 {
            return bad("score_components must be at least 1".into());
        }
        if let ProxyKind::Knn { k: 0 } = self.proxy {
            return bad("knn k must be at least 1".into());
        }
        self.guidance()
            .validate(self.steps)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for p in [
            self.paths.train.clone(),
            self.paths.test.clone(),
            self.train_labels(),
            self.test_labels(),
        ]
        .into_iter()
        .flatten()
        {
            if !p.is_file() {
                return bad(format!("{} does not exist", p.display()));
            }
        }
        if self.paths.test.is_some() && self.paths.train.is_none() {
            return bad("a test set needs a train set".into());
        }
        if self.paths.train.is_none() {
            self.benchmark
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }
}

//! Run configuration, stage manifests and output-directory locking.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::contrastive::EncoderTrainConfig;
use crate::datagen::GenConfig;
use crate::envs::{EnvConfig, Family};
use crate::eval::{MetricConfig, QualityBucket};
use crate::iql::IqlConfig;

pub const LOCK_FILE: &str = ".hsomrl.lock";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("output directory {0} is locked by another run (remove {LOCK_FILE} if stale)")]
    Locked(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// `low`, `medium`, `high` or a bucket index.
    pub bucket: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            bucket: "low".into(),
        }
    }
}

/// Everything a pipeline stage needs; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub family: String,
    pub seed: u64,
    pub train_tasks: usize,
    pub test_tasks: usize,
    pub out_dir: PathBuf,
    pub env: EnvConfig,
    pub data: GenConfig,
    pub encoder: EncoderTrainConfig,
    pub iql: IqlConfig,
    pub eval: EvalConfig,
    pub metrics: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            family: Family::PointRobotGoal.name().into(),
            seed: 0,
            train_tasks: 10,
            test_tasks: 5,
            out_dir: PathBuf::from("run"),
            env: EnvConfig::default(),
            data: GenConfig::default(),
            encoder: EncoderTrainConfig::default(),
            iql: IqlConfig::default(),
            eval: EvalConfig::default(),
            metrics: MetricConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn family(&self) -> Result<Family, ConfigError> {
        self.family.parse().map_err(|e: crate::envs::EnvError| ConfigError::Invalid(e.to_string()))
    }

    pub fn bucket(&self) -> Result<QualityBucket, ConfigError> {
        self.eval.bucket.parse().map_err(|e: crate::eval::EvalError| ConfigError::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.family()?;
        self.bucket()?;
        if self.train_tasks == 0 || self.test_tasks == 0 {
            return invalid("train_tasks and test_tasks must be at least 1".into());
        }
        if self.data.n_per_level == 0 || self.data.levels == 0 {
            return invalid("data.n_per_level and data.levels must be at least 1".into());
        }
        let e = &self.env;
        if e.horizon == 0 || !(e.dt > 0.0) || !(0.0..=1.0).contains(&e.drag) || !(e.speed_range.0 <= e.speed_range.1) || !(e.start_jitter >= 0.0) {
            return invalid("env: horizon ≥ 1, dt > 0, drag in [0, 1], ordered speed_range, start_jitter ≥ 0".into());
        }
        self.encoder.loss.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.encoder.learning_rate > 0.0) || self.encoder.hidden_width == Some(0) {
            return invalid("encoder.learning_rate must be > 0 and hidden_width ≥ 1".into());
        }
        self.iql.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.iql.learning_rate > 0.0) || self.iql.hidden.contains(&0) {
            return invalid("iql.learning_rate must be > 0 and hidden widths ≥ 1".into());
        }
        self.metrics.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval.episodes == 0 {
            return invalid("eval.episodes must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, ConfigError> {
        let bytes = fs::read(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Running,
    Complete,
}

/// Provenance record of one stage, written before the stage produces output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub status: StageStatus,
    pub tool_version: String,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl RunManifest {
    pub fn file_name(stage: &str) -> String {
        format!("{stage}.manifest.json")
    }

    /// Writes a `running` manifest for `stage` into `dir`.
    pub fn begin(dir: &Path, stage: &str, config: &RunConfig, inputs: &[&Path]) -> Result<Self, ConfigError> {
        let inputs = inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_, _>>()?;
        let m = Self {
            stage: stage.into(),
            status: StageStatus::Running,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            inputs,
            outputs: Vec::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
        };
        m.write(dir)?;
        Ok(m)
    }

    /// Records output checksums and marks the stage complete.
    pub fn finish(mut self, dir: &Path, outputs: &[&Path]) -> Result<Self, ConfigError> {
        self.outputs = outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_, _>>()?;
        self.status = StageStatus::Complete;
        self.finished_unix_ms = Some(now_ms());
        self.write(dir)?;
        Ok(self)
    }

    fn write(&self, dir: &Path) -> Result<(), ConfigError> {
        let path = dir.join(Self::file_name(&self.stage));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(dir: &Path, stage: &str) -> Result<Self, ConfigError> {
        let path = dir.join(Self::file_name(stage));
        let text = fs::read_to_string(&path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
    }
}

/// Exclusive lock on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, ConfigError> {
        fs::create_dir_all(dir).map_err(|source| ConfigError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(ConfigError::Locked(dir.display().to_string())),
            Err(source) => Err(ConfigError::Io {
                path: path.display().to_string(),
                source,
            }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

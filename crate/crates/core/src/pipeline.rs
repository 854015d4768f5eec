//! File-coupled pipeline stages: each stage reads its inputs from disk and
//! writes its outputs plus a stage manifest into the run directory.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, CheckpointHeader};
use crate::config::{ConfigError, DirLock, RunConfig, RunManifest};
use crate::contrastive::{augment, loss_history_csv, train_encoder, ContrastiveError, LossVariant};
use crate::datagen::{task_seed, DataError, OfflineDataset, MANIFEST_FILE};
use crate::diffcore::Matrix;
use crate::encoder::EncoderParams;
use crate::envs::{EnvError, Family};
use crate::eval::{
    alignment, embed_dataset, embed_segments_table, evaluate_dataset, select_trajectories, separability, uniformity,
    EmbeddingTable, EvalError, EvalReport, QualityBucket,
};
use crate::iql::{iql_history_csv, train_policy, IqlError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing input: {what} at {path}")]
    MissingInput { what: &'static str, path: PathBuf },
    #[error("encoder was trained on {encoder} but the dataset is {dataset}")]
    FamilyMismatch { encoder: Family, dataset: Family },
    #[error("policy expects a {policy}-dim context but the encoder produces {encoder}")]
    ContextMismatch { policy: usize, encoder: usize },
    #[error("policy was trained with a different encoder checkpoint")]
    EncoderIdentity,
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Iql(#[from] IqlError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, bytes).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// File layout of one run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self, split: Split) -> PathBuf {
        self.root.join("data").join(split.name())
    }

    fn tag(variant: LossVariant, seed: u64) -> String {
        format!("{variant}_s{seed}")
    }

    pub fn encoder(&self, variant: LossVariant, seed: u64) -> PathBuf {
        self.root.join(format!("encoder_{}.ckpt", Self::tag(variant, seed)))
    }

    pub fn encoder_loss(&self, variant: LossVariant, seed: u64) -> PathBuf {
        self.root.join(format!("encoder_{}_loss.csv", Self::tag(variant, seed)))
    }

    pub fn policy(&self, variant: LossVariant, seed: u64) -> PathBuf {
        self.root.join(format!("policy_{}.ckpt", Self::tag(variant, seed)))
    }

    pub fn policy_loss(&self, variant: LossVariant, seed: u64) -> PathBuf {
        self.root.join(format!("policy_{}_loss.csv", Self::tag(variant, seed)))
    }

    pub fn report(&self, variant: LossVariant, bucket: QualityBucket, seed: u64) -> PathBuf {
        self.root.join(format!("eval_{}_b{bucket}.json", Self::tag(variant, seed)))
    }
}

fn require(path: &Path, what: &'static str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingInput {
            what,
            path: path.to_path_buf(),
        })
    }
}

fn load_dataset(dir: &Path) -> Result<OfflineDataset, PipelineError> {
    require(&dir.join(MANIFEST_FILE), "dataset")?;
    Ok(OfflineDataset::load(dir)?)
}

/// Train and test datasets of a run, generated from disjoint task sets.
pub fn build_datasets(cfg: &RunConfig) -> Result<(OfflineDataset, OfflineDataset), PipelineError> {
    let family = cfg.family()?;
    let (train, test) = cfg.env.sample_tasks(family, cfg.train_tasks, cfg.test_tasks, cfg.seed)?;
    let train = OfflineDataset::build(&cfg.env, &cfg.data, &train, task_seed(cfg.seed, 1 << 20))?;
    let test = OfflineDataset::build(&cfg.env, &cfg.data, &test, task_seed(cfg.seed, 1 << 21))?;
    Ok((train, test))
}

/// Generates and writes both datasets; returns their directories.
pub fn gen_data(cfg: &RunConfig, layout: &RunLayout) -> Result<(PathBuf, PathBuf), PipelineError> {
    cfg.validate()?;
    let _lock = DirLock::acquire(&layout.root)?;
    let manifest = RunManifest::begin(&layout.root, "gen-data", cfg, &[])?;
    let (train, test) = build_datasets(cfg)?;
    let (train_dir, test_dir) = (layout.dataset(Split::Train), layout.dataset(Split::Test));
    train.save(&train_dir)?;
    test.save(&test_dir)?;
    manifest.finish(&layout.root, &[&train_dir.join(MANIFEST_FILE), &test_dir.join(MANIFEST_FILE)])?;
    Ok((train_dir, test_dir))
}

/// Trains the context encoder on the train split; returns the checkpoint path.
pub fn train_encoder_stage(cfg: &RunConfig, layout: &RunLayout) -> Result<PathBuf, PipelineError> {
    cfg.validate()?;
    let data_dir = layout.dataset(Split::Train);
    let dataset = load_dataset(&data_dir)?;
    let _lock = DirLock::acquire(&layout.root)?;
    let variant = cfg.encoder.loss.variant;
    let stage = format!("train-encoder_{variant}_s{}", cfg.seed);
    let manifest = RunManifest::begin(&layout.root, &stage, cfg, &[&data_dir.join(MANIFEST_FILE)])?;
    let (params, history) = train_encoder(&dataset, &cfg.encoder, cfg.seed)?;
    let (ckpt, csv) = (layout.encoder(variant, cfg.seed), layout.encoder_loss(variant, cfg.seed));
    checkpoint::save_encoder(&ckpt, &params, dataset.family, cfg.seed, variant)?;
    write(&csv, loss_history_csv(variant, &history))?;
    manifest.finish(&layout.root, &[&ckpt, &csv])?;
    Ok(ckpt)
}

fn load_encoder(path: &Path) -> Result<(CheckpointHeader, EncoderParams), PipelineError> {
    require(path, "encoder checkpoint")?;
    Ok(checkpoint::load_encoder(path)?)
}

/// Trains the IQL agent on the train split with a frozen encoder.
pub fn train_policy_stage(cfg: &RunConfig, layout: &RunLayout, encoder_path: &Path) -> Result<PathBuf, PipelineError> {
    cfg.validate()?;
    let data_dir = layout.dataset(Split::Train);
    let dataset = load_dataset(&data_dir)?;
    let (header, encoder) = load_encoder(encoder_path)?;
    if header.family != dataset.family {
        return Err(PipelineError::FamilyMismatch {
            encoder: header.family,
            dataset: dataset.family,
        });
    }
    let variant = header.variant.unwrap_or(cfg.encoder.loss.variant);
    let _lock = DirLock::acquire(&layout.root)?;
    let stage = format!("train-policy_{variant}_s{}", cfg.seed);
    let manifest = RunManifest::begin(&layout.root, &stage, cfg, &[&data_dir.join(MANIFEST_FILE), encoder_path])?;
    let (params, history) = train_policy(&dataset, &encoder, &cfg.iql, cfg.seed)?;
    let (ckpt, csv) = (layout.policy(variant, cfg.seed), layout.policy_loss(variant, cfg.seed));
    checkpoint::save_policy(&ckpt, &params, &cfg.iql.hidden, &header, cfg.seed)?;
    write(&csv, iql_history_csv(&history))?;
    manifest.finish(&layout.root, &[&ckpt, &csv])?;
    Ok(ckpt)
}

/// Evaluates a policy on the test split with contexts from `bucket`.
pub fn eval_stage(
    cfg: &RunConfig,
    layout: &RunLayout,
    encoder_path: &Path,
    policy_path: &Path,
    bucket: QualityBucket,
) -> Result<(PathBuf, EvalReport), PipelineError> {
    cfg.validate()?;
    let data_dir = layout.dataset(Split::Test);
    let dataset = load_dataset(&data_dir)?;
    let (enc_header, encoder) = load_encoder(encoder_path)?;
    require(policy_path, "policy checkpoint")?;
    let (pol_header, policy) = checkpoint::load_policy(policy_path)?;
    if enc_header.family != dataset.family {
        return Err(PipelineError::FamilyMismatch {
            encoder: enc_header.family,
            dataset: dataset.family,
        });
    }
    if policy.dims.context != encoder.dims.embed_dim {
        return Err(PipelineError::ContextMismatch {
            policy: policy.dims.context,
            encoder: encoder.dims.embed_dim,
        });
    }
    if pol_header.policy.as_ref().map(|m| &m.encoder_sha256) != Some(&enc_header.payload_sha256) {
        return Err(PipelineError::EncoderIdentity);
    }
    let variant = enc_header.variant.unwrap_or(cfg.encoder.loss.variant);
    let _lock = DirLock::acquire(&layout.root)?;
    let stage = format!("eval_{variant}_s{}_b{bucket}", cfg.seed);
    let manifest = RunManifest::begin(&layout.root, &stage, cfg, &[&data_dir.join(MANIFEST_FILE), encoder_path, policy_path])?;
    let per_task = evaluate_dataset(&policy, &encoder, &dataset, bucket, cfg.eval.episodes, cfg.seed)?;
    let report = EvalReport::new(
        variant.to_string(),
        vec![cfg.seed],
        cfg.eval.episodes,
        vec![enc_header.payload_sha256.clone(), pol_header.payload_sha256.clone()],
        per_task,
    );
    let path = layout.report(variant, bucket, cfg.seed);
    write(&path, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    manifest.finish(&layout.root, &[&path])?;
    Ok((path, report))
}

/// Embeds a dataset split. With `views >= 2` every trajectory contributes two
/// adjacent rows from independent random crops, so alignment can be measured.
pub fn embedding_table(
    encoder: &EncoderParams,
    dataset: &OfflineDataset,
    bucket: Option<QualityBucket>,
    views: usize,
    segment: (usize, usize),
    seed: u64,
) -> Result<EmbeddingTable, PipelineError> {
    if views <= 1 {
        return Ok(embed_dataset(encoder, dataset, bucket)?);
    }
    let chosen = select_trajectories(dataset, bucket)?;
    let mut sources = Vec::with_capacity(2 * chosen.len());
    let mut segments = Vec::with_capacity(2 * chosen.len());
    for (i, t) in chosen.iter().enumerate() {
        let (a, b) = augment(t, segment.0.min(t.len()), segment.1, task_seed(seed, i))?;
        for seg in [a, b] {
            sources.push(*t);
            segments.push(seg.slice(&t.transitions));
        }
    }
    Ok(embed_segments_table(encoder, &sources, &segments)?)
}

pub fn export_embeddings_stage(
    cfg: &RunConfig,
    layout: &RunLayout,
    encoder_path: &Path,
    split: Split,
    bucket: Option<QualityBucket>,
    views: usize,
    out: &Path,
) -> Result<usize, PipelineError> {
    let dataset = load_dataset(&layout.dataset(split))?;
    let (_, encoder) = load_encoder(encoder_path)?;
    let seg = (cfg.encoder.loss.segment_min, cfg.encoder.loss.segment_max);
    let table = embedding_table(&encoder, &dataset, bucket, views, seg, cfg.seed)?;
    write(out, table.to_csv())?;
    Ok(table.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: usize,
    pub uniformity_temperature: f64,
    pub uniformity: f64,
    /// Mean squared distance over adjacent rows sharing one source trajectory.
    pub alignment: Option<f64>,
    pub alignment_pairs: usize,
    /// Silhouette of the rows grouped by task.
    pub separability: Option<f64>,
}

/// Metrics of an embedding table.
pub fn table_metrics(table: &EmbeddingTable, t: f64) -> Result<MetricsReport, PipelineError> {
    let u = uniformity(&table.z, t)?;
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut i = 0;
    while i + 1 < table.len() {
        let same = table.task_ids[i] == table.task_ids[i + 1]
            && table.quality_levels[i] == table.quality_levels[i + 1]
            && table.returns[i].to_bits() == table.returns[i + 1].to_bits();
        if same {
            left.push(table.z.row(i).to_vec());
            right.push(table.z.row(i + 1).to_vec());
            i += 2;
        } else {
            i += 1;
        }
    }
    let alignment = if left.is_empty() {
        None
    } else {
        let l = Matrix::from_rows(&left).map_err(|e| EvalError::Config(e.to_string()))?;
        let r = Matrix::from_rows(&right).map_err(|e| EvalError::Config(e.to_string()))?;
        Some(alignment(&l, &r)?)
    };
    Ok(MetricsReport {
        rows: table.len(),
        uniformity_temperature: t,
        uniformity: u,
        alignment,
        alignment_pairs: left.len(),
        separability: separability(&table.z, &table.task_ids).ok(),
    })
}

pub fn metrics_stage(cfg: &RunConfig, embeddings: &Path, out: &Path) -> Result<MetricsReport, PipelineError> {
    cfg.metrics.validate()?;
    require(embeddings, "embeddings CSV")?;
    let text = fs::read_to_string(embeddings).map_err(|source| PipelineError::Io {
        path: embeddings.display().to_string(),
        source,
    })?;
    let table = EmbeddingTable::from_csv(&text)?;
    let report = table_metrics(&table, cfg.metrics.uniformity_temperature)?;
    write(out, serde_json::to_string_pretty(&report).expect("metrics serialize") + "\n")?;
    Ok(report)
}

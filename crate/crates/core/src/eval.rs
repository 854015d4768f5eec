//! Quality-bucketed policy evaluation, embedding metrics and exports.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{bucket_indices, task_seed, DataError, OfflineDataset, Trajectory};
use crate::diffcore::Matrix;
use crate::encoder::{EncoderError, EncoderParams};
use crate::envs::{episode_return, EnvConfig, EnvError, TaskSpec, Transition};
use crate::iql::{IqlError, IqlParams};

/// Number of return-ranked buckets used by the evaluation protocol.
pub const QUALITY_BUCKETS: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("context bucket {bucket} of task {task_id} is empty")]
    EmptyBucket { task_id: usize, bucket: usize },
    #[error("bucket {bucket} out of range for {n_buckets} buckets")]
    BucketOutOfRange { bucket: usize, n_buckets: usize },
    #[error("invalid bucket `{0}`; expected low, medium, high or an integer")]
    BadBucket(String),
    #[error("need at least {min} embeddings, got {got}")]
    TooFewEmbeddings { min: usize, got: usize },
    #[error("paired embedding sets differ in shape: {left:?} vs {right:?}")]
    PairShape { left: (usize, usize), right: (usize, usize) },
    #[error("label count {labels} does not match {rows} embeddings")]
    LabelCount { labels: usize, rows: usize },
    #[error("silhouette needs at least two labels with two samples each: {0}")]
    DegenerateLabels(String),
    #[error("invalid metric config: {0}")]
    Config(String),
    #[error("zero-length embedding row {0}")]
    ZeroRow(usize),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Iql(#[from] IqlError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Return-ranked bucket index; 0 holds the lowest returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityBucket(pub usize);

impl QualityBucket {
    pub const LOW: Self = Self(0);
    pub const MEDIUM: Self = Self(1);
    pub const HIGH: Self = Self(QUALITY_BUCKETS - 1);

    pub fn checked(self, n_buckets: usize) -> Result<usize, EvalError> {
        if self.0 < n_buckets {
            Ok(self.0)
        } else {
            Err(EvalError::BucketOutOfRange {
                bucket: self.0,
                n_buckets,
            })
        }
    }
}

impl FromStr for QualityBucket {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(Self::LOW),
            "medium" => Ok(Self::MEDIUM),
            "high" => Ok(Self::HIGH),
            other => other
                .parse::<usize>()
                .map_err(|_| EvalError::BadBucket(s.to_string()))
                .and_then(|b| Self(b).checked(QUALITY_BUCKETS).map(Self)),
        }
    }
}

impl fmt::Display for QualityBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A policy conditioned on a task embedding.
pub trait ContextPolicy: Sync {
    fn act(&self, obs: &[f64], z: &[f64]) -> Result<Vec<f64>, EvalError>;
}

impl ContextPolicy for IqlParams {
    fn act(&self, obs: &[f64], z: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(IqlParams::act(self, obs, z)?)
    }
}

/// Mean undiscounted return over `n_episodes`, each conditioned on one context
/// trajectory drawn from `bucket`.
pub fn evaluate_policy<P: ContextPolicy + ?Sized>(
    policy: &P,
    encoder: &EncoderParams,
    bucket: &[Trajectory],
    env: &EnvConfig,
    task: &TaskSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if bucket.is_empty() || n_episodes == 0 {
        return Err(EvalError::EmptyBucket {
            task_id: task.task_id,
            bucket: usize::MAX,
        });
    }
    let returns = (0..n_episodes)
        .into_par_iter()
        .map(|episode| {
            let episode_seed = task_seed(seed, episode);
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
            let context = &bucket[rng.gen_range(0..bucket.len())];
            let z = encoder.embed_segments(&[&context.transitions])?;
            let z = z.row(0);
            let mut failure = None;
            let traj = env.rollout(task, rng.gen(), |state| {
                match policy.act(&state.observation, z) {
                    Ok(a) => a,
                    Err(e) => {
                        failure.get_or_insert(e);
                        vec![0.0; task.family.action_dim()]
                    }
                }
            })?;
            match failure {
                Some(e) => Err(e),
                None => Ok(episode_return(&traj)),
            }
        })
        .collect::<Result<Vec<f64>, EvalError>>()?;
    Ok(returns.iter().sum::<f64>() / n_episodes as f64)
}

/// Mean return of the uniform-random policy over `n` rollouts.
pub fn random_policy_return(env: &EnvConfig, task: &TaskSpec, n: usize, seed: u64) -> Result<f64, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = task.family.action_dim();
    let mut total = 0.0;
    for _ in 0..n {
        let reset_seed = rng.gen();
        let traj = env.rollout(task, reset_seed, |_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        total += episode_return(&traj);
    }
    Ok(total / n as f64)
}

/// The trajectories of one buffer falling in return bucket `bucket`.
pub fn bucket_contexts(buffer: &[Trajectory], bucket: QualityBucket, n_buckets: usize) -> Result<Vec<Trajectory>, EvalError> {
    let b = bucket.checked(n_buckets)?;
    let groups = bucket_indices(buffer, n_buckets)?;
    Ok(groups[b].iter().map(|&i| buffer[i].clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Temperature t of the uniformity metric.
    pub uniformity_temperature: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            uniformity_temperature: 2.0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.uniformity_temperature > 0.0 && self.uniformity_temperature.is_finite() {
            Ok(())
        } else {
            Err(EvalError::Config(format!(
                "uniformity_temperature must be > 0, got {}",
                self.uniformity_temperature
            )))
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// log of the mean of exp(-t‖z_i - z_j‖²) over distinct unordered pairs.
pub fn uniformity(embeddings: &Matrix, t: f64) -> Result<f64, EvalError> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(EvalError::TooFewEmbeddings { min: 2, got: n });
    }
    // log-sum-exp over pairs keeps tiny kernels from underflowing to log(0)
    let mut exps = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            exps.push(-t * sq_dist(embeddings.row(i), embeddings.row(j)));
        }
    }
    let m = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = exps.iter().map(|e| (e - m).exp()).sum();
    Ok(m + (s / exps.len() as f64).ln())
}

/// Mean squared distance between row-aligned views.
pub fn alignment(view1: &Matrix, view2: &Matrix) -> Result<f64, EvalError> {
    if view1.shape() != view2.shape() {
        return Err(EvalError::PairShape {
            left: view1.shape(),
            right: view2.shape(),
        });
    }
    let n = view1.rows();
    if n == 0 {
        return Err(EvalError::TooFewEmbeddings { min: 1, got: 0 });
    }
    Ok((0..n).map(|i| sq_dist(view1.row(i), view2.row(i))).sum::<f64>() / n as f64)
}

/// Mean silhouette coefficient under cosine distance.
pub fn separability(embeddings: &Matrix, labels: &[usize]) -> Result<f64, EvalError> {
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(EvalError::LabelCount { labels: labels.len(), rows: n });
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(EvalError::DegenerateLabels(format!("{} distinct label(s)", classes.len())));
    }
    for &c in &classes {
        let count = labels.iter().filter(|&&l| l == c).count();
        if count < 2 {
            return Err(EvalError::DegenerateLabels(format!("label {c} has {count} sample")));
        }
    }
    let mut unit = Vec::with_capacity(n);
    for i in 0..n {
        let row = embeddings.row(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EvalError::ZeroRow(i));
        }
        unit.push(row.iter().map(|x| x / norm).collect::<Vec<_>>());
    }
    let dist = |i: usize, j: usize| 1.0 - unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        for j in 0..n {
            if j != i {
                let k = classes.binary_search(&labels[j]).unwrap_or(0);
                sums[k] += dist(i, j);
                counts[k] += 1;
            }
        }
        let own = classes.binary_search(&labels[i]).unwrap_or(0);
        let a = sums[own] / counts[own] as f64;
        let b = (0..classes.len())
            .filter(|&k| k != own)
            .map(|k| sums[k] / counts[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
    }
    Ok(total / n as f64)
}

/// Encoded contexts of a dataset: rows of `z` with their source metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub task_ids: Vec<usize>,
    pub quality_levels: Vec<usize>,
    pub returns: Vec<f64>,
    pub z: Matrix,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }

    /// CSV with columns `task_id,quality_level,return,z_0..`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,quality_level,return");
        for k in 0..self.z.cols() {
            out.push_str(&format!(",z_{k}"));
        }
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&format!("{},{},{:?}", self.task_ids[i], self.quality_levels[i], self.returns[i]));
            for v in self.z.row(i) {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let bad = |m: String| EvalError::Config(format!("embedding CSV: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[..3] != ["task_id", "quality_level", "return"] {
            return Err(bad(format!("unexpected header `{header}`")));
        }
        let dim = cols.len() - 3;
        let mut table = Self {
            task_ids: Vec::new(),
            quality_levels: Vec::new(),
            returns: Vec::new(),
            z: Matrix::zeros(0, dim),
        };
        let mut data = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(bad(format!("line {} has {} fields, expected {}", n + 2, fields.len(), cols.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("line {}: bad number `{s}`", n + 2)));
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("line {}: bad integer `{s}`", n + 2)));
            table.task_ids.push(int(fields[0])?);
            table.quality_levels.push(int(fields[1])?);
            table.returns.push(num(fields[2])?);
            for f in &fields[3..] {
                data.push(num(f)?);
            }
        }
        table.z = Matrix::new(table.task_ids.len(), dim, data).map_err(|e| bad(e.to_string()))?;
        Ok(table)
    }
}

/// Every trajectory of `dataset`, or only those in `bucket` of each task, in task order.
pub fn select_trajectories(dataset: &OfflineDataset, bucket: Option<QualityBucket>) -> Result<Vec<&Trajectory>, EvalError> {
    let mut chosen = Vec::new();
    for buf in &dataset.buffers {
        match bucket {
            None => chosen.extend(buf.iter()),
            Some(b) => {
                let b = b.checked(QUALITY_BUCKETS)?;
                let groups = bucket_indices(buf, QUALITY_BUCKETS)?;
                chosen.extend(groups[b].iter().map(|&i| &buf[i]));
            }
        }
    }
    Ok(chosen)
}

/// Embeds `segments`, one row each, labelled by their source trajectories.
pub fn embed_segments_table(
    encoder: &EncoderParams,
    sources: &[&Trajectory],
    segments: &[&[Transition]],
) -> Result<EmbeddingTable, EvalError> {
    let z = if segments.is_empty() {
        Matrix::zeros(0, encoder.dims.embed_dim)
    } else {
        encoder.embed_segments(segments)?
    };
    Ok(EmbeddingTable {
        task_ids: sources.iter().map(|t| t.task_id).collect(),
        quality_levels: sources.iter().map(|t| t.quality_level).collect(),
        returns: sources.iter().map(|t| t.return_).collect(),
        z,
    })
}

/// Embeds the selected trajectories using each whole trajectory as context.
pub fn embed_dataset(
    encoder: &EncoderParams,
    dataset: &OfflineDataset,
    bucket: Option<QualityBucket>,
) -> Result<EmbeddingTable, EvalError> {
    let chosen = select_trajectories(dataset, bucket)?;
    let segments: Vec<&[Transition]> = chosen.iter().map(|t| t.transitions.as_slice()).collect();
    embed_segments_table(encoder, &chosen, &segments)
}

/// Writes the embedding CSV for `dataset` to `path` and returns the row count.
pub fn export_embeddings(
    encoder: &EncoderParams,
    dataset: &OfflineDataset,
    bucket: Option<QualityBucket>,
    path: &Path,
) -> Result<usize, EvalError> {
    let table = embed_dataset(encoder, dataset, bucket)?;
    fs::write(path, table.to_csv()).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(table.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: usize,
    pub bucket: usize,
    pub seed: u64,
    pub mean_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub checkpoints: Vec<String>,
    pub per_task: Vec<TaskResult>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn new(variant: String, seeds: Vec<u64>, episodes: usize, checkpoints: Vec<String>, per_task: Vec<TaskResult>) -> Self {
        let returns: Vec<f64> = per_task.iter().map(|r| r.mean_return).collect();
        Self {
            variant,
            seeds,
            episodes,
            checkpoints,
            aggregate: Aggregate::of(&returns),
            per_task,
        }
    }

    /// True when `aggregate` matches a recomputation from `per_task`.
    pub fn is_consistent(&self) -> bool {
        let returns: Vec<f64> = self.per_task.iter().map(|r| r.mean_return).collect();
        let again = Aggregate::of(&returns);
        (again.mean - self.aggregate.mean).abs() <= 1e-9 * again.mean.abs().max(1.0)
            && (again.std - self.aggregate.std).abs() <= 1e-9 * again.std.abs().max(1.0)
    }
}

/// Evaluates `policy` on every task of `dataset` with contexts from `bucket`.
pub fn evaluate_dataset<P: ContextPolicy + ?Sized>(
    policy: &P,
    encoder: &EncoderParams,
    dataset: &OfflineDataset,
    bucket: QualityBucket,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<TaskResult>, EvalError> {
    let b = bucket.checked(QUALITY_BUCKETS)?;
    let mut out = Vec::with_capacity(dataset.num_tasks());
    for (task, buf) in dataset.tasks.iter().zip(&dataset.buffers) {
        let contexts = bucket_contexts(buf, bucket, QUALITY_BUCKETS)?;
        if contexts.is_empty() {
            return Err(EvalError::EmptyBucket { task_id: task.task_id, bucket: b });
        }
        let mean_return = evaluate_policy(policy, encoder, &contexts, &dataset.env, task, n_episodes, task_seed(seed, task.task_id))?;
        out.push(TaskResult {
            task_id: task.task_id,
            bucket: b,
            seed,
            mean_return,
        });
    }
    Ok(out)
}

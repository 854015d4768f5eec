//! Quality-stratified offline datasets and their on-disk format.
//!
//! Each task buffer mixes trajectories from ten behavior policies that blend
//! the analytic controller with uniform noise, so returns span a wide range.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::envs::{episode_return, EnvConfig, EnvError, Family, TaskSpec, Transition};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing manifest at {0}")]
    MissingManifest(PathBuf),
    #[error("{path}:{line}: malformed record: {msg}")]
    Json { path: PathBuf, line: usize, msg: String },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("checksum mismatch for {file}: manifest {expected}, file {found}")]
    ChecksumMismatch {
        file: String,
        expected: String,
        found: String,
    },
    #[error("task {task_id}: manifest lists {expected} trajectories, file has {found}")]
    CountMismatch {
        task_id: usize,
        expected: usize,
        found: usize,
    },
    #[error("task {task_id}, trajectory {index}: s_next of step {step} does not match s of step {}", step + 1)]
    ChainViolation {
        task_id: usize,
        index: usize,
        step: usize,
    },
    #[error("task {task_id}, trajectory {index}: stored return {stored} != reward sum {recomputed}")]
    ReturnMismatch {
        task_id: usize,
        index: usize,
        stored: f64,
        recomputed: f64,
    },
    #[error("cannot bucket an empty buffer")]
    EmptyBuffer,
    #[error("buffer of {len} trajectories cannot fill {buckets} buckets")]
    TooFewForBuckets { len: usize, buckets: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: usize,
    pub quality_level: usize,
    #[serde(rename = "return")]
    pub return_: f64,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn new(task_id: usize, quality_level: usize, transitions: Vec<Transition>) -> Self {
        Self {
            task_id,
            quality_level,
            return_: episode_return(&transitions),
            transitions,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// First step whose `s_next` differs from the following `s`, if any.
    pub fn chain_break(&self) -> Option<usize> {
        self.transitions
            .windows(2)
            .position(|w| w[0].s_next != w[1].s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_per_level: usize,
    pub levels: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_per_level: 50,
            levels: 10,
        }
    }
}

impl GenConfig {
    pub fn per_task(&self) -> usize {
        self.n_per_level * self.levels
    }
}

/// Noise weight of level `level` out of `levels`: 0 is the pure controller, the last is pure noise.
pub fn noise_weight(level: usize, levels: usize) -> f64 {
    if levels <= 1 {
        0.0
    } else {
        level as f64 / (levels - 1) as f64
    }
}

/// Rolls out `levels × n_per_level` trajectories, ordered by level then index.
pub fn generate(
    env: &EnvConfig,
    task: &TaskSpec,
    n_per_level: usize,
    levels: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, DataError> {
    if n_per_level == 0 || levels == 0 {
        return Err(DataError::Schema(format!(
            "n_per_level and levels must be positive (got {n_per_level}, {levels})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = task.family.action_dim();
    let mut out = Vec::with_capacity(levels * n_per_level);
    for level in 0..levels {
        let eps = noise_weight(level, levels);
        for _ in 0..n_per_level {
            let reset_seed: u64 = rng.gen();
            let transitions = env.rollout(task, reset_seed, |state| {
                let opt = env.optimal_action(task, state);
                (0..dim)
                    .map(|i| {
                        let noise: f64 = rng.gen_range(-1.0..=1.0);
                        (1.0 - eps) * opt[i] + eps * noise
                    })
                    .collect()
            })?;
            out.push(Trajectory::new(task.task_id, level, transitions));
        }
    }
    Ok(out)
}

/// Index permutation sorting `buffer` ascending by return, ties kept in input order,
/// split into `n_buckets` contiguous groups with the remainder going to the lowest buckets.
pub fn bucket_indices(buffer: &[Trajectory], n_buckets: usize) -> Result<Vec<Vec<usize>>, DataError> {
    if buffer.is_empty() {
        return Err(DataError::EmptyBuffer);
    }
    if n_buckets == 0 || buffer.len() < n_buckets {
        return Err(DataError::TooFewForBuckets {
            len: buffer.len(),
            buckets: n_buckets,
        });
    }
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    order.sort_by(|&a, &b| buffer[a].return_.total_cmp(&buffer[b].return_));
    let base = buffer.len() / n_buckets;
    let rem = buffer.len() % n_buckets;
    let mut buckets = Vec::with_capacity(n_buckets);
    let mut start = 0;
    for k in 0..n_buckets {
        let size = base + usize::from(k < rem);
        buckets.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(buckets)
}

pub fn bucket_by_return(buffer: &[Trajectory], n_buckets: usize) -> Result<Vec<Vec<Trajectory>>, DataError> {
    Ok(bucket_indices(buffer, n_buckets)?
        .into_iter()
        .map(|idx| idx.into_iter().map(|i| buffer[i].clone()).collect())
        .collect())
}

/// Per-task trajectory buffers plus the generation settings that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub family: Family,
    pub env: EnvConfig,
    pub gen: GenConfig,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
    pub buffers: Vec<Vec<Trajectory>>,
}

/// Seed for one task's buffer, mixed so neighbouring ids get unrelated streams.
pub fn task_seed(seed: u64, task_id: usize) -> u64 {
    let mut z = seed ^ (task_id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl OfflineDataset {
    /// Generates every task buffer; results are merged in task order.
    pub fn build(env: &EnvConfig, gen: &GenConfig, tasks: &[TaskSpec], seed: u64) -> Result<Self, DataError> {
        let family = tasks
            .first()
            .map(|t| t.family)
            .ok_or_else(|| DataError::Schema("dataset needs at least one task".into()))?;
        for (i, t) in tasks.iter().enumerate() {
            if t.task_id != i {
                return Err(DataError::Schema(format!("task at position {i} has task_id {}", t.task_id)));
            }
            if t.family != family {
                return Err(EnvError::FamilyMismatch { task_id: i, family }.into());
            }
        }
        let buffers = tasks
            .par_iter()
            .map(|t| generate(env, t, gen.n_per_level, gen.levels, task_seed(seed, t.task_id)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            family,
            env: env.clone(),
            gen: gen.clone(),
            seed,
            tasks: tasks.to_vec(),
            buffers,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_trajectories(&self) -> usize {
        self.buffers.iter().map(Vec::len).sum()
    }

    /// Checks every structural invariant of the dataset.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.buffers.len() != self.tasks.len() {
            return Err(DataError::Schema(format!(
                "{} tasks but {} buffers",
                self.tasks.len(),
                self.buffers.len()
            )));
        }
        let size = self.buffers.first().map(Vec::len).unwrap_or(0);
        let (obs, act) = (self.family.obs_dim(), self.family.action_dim());
        for (task_id, buf) in self.buffers.iter().enumerate() {
            if self.tasks[task_id].task_id != task_id || self.tasks[task_id].family != self.family {
                return Err(DataError::Schema(format!("task entry {task_id} is inconsistent")));
            }
            if buf.len() != size {
                return Err(DataError::Schema(format!(
                    "buffer sizes differ: task 0 has {size}, task {task_id} has {}",
                    buf.len()
                )));
            }
            for (index, traj) in buf.iter().enumerate() {
                if traj.task_id != task_id {
                    return Err(DataError::Schema(format!(
                        "trajectory {index} in task {task_id} is labelled task {}",
                        traj.task_id
                    )));
                }
                if traj.len() != self.env.horizon {
                    return Err(DataError::Schema(format!(
                        "task {task_id}, trajectory {index}: length {} != horizon {}",
                        traj.len(),
                        self.env.horizon
                    )));
                }
                if traj.transitions.iter().any(|t| {
                    t.s.len() != obs || t.s_next.len() != obs || t.a.len() != act
                }) {
                    return Err(DataError::Schema(format!(
                        "task {task_id}, trajectory {index}: transition dimensions do not match {}",
                        self.family
                    )));
                }
                if let Some(step) = traj.chain_break() {
                    return Err(DataError::ChainViolation { task_id, index, step });
                }
                let recomputed = episode_return(&traj.transitions);
                if recomputed != traj.return_ {
                    return Err(DataError::ReturnMismatch {
                        task_id,
                        index,
                        stored: traj.return_,
                        recomputed,
                    });
                }
            }
        }
        Ok(())
    }

    /// Writes per-task JSONL files, then the manifest.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut files = Vec::with_capacity(self.tasks.len());
        for (task_id, buf) in self.buffers.iter().enumerate() {
            let name = task_file_name(task_id);
            let mut bytes = Vec::new();
            for traj in buf {
                serde_json::to_writer(&mut bytes, traj).map_err(|e| DataError::Schema(e.to_string()))?;
                bytes.push(b'\n');
            }
            let path = dir.join(&name);
            fs::write(&path, &bytes).map_err(io_err(&path))?;
            files.push(ManifestFile {
                task_id,
                file: name,
                trajectories: buf.len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            family: self.family,
            horizon: self.env.horizon,
            dt: self.env.dt,
            env: self.env.clone(),
            generation: self.gen.clone(),
            seed: self.seed,
            tasks: self.tasks.clone(),
            files,
        };
        let path = dir.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Schema(e.to_string()))?;
        f.write_all(text.as_bytes()).map_err(io_err(&path))?;
        f.write_all(b"\n").map_err(io_err(&path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.is_file() {
            return Err(DataError::MissingManifest(mpath));
        }
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Json {
            path: mpath.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(DataError::Schema(format!(
                "unsupported format_version {}",
                manifest.format_version
            )));
        }
        if manifest.horizon != manifest.env.horizon || manifest.dt != manifest.env.dt {
            return Err(DataError::Schema("manifest horizon/dt disagree with env block".into()));
        }
        if manifest.files.len() != manifest.tasks.len() {
            return Err(DataError::Schema(format!(
                "{} tasks but {} files",
                manifest.tasks.len(),
                manifest.files.len()
            )));
        }
        let mut buffers = Vec::with_capacity(manifest.files.len());
        for (i, entry) in manifest.files.iter().enumerate() {
            if entry.task_id != i {
                return Err(DataError::Schema(format!("file entry {i} has task_id {}", entry.task_id)));
            }
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let found = hex::encode(Sha256::digest(&bytes));
            if found != entry.sha256 {
                return Err(DataError::ChecksumMismatch {
                    file: entry.file.clone(),
                    expected: entry.sha256.clone(),
                    found,
                });
            }
            let mut buf = Vec::new();
            for (line_no, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
                let line = line.map_err(io_err(&path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let traj: Trajectory = serde_json::from_str(&line).map_err(|e| DataError::Json {
                    path: path.clone(),
                    line: line_no + 1,
                    msg: e.to_string(),
                })?;
                buf.push(traj);
            }
            if buf.len() != entry.trajectories {
                return Err(DataError::CountMismatch {
                    task_id: i,
                    expected: entry.trajectories,
                    found: buf.len(),
                });
            }
            buffers.push(buf);
        }
        let ds = Self {
            family: manifest.family,
            env: manifest.env,
            gen: manifest.generation,
            seed: manifest.seed,
            tasks: manifest.tasks,
            buffers,
        };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn task_file_name(task_id: usize) -> String {
    format!("task_{task_id}.jsonl")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    family: Family,
    horizon: usize,
    dt: f64,
    env: EnvConfig,
    generation: GenConfig,
    seed: u64,
    tasks: Vec<TaskSpec>,
    files: Vec<ManifestFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    task_id: usize,
    file: String,
    trajectories: usize,
    sha256: String,
}

//! Supervised contrastive objectives with hardness-weighted positives and negatives.
//!
//! All four variants share one form. For anchor q with positive set P and
//! negative set N (every other sample in both views, split by task label):
//!
//! ```text
//! loss_q = -1/|P| Σ_p [ log(m_p) + s_qp - log(Σ_a c_a exp(s_qa)) ],   s = w_q·w_a / β
//! ```
//!
//! | variant | m_p              | c_a (a ∈ P)      | c_a (a ∈ N)      |
//! |---------|------------------|------------------|------------------|
//! | SCL     | 1                | 1                | 1                |
//! | HG      | 1                | 1                | |N|·ω^neg_a      |
//! | HP      | |P|·ω^pos_p      | |P|·ω^pos_a      | 1                |
//! | HP+HG   | |P|·ω^pos_p      | |P|·ω^pos_a      | |N|·ω^neg_a      |
//!
//! The |P| and |N| factors make uniform weights reduce every variant to SCL.
//! Hardness weights come from untempered dot products of the projections and
//! enter the graph as constants, so no gradient flows through them.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{OfflineDataset, Trajectory};
use crate::diffcore::{softmax_in_place, AdamState, DiffError, Matrix, NodeId, ValueGraph};
use crate::encoder::{EncoderDims, EncoderError, EncoderParams};
use crate::envs::Transition;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContrastiveError {
    #[error("anchor {anchor} (task {label}) has no positive samples")]
    NoPositives { anchor: usize, label: usize },
    #[error("anchor {anchor} (task {label}) has no negative samples")]
    NoNegatives { anchor: usize, label: usize },
    #[error("hardness weights need at least one sample")]
    EmptyHardnessSet,
    #[error("{embeddings} embeddings but {labels} labels")]
    LabelCount { embeddings: usize, labels: usize },
    #[error("trajectory of length {len} is shorter than the minimum segment length {min}")]
    TooShort { len: usize, min: usize },
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("dataset needs at least 2 tasks for contrastive training, found {0}")]
    TooFewTasks(usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Scl,
    Hg,
    Hp,
    Hphg,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [LossVariant::Scl, LossVariant::Hg, LossVariant::Hp, LossVariant::Hphg];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Scl => "scl",
            LossVariant::Hg => "hg",
            LossVariant::Hp => "hp",
            LossVariant::Hphg => "hphg",
        }
    }

    fn weights_positives(self) -> bool {
        matches!(self, LossVariant::Hp | LossVariant::Hphg)
    }

    fn weights_negatives(self) -> bool {
        matches!(self, LossVariant::Hg | LossVariant::Hphg)
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = ContrastiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['+', '-', '_'], "").as_str() {
            "scl" => Ok(LossVariant::Scl),
            "hg" => Ok(LossVariant::Hg),
            "hp" => Ok(LossVariant::Hp),
            "hphg" | "hghp" => Ok(LossVariant::Hphg),
            _ => Err(ContrastiveError::Config(format!(
                "unknown loss `{s}` (valid: scl, hg, hp, hphg)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// InfoNCE temperature β.
    pub temperature: f64,
    /// Source trajectories per batch; the loss sees twice as many samples.
    pub batch_size: usize,
    pub segment_min: usize,
    pub segment_max: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::Hphg,
            temperature: 0.1,
            batch_size: 256,
            segment_min: 20,
            segment_max: 60,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ContrastiveError::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.segment_min == 0 || self.segment_min > self.segment_max {
            return Err(ContrastiveError::Config(format!(
                "segment bounds [{}, {}] are invalid",
                self.segment_min, self.segment_max
            )));
        }
        if self.batch_size == 0 {
            return Err(ContrastiveError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_of(mut logits: Vec<f64>) -> Result<Vec<f64>, ContrastiveError> {
    if logits.is_empty() {
        return Err(ContrastiveError::EmptyHardnessSet);
    }
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// ω^neg: softmax of anchor·negative dot products. Closer negatives weigh more.
pub fn hardness_neg(anchor: &[f64], negatives: &[&[f64]]) -> Result<Vec<f64>, ContrastiveError> {
    softmax_of(negatives.iter().map(|n| dot(anchor, n)).collect())
}

/// ω^pos: softmax of negated anchor·positive dot products. Farther positives weigh more.
pub fn hardness_pos(anchor: &[f64], positives: &[&[f64]]) -> Result<Vec<f64>, ContrastiveError> {
    softmax_of(positives.iter().map(|p| -dot(anchor, p)).collect())
}

/// Constant per-batch coefficients of the shared loss form.
///
/// Computed once from the projections; the loss treats them as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients {
    /// c_qa, zero on the diagonal.
    pub denominator: Matrix,
    /// 1/|P_q| on positives, zero elsewhere.
    pub positive_mean: Matrix,
    /// Σ_q (1/|P_q|) Σ_p log m_qp
    pub log_numerator_weight: f64,
}

pub fn coefficients(w: &Matrix, labels: &[usize], variant: LossVariant) -> Result<Coefficients, ContrastiveError> {
    let n = w.rows();
    if labels.len() != n {
        return Err(ContrastiveError::LabelCount {
            embeddings: n,
            labels: labels.len(),
        });
    }
    let mut denominator = Matrix::zeros(n, n);
    let mut positive_mean = Matrix::zeros(n, n);
    let mut log_numerator_weight = 0.0;
    for q in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&a| a != q && labels[a] == labels[q]).collect();
        let neg: Vec<usize> = (0..n).filter(|&a| labels[a] != labels[q]).collect();
        if pos.is_empty() {
            return Err(ContrastiveError::NoPositives { anchor: q, label: labels[q] });
        }
        if neg.is_empty() {
            return Err(ContrastiveError::NoNegatives { anchor: q, label: labels[q] });
        }
        let anchor = w.row(q);
        let inv_p = 1.0 / pos.len() as f64;
        if variant.weights_positives() {
            let rows: Vec<&[f64]> = pos.iter().map(|&a| w.row(a)).collect();
            let omega = hardness_pos(anchor, &rows)?;
            let scale = pos.len() as f64;
            for (&a, om) in pos.iter().zip(&omega) {
                denominator.set(q, a, scale * om);
                log_numerator_weight += inv_p * (scale * om).ln();
            }
        } else {
            for &a in &pos {
                denominator.set(q, a, 1.0);
            }
        }
        if variant.weights_negatives() {
            let rows: Vec<&[f64]> = neg.iter().map(|&a| w.row(a)).collect();
            let omega = hardness_neg(anchor, &rows)?;
            let scale = neg.len() as f64;
            for (&a, om) in neg.iter().zip(&omega) {
                denominator.set(q, a, scale * om);
            }
        } else {
            for &a in &neg {
                denominator.set(q, a, 1.0);
            }
        }
        for &a in &pos {
            positive_mean.set(q, a, inv_p);
        }
    }
    Ok(Coefficients {
        denominator,
        positive_mean,
        log_numerator_weight,
    })
}

/// Records the batch-mean contrastive loss of projections `w` (one row per sample).
pub fn contrastive_loss_node(
    g: &mut ValueGraph,
    w: NodeId,
    labels: &[usize],
    variant: LossVariant,
    temperature: f64,
) -> Result<NodeId, ContrastiveError> {
    let coef = coefficients(g.value(w), labels, variant)?;
    weighted_loss_node(g, w, &coef, temperature)
}

/// The shared loss form with explicit coefficients.
pub fn weighted_loss_node(
    g: &mut ValueGraph,
    w: NodeId,
    coef: &Coefficients,
    temperature: f64,
) -> Result<NodeId, ContrastiveError> {
    if !(temperature > 0.0) {
        return Err(ContrastiveError::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let n = g.value(w).rows();
    if coef.denominator.shape() != (n, n) {
        return Err(ContrastiveError::LabelCount {
            embeddings: n,
            labels: coef.denominator.rows(),
        });
    }
    let wt = g.transpose(w)?;
    let sims = g.matmul(w, wt)?;
    let logits = g.scalar_mul(sims, 1.0 / temperature)?;
    let e = g.exp(logits)?;
    let c = g.constant(coef.denominator.clone());
    let weighted = g.elementwise_mul(e, c)?;
    let den = g.row_sum(weighted)?;
    let log_den = g.log(den)?;
    let den_term = g.sum(log_den)?;
    let pm = g.constant(coef.positive_mean.clone());
    let pos_logits = g.elementwise_mul(logits, pm)?;
    let pos_term = g.sum(pos_logits)?;
    let diff = g.sub(den_term, pos_term)?;
    let shifted = g.add_scalar(diff, -coef.log_numerator_weight)?;
    Ok(g.scalar_mul(shifted, 1.0 / n as f64)?)
}

/// Loss value for fixed projections.
pub fn contrastive_loss(
    w: &Matrix,
    labels: &[usize],
    variant: LossVariant,
    temperature: f64,
) -> Result<f64, ContrastiveError> {
    let mut g = ValueGraph::new();
    let wn = g.constant(w.clone());
    let l = contrastive_loss_node(&mut g, wn, labels, variant, temperature)?;
    Ok(g.value(l).item())
}

pub fn loss_scl(w: &Matrix, labels: &[usize], temperature: f64) -> Result<f64, ContrastiveError> {
    contrastive_loss(w, labels, LossVariant::Scl, temperature)
}

pub fn loss_hg(w: &Matrix, labels: &[usize], temperature: f64) -> Result<f64, ContrastiveError> {
    contrastive_loss(w, labels, LossVariant::Hg, temperature)
}

pub fn loss_hp(w: &Matrix, labels: &[usize], temperature: f64) -> Result<f64, ContrastiveError> {
    contrastive_loss(w, labels, LossVariant::Hp, temperature)
}

pub fn loss_hphg(w: &Matrix, labels: &[usize], temperature: f64) -> Result<f64, ContrastiveError> {
    contrastive_loss(w, labels, LossVariant::Hphg, temperature)
}

/// Contiguous slice `[start, start + len)` of one trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentRef {
    pub start: usize,
    pub len: usize,
}

impl SegmentRef {
    pub fn slice<'a>(&self, transitions: &'a [Transition]) -> &'a [Transition] {
        &transitions[self.start..self.start + self.len]
    }
}

/// Draws one random crop with length uniform in `[min_len, min(max_len, T)]`.
pub fn random_segment<R: Rng>(traj_len: usize, min_len: usize, max_len: usize, rng: &mut R) -> Result<SegmentRef, ContrastiveError> {
    if traj_len < min_len || min_len == 0 {
        return Err(ContrastiveError::TooShort { len: traj_len, min: min_len });
    }
    let hi = max_len.min(traj_len).max(min_len);
    let len = rng.gen_range(min_len..=hi);
    let start = rng.gen_range(0..=traj_len - len);
    Ok(SegmentRef { start, len })
}

/// Two independent crops of one trajectory (they may overlap).
pub fn augment(
    trajectory: &Trajectory,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<(SegmentRef, SegmentRef), ContrastiveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment_with(trajectory.len(), min_len, max_len, &mut rng)
}

fn augment_with<R: Rng>(len: usize, min_len: usize, max_len: usize, rng: &mut R) -> Result<(SegmentRef, SegmentRef), ContrastiveError> {
    Ok((
        random_segment(len, min_len, max_len, rng)?,
        random_segment(len, min_len, max_len, rng)?,
    ))
}

/// Two views of a batch of source trajectories, addressed by (task, index).
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub sources: Vec<(usize, usize)>,
    pub view1: Vec<SegmentRef>,
    pub view2: Vec<SegmentRef>,
    pub labels: Vec<usize>,
}

impl AugmentedBatch {
    /// Samples `batch_size` trajectories (task uniform, then trajectory uniform) and crops both views.
    pub fn sample<R: Rng>(dataset: &OfflineDataset, cfg: &LossConfig, rng: &mut R) -> Result<Self, ContrastiveError> {
        let k = dataset.num_tasks();
        if k < 2 {
            return Err(ContrastiveError::TooFewTasks(k));
        }
        loop {
            let mut batch = AugmentedBatch {
                sources: Vec::with_capacity(cfg.batch_size),
                view1: Vec::with_capacity(cfg.batch_size),
                view2: Vec::with_capacity(cfg.batch_size),
                labels: Vec::with_capacity(cfg.batch_size),
            };
            for _ in 0..cfg.batch_size {
                let task = rng.gen_range(0..k);
                let idx = rng.gen_range(0..dataset.buffers[task].len());
                let traj = &dataset.buffers[task][idx];
                let (a, b) = augment_with(traj.len(), cfg.segment_min, cfg.segment_max, rng)?;
                batch.sources.push((task, idx));
                batch.view1.push(a);
                batch.view2.push(b);
                batch.labels.push(traj.task_id);
            }
            if batch.labels.iter().any(|&l| l != batch.labels[0]) {
                return Ok(batch);
            }
        }
    }

    /// The collection D = [view 1; view 2] as transition slices.
    pub fn segments<'a>(&self, dataset: &'a OfflineDataset) -> Vec<&'a [Transition]> {
        let resolve = |(i, seg): (usize, &SegmentRef)| {
            let (task, idx) = self.sources[i];
            seg.slice(&dataset.buffers[task][idx].transitions)
        };
        self.view1
            .iter()
            .enumerate()
            .map(resolve)
            .chain(self.view2.iter().enumerate().map(resolve))
            .collect()
    }

    /// Labels of D, view 1 then view 2.
    pub fn all_labels(&self) -> Vec<usize> {
        self.labels.iter().chain(&self.labels).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderTrainConfig {
    pub loss: LossConfig,
    pub steps: usize,
    pub learning_rate: f64,
    /// Overrides every hidden width of the encoder (defaults keep 64).
    pub hidden_width: Option<usize>,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            steps: 2000,
            learning_rate: 3e-4,
            hidden_width: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub wallclock_ms: u128,
}

/// One loss+gradient evaluation of the encoder on a batch.
pub fn encoder_loss_and_grads(
    params: &EncoderParams,
    dataset: &OfflineDataset,
    batch: &AugmentedBatch,
    variant: LossVariant,
    temperature: f64,
) -> Result<(f64, Vec<Matrix>), ContrastiveError> {
    let mut g = ValueGraph::new();
    let nodes = params.bind(&mut g, true);
    let segments = batch.segments(dataset);
    let (_, w) = nodes.encode_segments(&mut g, &segments)?;
    let loss = contrastive_loss_node(&mut g, w, &batch.all_labels(), variant, temperature)?;
    let grads = g.backward(loss)?.collect(&nodes.param_ids());
    Ok((g.value(loss).item(), grads))
}

/// Trains an encoder from scratch with Adam; deterministic given `seed`.
pub fn train_encoder(
    dataset: &OfflineDataset,
    cfg: &EncoderTrainConfig,
    seed: u64,
) -> Result<(EncoderParams, Vec<LossRecord>), ContrastiveError> {
    cfg.loss.validate()?;
    if dataset.num_tasks() < 2 {
        return Err(ContrastiveError::TooFewTasks(dataset.num_tasks()));
    }
    let mut dims = EncoderDims::for_family(dataset.family);
    if let Some(w) = cfg.hidden_width {
        dims = dims.with_hidden_width(w);
    }
    let mut params = EncoderParams::new(dims, seed);
    let mut adam = AdamState::new(cfg.learning_rate, params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let started = Instant::now();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = AugmentedBatch::sample(dataset, &cfg.loss, &mut rng)?;
        let (loss, grads) = encoder_loss_and_grads(&params, dataset, &batch, cfg.loss.variant, cfg.loss.temperature)?;
        adam.step(params.tensors_mut(), &grads)?;
        history.push(LossRecord {
            step,
            loss,
            wallclock_ms: started.elapsed().as_millis(),
        });
    }
    Ok((params, history))
}

/// CSV with columns `step,variant,loss,wallclock_ms`.
pub fn loss_history_csv(variant: LossVariant, history: &[LossRecord]) -> String {
    let mut out = String::from("step,variant,loss,wallclock_ms\n");
    for r in history {
        out.push_str(&format!("{},{},{:?},{}\n", r.step, variant, r.loss, r.wallclock_ms));
    }
    out
}

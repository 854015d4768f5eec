//! Implicit Q-learning on the context-augmented state `s ⊕ z`.
//!
//! The value network regresses an upper expectile of the target Q, the Q network
//! bootstraps from `V(s', z)`, and the policy is extracted by advantage-weighted
//! regression. The target Q network only ever changes by Polyak averaging.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contrastive::random_segment;
use crate::datagen::OfflineDataset;
use crate::diffcore::{polyak_update, Activation, AdamState, DiffError, Matrix, Mlp, MlpNodes, NodeId, ValueGraph};
use crate::encoder::{EncoderError, EncoderParams};
use crate::envs::Transition;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IqlError {
    #[error("invalid IQL config: {0}")]
    Config(String),
    #[error("encoder input width {encoder} does not match dataset transitions of width {dataset}")]
    EncoderMismatch { encoder: usize, dataset: usize },
    #[error("batch field `{field}` has shape {got:?}, expected {expected:?}")]
    BatchShape {
        field: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("expected {expected} parameter tensors, got {got}")]
    TensorCount { expected: usize, got: usize },
    #[error("parameter tensor {index} has shape {got:?}, expected {expected:?}")]
    TensorShape {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IqlConfig {
    /// Expectile τ of the value regression.
    pub expectile: f64,
    /// Inverse temperature β of the advantage weights.
    pub awr_temperature: f64,
    pub discount: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub polyak: f64,
    pub weight_clip: f64,
    /// Fixed standard deviation of the Gaussian policy.
    pub policy_std: f64,
    pub hidden: Vec<usize>,
    pub steps: usize,
    /// Crop bounds for the context segment drawn per sampled transition.
    pub context_min: usize,
    pub context_max: usize,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            expectile: 0.8,
            awr_temperature: 3.0,
            discount: 0.99,
            batch_size: 256,
            learning_rate: 3e-4,
            polyak: 0.005,
            weight_clip: 100.0,
            policy_std: 0.1,
            hidden: vec![64, 64],
            steps: 5000,
            context_min: 20,
            context_max: 60,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<(), IqlError> {
        let bad = |m: String| Err(IqlError::Config(m));
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            return bad(format!("expectile must be in (0, 1), got {}", self.expectile));
        }
        if !(self.awr_temperature > 0.0) {
            return bad(format!("awr_temperature must be > 0, got {}", self.awr_temperature));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount must be in (0, 1), got {}", self.discount));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return bad(format!("polyak must be in (0, 1], got {}", self.polyak));
        }
        if !(self.policy_std > 0.0) || !(self.weight_clip > 0.0) || self.batch_size == 0 {
            return bad("policy_std, weight_clip and batch_size must be positive".into());
        }
        if self.context_min == 0 || self.context_min > self.context_max {
            return bad(format!("context bounds [{}, {}] are invalid", self.context_min, self.context_max));
        }
        Ok(())
    }
}

/// |τ - 1(x < 0)| · x²
pub fn expectile_loss(x: f64, tau: f64) -> f64 {
    expectile_weight(x, tau) * x * x
}

fn expectile_weight(x: f64, tau: f64) -> f64 {
    if x < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IqlDims {
    pub obs: usize,
    pub context: usize,
    pub action: usize,
}

/// V, Q, target Q and policy-mean networks.
#[derive(Clone, Debug, PartialEq)]
pub struct IqlParams {
    pub dims: IqlDims,
    pub value: Mlp,
    pub q: Mlp,
    pub q_target: Mlp,
    pub policy: Mlp,
    pub policy_std: f64,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

impl IqlParams {
    pub fn new(dims: IqlDims, hidden: &[usize], policy_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sz = dims.obs + dims.context;
        let act = Activation::Relu;
        let value = Mlp::new(&sizes(sz, hidden, 1), act, &mut rng);
        let q = Mlp::new(&sizes(sz + dims.action, hidden, 1), act, &mut rng);
        let q_target = q.clone();
        let policy = Mlp::new(&sizes(sz, hidden, dims.action), act, &mut rng);
        Self {
            dims,
            value,
            q,
            q_target,
            policy,
            policy_std,
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        [&self.value, &self.q, &self.q_target, &self.policy]
            .into_iter()
            .flat_map(Mlp::params)
            .collect()
    }

    pub fn set_tensors(&mut self, values: Vec<Matrix>) -> Result<(), IqlError> {
        let mut slots: Vec<&mut Matrix> = Vec::new();
        for m in [&mut self.value, &mut self.q, &mut self.q_target, &mut self.policy] {
            slots.extend(m.params_mut());
        }
        if slots.len() != values.len() {
            return Err(IqlError::TensorCount {
                expected: slots.len(),
                got: values.len(),
            });
        }
        for (index, (slot, v)) in slots.iter().zip(&values).enumerate() {
            if slot.shape() != v.shape() {
                return Err(IqlError::TensorShape {
                    index,
                    expected: slot.shape(),
                    got: v.shape(),
                });
            }
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            **slot = v;
        }
        Ok(())
    }

    /// Mean action tanh(π(s ⊕ z)).
    pub fn act(&self, obs: &[f64], z: &[f64]) -> Result<Vec<f64>, IqlError> {
        let mut row = obs.to_vec();
        row.extend_from_slice(z);
        let out = self.policy.apply(&Matrix::row_vector(&row))?;
        Ok(out.data().iter().map(|x| x.tanh()).collect())
    }

    /// Squared distance between the Q and target-Q weights.
    pub fn target_gap(&self) -> f64 {
        self.q
            .params()
            .iter()
            .zip(self.q_target.params())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).collect::<Vec<_>>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Row-aligned transition batch. `z` is the frozen context embedding of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct IqlBatch {
    pub s: Matrix,
    pub z: Matrix,
    pub a: Matrix,
    pub r: Matrix,
    pub s_next: Matrix,
    /// 1 where the episode terminates after this step.
    pub done: Matrix,
}

impl IqlBatch {
    pub fn len(&self) -> usize {
        self.s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.s.rows() == 0
    }

    fn check(&self, dims: IqlDims) -> Result<(), IqlError> {
        let n = self.len();
        let expect = [
            ("s", &self.s, (n, dims.obs)),
            ("z", &self.z, (n, dims.context)),
            ("a", &self.a, (n, dims.action)),
            ("r", &self.r, (n, 1)),
            ("s_next", &self.s_next, (n, dims.obs)),
            ("done", &self.done, (n, 1)),
        ];
        for (field, m, shape) in expect {
            if m.shape() != shape {
                return Err(IqlError::BatchShape {
                    field,
                    expected: shape,
                    got: m.shape(),
                });
            }
        }
        Ok(())
    }
}

struct BoundNets {
    value: MlpNodes,
    q: MlpNodes,
    q_target: MlpNodes,
    policy: MlpNodes,
}

/// The three losses recorded in one graph with every network bound trainable.
///
/// Target paths pass through `stop_gradient`, so each loss only reaches the
/// network it trains; the other networks receive exact zeros.
pub struct IqlGraph {
    pub graph: ValueGraph,
    pub value_loss: NodeId,
    pub q_loss: NodeId,
    pub policy_loss: NodeId,
    pub value_ids: Vec<NodeId>,
    pub q_ids: Vec<NodeId>,
    pub q_target_ids: Vec<NodeId>,
    pub policy_ids: Vec<NodeId>,
}

impl IqlGraph {
    pub fn build(params: &IqlParams, batch: &IqlBatch, cfg: &IqlConfig) -> Result<Self, IqlError> {
        batch.check(params.dims)?;
        let n = batch.len();
        let mut g = ValueGraph::new();
        let nets = BoundNets {
            value: params.value.bind(&mut g, true),
            q: params.q.bind(&mut g, true),
            q_target: params.q_target.bind(&mut g, true),
            policy: params.policy.bind(&mut g, true),
        };
        let s = g.constant(batch.s.clone());
        let z = g.constant(batch.z.clone());
        let a = g.constant(batch.a.clone());
        let s_next = g.constant(batch.s_next.clone());
        let sz = g.concat_cols(&[s, z])?;
        let sza = g.concat_cols(&[s, z, a])?;
        let snz = g.concat_cols(&[s_next, z])?;

        // value: mean |τ - 1(u<0)| u², u = Q̂(s,z,a) - V(s,z)
        let q_hat_raw = nets.q_target.forward(&mut g, sza)?;
        let q_hat = g.stop_gradient(q_hat_raw)?;
        let v = nets.value.forward(&mut g, sz)?;
        let u = g.sub(q_hat, v)?;
        let weights = g.value(u).map(|x| expectile_weight(x, cfg.expectile));
        let wn = g.constant(weights);
        let u2 = g.square(u)?;
        let weighted = g.elementwise_mul(u2, wn)?;
        let value_loss = g.mean(weighted)?;

        // Q: mean (r + γ(1-done)V(s',z) - Q(s,z,a))²
        let v_next_raw = nets.value.forward(&mut g, snz)?;
        let v_next = g.stop_gradient(v_next_raw)?;
        let mut keep = Matrix::zeros(n, 1);
        for i in 0..n {
            keep.data_mut()[i] = cfg.discount * (1.0 - batch.done.data()[i]);
        }
        let keep = g.constant(keep);
        let boot = g.elementwise_mul(v_next, keep)?;
        let r = g.constant(batch.r.clone());
        let target = g.add(r, boot)?;
        let q = nets.q.forward(&mut g, sza)?;
        let err = g.sub(q, target)?;
        let err2 = g.square(err)?;
        let q_loss = g.mean(err2)?;

        // policy: -mean min(exp(β·A), clip) · log N(a; tanh(π(s,z)), σ²)
        let adv = g.value(q_hat).data().iter().zip(g.value(v).data()).map(|(qh, vv)| qh - vv);
        let awr: Vec<f64> = adv
            .map(|x| (cfg.awr_temperature * x).exp().min(cfg.weight_clip))
            .collect();
        let awr = g.constant(Matrix::new(n, 1, awr)?);
        let raw_mean = nets.policy.forward(&mut g, sz)?;
        let mean = g.tanh(raw_mean)?;
        let diff = g.sub(a, mean)?;
        let sq = g.square(diff)?;
        let sq_sum = g.row_sum(sq)?;
        let std = params.policy_std;
        let scaled = g.scalar_mul(sq_sum, -1.0 / (2.0 * std * std))?;
        let log_norm = params.dims.action as f64 * (std * (2.0 * PI).sqrt()).ln();
        let log_prob = g.add_scalar(scaled, -log_norm)?;
        let wlp = g.elementwise_mul(log_prob, awr)?;
        let mean_wlp = g.mean(wlp)?;
        let policy_loss = g.scalar_mul(mean_wlp, -1.0)?;

        Ok(Self {
            graph: g,
            value_loss,
            q_loss,
            policy_loss,
            value_ids: nets.value.param_ids(),
            q_ids: nets.q.param_ids(),
            q_target_ids: nets.q_target.param_ids(),
            policy_ids: nets.policy.param_ids(),
        })
    }

    pub fn loss(&self, id: NodeId) -> f64 {
        self.graph.value(id).item()
    }
}

pub fn value_loss(params: &IqlParams, batch: &IqlBatch, cfg: &IqlConfig) -> Result<f64, IqlError> {
    let g = IqlGraph::build(params, batch, cfg)?;
    Ok(g.loss(g.value_loss))
}

pub fn q_loss(params: &IqlParams, batch: &IqlBatch, cfg: &IqlConfig) -> Result<f64, IqlError> {
    let g = IqlGraph::build(params, batch, cfg)?;
    Ok(g.loss(g.q_loss))
}

pub fn policy_loss(params: &IqlParams, batch: &IqlBatch, cfg: &IqlConfig) -> Result<f64, IqlError> {
    let g = IqlGraph::build(params, batch, cfg)?;
    Ok(g.loss(g.policy_loss))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IqlRecord {
    pub step: usize,
    pub v_loss: f64,
    pub q_loss: f64,
    pub pi_loss: f64,
    pub wallclock_ms: u128,
}

/// Parameters plus one Adam state per trained network.
pub struct IqlTrainer {
    pub params: IqlParams,
    pub cfg: IqlConfig,
    value_opt: AdamState,
    q_opt: AdamState,
    policy_opt: AdamState,
    steps: usize,
}

impl IqlTrainer {
    pub fn new(dims: IqlDims, cfg: IqlConfig, seed: u64) -> Result<Self, IqlError> {
        cfg.validate()?;
        let params = IqlParams::new(dims, &cfg.hidden, cfg.policy_std, seed);
        let lr = cfg.learning_rate;
        Ok(Self {
            value_opt: AdamState::new(lr, params.value.params()),
            q_opt: AdamState::new(lr, params.q.params()),
            policy_opt: AdamState::new(lr, params.policy.params()),
            params,
            cfg,
            steps: 0,
        })
    }

    /// One Adam step on each loss (all evaluated at the current parameters), then Polyak.
    pub fn update(&mut self, batch: &IqlBatch) -> Result<IqlRecord, IqlError> {
        let ig = IqlGraph::build(&self.params, batch, &self.cfg)?;
        let gv = ig.graph.backward(ig.value_loss)?.collect(&ig.value_ids);
        let gq = ig.graph.backward(ig.q_loss)?.collect(&ig.q_ids);
        let gp = ig.graph.backward(ig.policy_loss)?.collect(&ig.policy_ids);
        self.value_opt.step(self.params.value.params_mut(), &gv)?;
        self.q_opt.step(self.params.q.params_mut(), &gq)?;
        self.policy_opt.step(self.params.policy.params_mut(), &gp)?;
        polyak_update(self.params.q_target.params_mut(), self.params.q.params(), self.cfg.polyak);
        let rec = IqlRecord {
            step: self.steps,
            v_loss: ig.loss(ig.value_loss),
            q_loss: ig.loss(ig.q_loss),
            pi_loss: ig.loss(ig.policy_loss),
            wallclock_ms: 0,
        };
        self.steps += 1;
        Ok(rec)
    }
}

/// Samples transitions uniformly from a dataset and embeds a fresh random
/// context segment of each transition's own trajectory.
pub fn sample_batch<R: Rng>(
    dataset: &OfflineDataset,
    encoder: &EncoderParams,
    cfg: &IqlConfig,
    rng: &mut R,
) -> Result<IqlBatch, IqlError> {
    let n = cfg.batch_size;
    let family = dataset.family;
    let (obs, act) = (family.obs_dim(), family.action_dim());
    let mut s = Vec::with_capacity(n * obs);
    let mut a = Vec::with_capacity(n * act);
    let mut r = Vec::with_capacity(n);
    let mut s_next = Vec::with_capacity(n * obs);
    let mut segments: Vec<&[Transition]> = Vec::with_capacity(n);
    for _ in 0..n {
        let task = rng.gen_range(0..dataset.num_tasks());
        let buf = &dataset.buffers[task];
        if buf.is_empty() {
            return Err(IqlError::EmptyDataset);
        }
        let traj = &buf[rng.gen_range(0..buf.len())];
        let t = &traj.transitions[rng.gen_range(0..traj.len())];
        s.extend_from_slice(&t.s);
        a.extend_from_slice(&t.a);
        r.push(t.r);
        s_next.extend_from_slice(&t.s_next);
        let seg = random_segment(traj.len(), cfg.context_min.min(traj.len()), cfg.context_max, rng)
            .map_err(|e| IqlError::Config(e.to_string()))?;
        segments.push(seg.slice(&traj.transitions));
    }
    let z = encoder.embed_segments(&segments)?;
    Ok(IqlBatch {
        s: Matrix::new(n, obs, s)?,
        z,
        a: Matrix::new(n, act, a)?,
        r: Matrix::new(n, 1, r)?,
        s_next: Matrix::new(n, obs, s_next)?,
        done: Matrix::zeros(n, 1),
    })
}

/// Trains IQL on `dataset` with a frozen encoder; deterministic given `seed`.
pub fn train_policy(
    dataset: &OfflineDataset,
    encoder: &EncoderParams,
    cfg: &IqlConfig,
    seed: u64,
) -> Result<(IqlParams, Vec<IqlRecord>), IqlError> {
    let family = dataset.family;
    let width = 2 * family.obs_dim() + family.action_dim() + 1;
    if encoder.dims.input != width {
        return Err(IqlError::EncoderMismatch {
            encoder: encoder.dims.input,
            dataset: width,
        });
    }
    if dataset.num_trajectories() == 0 {
        return Err(IqlError::EmptyDataset);
    }
    let dims = IqlDims {
        obs: family.obs_dim(),
        context: encoder.dims.embed_dim,
        action: family.action_dim(),
    };
    let mut trainer = IqlTrainer::new(dims, cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a1_b0b);
    let started = Instant::now();
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = sample_batch(dataset, encoder, cfg, &mut rng)?;
        let mut rec = trainer.update(&batch)?;
        rec.wallclock_ms = started.elapsed().as_millis();
        history.push(rec);
    }
    Ok((trainer.params, history))
}

/// CSV with columns `step,v_loss,q_loss,pi_loss`.
pub fn iql_history_csv(history: &[IqlRecord]) -> String {
    let mut out = String::from("step,v_loss,q_loss,pi_loss\n");
    for r in history {
        out.push_str(&format!("{},{:?},{:?},{:?}\n", r.step, r.v_loss, r.q_loss, r.pi_loss));
    }
    out
}

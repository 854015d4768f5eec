//! Finite-difference checks shared by the gradient tests and the acceptance suite.

use hsomrl::contrastive::{coefficients, weighted_loss_node, LossVariant};
use hsomrl::diffcore::gradcheck::{max_relative_error, numeric_gradients};
use hsomrl::diffcore::{Matrix, NodeId, ValueGraph};
use hsomrl::encoder::{EncoderDims, EncoderParams};
use hsomrl::envs::Transition;
use hsomrl::iql::{IqlBatch, IqlConfig, IqlDims, IqlGraph, IqlParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_labels, random_matrix};

type Build = dyn Fn(&mut ValueGraph, &[NodeId]) -> NodeId;

/// Compares backward() with central differences for `sum(op(inputs) ⊙ probe)`.
fn check(inputs: Vec<Matrix>, probe_seed: u64, op: &Build) -> f64 {
    let record = |g: &mut ValueGraph, ids: &[NodeId]| {
        let out = op(g, ids);
        let (r, c) = g.value(out).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
        let probe = g.constant(random_matrix(r, c, 1.0, &mut rng));
        let m = g.elementwise_mul(out, probe).unwrap();
        g.sum(m).unwrap()
    };
    let mut g = ValueGraph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let loss = record(&mut g, &ids);
    let analytic = g.backward(loss).unwrap().collect(&ids);
    let numeric = numeric_gradients(&inputs, 1e-6, |ms| {
        let mut g = ValueGraph::new();
        let ids: Vec<NodeId> = ms.iter().map(|m| g.constant(m.clone())).collect();
        let l = record(&mut g, &ids);
        g.value(l).item()
    });
    max_relative_error(&analytic, &numeric, 1e-4)
}

fn offsets_for(rows: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut cuts = vec![0];
    let mut at = 0;
    while at < rows {
        at = (at + rng.gen_range(1..=3)).min(rows);
        cuts.push(at);
    }
    cuts
}

fn away_from_zero(m: Matrix) -> Matrix {
    m.map(|x| if x.abs() < 0.05 { x + 0.1f64.copysign(x) } else { x })
}

/// Worst relative error of every graph op on one random instance, with the op name.
pub fn op_suite(seed: u64) -> (&'static str, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c, k) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let a = random_matrix(r, c, 1.0, &mut rng);
    let b = random_matrix(r, c, 1.0, &mut rng);
    let bt = random_matrix(c, k, 1.0, &mut rng);
    let row = random_matrix(1, c, 1.0, &mut rng);
    let col = random_matrix(r, 1, 1.0, &mut rng);
    let positive = a.map(|x| x.abs() + 0.5);
    let offsets = offsets_for(r, &mut rng);
    let perm: Vec<usize> = (0..r + 2).map(|_| rng.gen_range(0..r)).collect();
    let probe = seed.wrapping_add(1);

    let cases: Vec<(&'static str, Vec<Matrix>, Box<Build>)> = vec![
        ("matmul", vec![a.clone(), bt], Box::new(|g, x| g.matmul(x[0], x[1]).unwrap())),
        ("add", vec![a.clone(), b.clone()], Box::new(|g, x| g.add(x[0], x[1]).unwrap())),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, x| g.sub(x[0], x[1]).unwrap())),
        ("mul", vec![a.clone(), b], Box::new(|g, x| g.elementwise_mul(x[0], x[1]).unwrap())),
        ("add_row", vec![a.clone(), row], Box::new(|g, x| g.add_row(x[0], x[1]).unwrap())),
        ("mul_col", vec![a.clone(), col.clone()], Box::new(|g, x| g.mul_col(x[0], x[1]).unwrap())),
        ("scalar_mul", vec![a.clone()], Box::new(|g, x| g.scalar_mul(x[0], -1.7).unwrap())),
        ("add_scalar", vec![a.clone()], Box::new(|g, x| g.add_scalar(x[0], 0.3).unwrap())),
        ("tanh", vec![a.clone()], Box::new(|g, x| g.tanh(x[0]).unwrap())),
        ("relu", vec![away_from_zero(a.clone())], Box::new(|g, x| g.relu(x[0]).unwrap())),
        ("exp", vec![a.clone()], Box::new(|g, x| g.exp(x[0]).unwrap())),
        ("log", vec![positive.clone()], Box::new(|g, x| g.log(x[0]).unwrap())),
        ("square", vec![a.clone()], Box::new(|g, x| g.square(x[0]).unwrap())),
        ("row_softmax", vec![a.clone()], Box::new(|g, x| g.row_softmax(x[0]).unwrap())),
        ("l2_normalize_rows", vec![positive], Box::new(|g, x| g.l2_normalize_rows(x[0]).unwrap())),
        ("sum", vec![a.clone()], Box::new(|g, x| g.sum(x[0]).unwrap())),
        ("mean", vec![a.clone()], Box::new(|g, x| g.mean(x[0]).unwrap())),
        ("row_sum", vec![a.clone()], Box::new(|g, x| g.row_sum(x[0]).unwrap())),
        ("concat_cols", vec![a.clone(), col.clone()], Box::new(|g, x| g.concat_cols(&[x[0], x[1]]).unwrap())),
        ("transpose", vec![a.clone()], Box::new(|g, x| g.transpose(x[0]).unwrap())),
        ("gather_rows", vec![a.clone()], Box::new(move |g, x| g.gather_rows(x[0], &perm).unwrap())),
        ("segment_softmax", vec![col], Box::new({
            let o = offsets.clone();
            move |g, x| g.segment_softmax(x[0], &o).unwrap()
        })),
        ("segment_sum", vec![a], Box::new(move |g, x| g.segment_sum(x[0], &offsets).unwrap())),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, op)| (name, check(inputs, probe, op.as_ref())))
        .fold(("none", 0.0), |worst, cur| if cur.1 > worst.1 { cur } else { worst })
}

pub fn transitions<R: Rng>(n: usize, obs: usize, act: usize, rng: &mut R) -> Vec<Transition> {
    (0..n)
        .map(|_| Transition {
            s: (0..obs).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            a: (0..act).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            s_next: (0..obs).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            r: rng.gen_range(-1.0..1.0),
        })
        .collect()
}

/// Encoder → projection → loss gradient against central differences.
///
/// Hardness weights are stop-gradient constants, so the oracle freezes them at
/// their values for the unperturbed parameters.
pub fn contrastive_gradient_error(variant: LossVariant, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = EncoderDims::with_input(6).with_hidden_width(8);
    let params = EncoderParams::new(dims, seed);
    let labels = random_labels(3, 3, &mut rng);
    let segs: Vec<Vec<Transition>> = labels.iter().map(|_| transitions(rng.gen_range(2..5), 2, 1, &mut rng)).collect();
    let seg_refs: Vec<&[Transition]> = segs.iter().map(Vec::as_slice).collect();
    let project = |p: &EncoderParams, g: &mut ValueGraph, trainable: bool| {
        let nodes = p.bind(g, trainable);
        let (_, w) = nodes.encode_segments(g, &seg_refs).unwrap();
        (nodes, w)
    };
    let mut g = ValueGraph::new();
    let (nodes, w) = project(&params, &mut g, true);
    let coef = coefficients(g.value(w), &labels, variant).unwrap();
    let loss = weighted_loss_node(&mut g, w, &coef, 0.5).unwrap();
    let analytic = g.backward(loss).unwrap().collect(&nodes.param_ids());
    let base: Vec<Matrix> = params.tensors().into_iter().cloned().collect();
    let numeric = numeric_gradients(&base, 1e-6, |ts| {
        let mut q = params.clone();
        q.set_tensors(ts.to_vec()).unwrap();
        let mut g = ValueGraph::new();
        let (_, w) = project(&q, &mut g, false);
        let l = weighted_loss_node(&mut g, w, &coef, 0.5).unwrap();
        g.value(l).item()
    });
    max_relative_error(&analytic, &numeric, 1e-4)
}

fn iql_case(seed: u64) -> (IqlParams, IqlBatch, IqlConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = IqlConfig {
        hidden: vec![8, 8],
        ..IqlConfig::default()
    };
    let dims = IqlDims { obs: 2, context: 3, action: 2 };
    let mut params = IqlParams::new(dims, &cfg.hidden, cfg.policy_std, seed);
    params.q_target = IqlParams::new(dims, &cfg.hidden, cfg.policy_std, seed + 100).q;
    let n = 12;
    let batch = IqlBatch {
        s: random_matrix(n, 2, 1.0, &mut rng),
        z: random_matrix(n, 3, 1.0, &mut rng),
        a: random_matrix(n, 2, 1.0, &mut rng),
        r: random_matrix(n, 1, 1.0, &mut rng),
        s_next: random_matrix(n, 2, 1.0, &mut rng),
        done: Matrix::new(n, 1, (0..n).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect()).unwrap(),
    };
    (params, batch, cfg)
}

#[derive(Clone, Copy, Debug)]
pub enum IqlLoss {
    Value,
    Q,
    Policy,
}

/// Gradient of one IQL loss with respect to the network it trains.
pub fn iql_gradient_error(which: IqlLoss, seed: u64) -> f64 {
    let (params, batch, cfg) = iql_case(seed);
    let pick = |g: &IqlGraph| match which {
        IqlLoss::Value => g.value_loss,
        IqlLoss::Q => g.q_loss,
        IqlLoss::Policy => g.policy_loss,
    };
    let ig = IqlGraph::build(&params, &batch, &cfg).unwrap();
    let (ids, base) = match which {
        IqlLoss::Value => (&ig.value_ids, params.value.params()),
        IqlLoss::Q => (&ig.q_ids, params.q.params()),
        IqlLoss::Policy => (&ig.policy_ids, params.policy.params()),
    };
    let analytic = ig.graph.backward(pick(&ig)).unwrap().collect(ids);
    let base: Vec<Matrix> = base.into_iter().cloned().collect();
    let numeric = numeric_gradients(&base, 1e-6, |ts| {
        let mut p = params.clone();
        let net = match which {
            IqlLoss::Value => &mut p.value,
            IqlLoss::Q => &mut p.q,
            IqlLoss::Policy => &mut p.policy,
        };
        for (slot, t) in net.params_mut().into_iter().zip(ts) {
            *slot = t.clone();
        }
        let g = IqlGraph::build(&p, &batch, &cfg).unwrap();
        g.loss(pick(&g))
    });
    max_relative_error(&analytic, &numeric, 1e-4)
}

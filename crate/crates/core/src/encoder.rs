//! Context encoder: transition encoder, attention pooling aggregator, projection head.
//!
//! Every stage ends in row-wise L2 normalization, so transition embeddings `v`,
//! context embeddings `z` and projections `w` all lie on unit hyperspheres.
//! The aggregator sorts each segment's transition embeddings before pooling,
//! which makes it exactly invariant to the order of the input transitions.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Activation, DiffError, Matrix, Mlp, MlpNodes, NodeId, ValueGraph};
use crate::envs::{Family, Transition};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("transition has {got} features, encoder expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cannot encode an empty segment")]
    EmptySegment,
    #[error("expected {expected} parameter tensors, got {got}")]
    TensorCount { expected: usize, got: usize },
    #[error("parameter tensor {index} has shape {got:?}, expected {expected:?}")]
    TensorShape {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDims {
    /// |s| + |a| + |s'| + 1
    pub input: usize,
    pub transition_hidden: Vec<usize>,
    pub transition_dim: usize,
    pub aggregator_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub projection_hidden: Vec<usize>,
    pub projection_dim: usize,
}

impl EncoderDims {
    pub fn for_family(family: Family) -> Self {
        Self::with_input(2 * family.obs_dim() + family.action_dim() + 1)
    }

    /// Default widths: MLP(64,64) → 20, attention(64,64) → 64, MLP(64) → 5.
    pub fn with_input(input: usize) -> Self {
        Self {
            input,
            transition_hidden: vec![64, 64],
            transition_dim: 20,
            aggregator_hidden: vec![64, 64],
            embed_dim: 64,
            projection_hidden: vec![64],
            projection_dim: 5,
        }
    }

    /// Same layout with every hidden layer set to `width`.
    pub fn with_hidden_width(mut self, width: usize) -> Self {
        for h in [
            &mut self.transition_hidden,
            &mut self.aggregator_hidden,
            &mut self.projection_hidden,
        ] {
            h.iter_mut().for_each(|x| *x = width);
        }
        self
    }

    fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend_from_slice(hidden);
        s.push(output);
        s
    }
}

/// Unit-norm trajectory embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEmbedding(pub Vec<f64>);

/// Unit-norm projection used only by the contrastive losses.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedEmbedding(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub transition: Mlp,
    pub score: Mlp,
    pub value: Mlp,
    pub output: Mlp,
    pub projection: Mlp,
}

impl EncoderParams {
    pub fn new(dims: EncoderDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = Activation::Tanh;
        let agg = &dims.aggregator_hidden;
        let pooled = *agg.last().unwrap_or(&dims.transition_dim);
        let transition = Mlp::new(
            &EncoderDims::sizes(dims.input, &dims.transition_hidden, dims.transition_dim),
            act,
            &mut rng,
        );
        let score = Mlp::new(&EncoderDims::sizes(dims.transition_dim, &agg[..agg.len().min(1)], 1), act, &mut rng);
        let value = Mlp::new(
            &EncoderDims::sizes(dims.transition_dim, &agg[..agg.len().saturating_sub(1)], pooled),
            act,
            &mut rng,
        );
        let output = Mlp::new(&[pooled, dims.embed_dim], act, &mut rng);
        let projection = Mlp::new(
            &EncoderDims::sizes(dims.embed_dim, &dims.projection_hidden, dims.projection_dim),
            act,
            &mut rng,
        );
        Self {
            dims,
            transition,
            score,
            value,
            output,
            projection,
        }
    }

    fn mlps(&self) -> [&Mlp; 5] {
        [&self.transition, &self.score, &self.value, &self.output, &self.projection]
    }

    /// All tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.mlps().into_iter().flat_map(Mlp::params).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for m in [
            &mut self.transition,
            &mut self.score,
            &mut self.value,
            &mut self.output,
            &mut self.projection,
        ] {
            out.extend(m.params_mut());
        }
        out
    }

    /// Replaces every tensor, checking count and shapes.
    pub fn set_tensors(&mut self, values: Vec<Matrix>) -> Result<(), EncoderError> {
        let mut slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(EncoderError::TensorCount {
                expected: slots.len(),
                got: values.len(),
            });
        }
        for (index, (slot, v)) in slots.iter().zip(&values).enumerate() {
            if slot.shape() != v.shape() {
                return Err(EncoderError::TensorShape {
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

    pub fn bind(&self, g: &mut ValueGraph, trainable: bool) -> EncoderNodes {
        EncoderNodes {
            input: self.dims.input,
            transition: self.transition.bind(g, trainable),
            score: self.score.bind(g, trainable),
            value: self.value.bind(g, trainable),
            output: self.output.bind(g, trainable),
            projection: self.projection.bind(g, trainable),
        }
    }

    /// v = normalize(MLP(s ⊕ a ⊕ s' ⊕ r)).
    pub fn encode_transition(&self, t: &Transition) -> Result<Vec<f64>, EncoderError> {
        let mut g = ValueGraph::new();
        let nodes = self.bind(&mut g, false);
        let x = g.constant(feature_matrix(self.dims.input, &[t])?);
        let v = nodes.transition_embeddings(&mut g, x)?;
        Ok(g.value(v).row(0).to_vec())
    }

    /// Attention pooling of transition embeddings into a context embedding.
    pub fn aggregate(&self, v_list: &[Vec<f64>]) -> Result<ContextEmbedding, EncoderError> {
        if v_list.is_empty() {
            return Err(EncoderError::EmptySegment);
        }
        let mut g = ValueGraph::new();
        let nodes = self.bind(&mut g, false);
        let v = g.constant(Matrix::from_rows(v_list)?);
        let z = nodes.pool(&mut g, v, &[0, v_list.len()])?;
        Ok(ContextEmbedding(g.value(z).row(0).to_vec()))
    }

    pub fn project(&self, z: &ContextEmbedding) -> Result<ProjectedEmbedding, EncoderError> {
        let mut g = ValueGraph::new();
        let nodes = self.bind(&mut g, false);
        let zn = g.constant(Matrix::row_vector(&z.0));
        let w = nodes.project(&mut g, zn)?;
        Ok(ProjectedEmbedding(g.value(w).row(0).to_vec()))
    }

    pub fn encode_trajectory(
        &self,
        segment: &[Transition],
    ) -> Result<(ContextEmbedding, ProjectedEmbedding), EncoderError> {
        let mut g = ValueGraph::new();
        let nodes = self.bind(&mut g, false);
        let (z, w) = nodes.encode_segments(&mut g, &[segment])?;
        Ok((
            ContextEmbedding(g.value(z).row(0).to_vec()),
            ProjectedEmbedding(g.value(w).row(0).to_vec()),
        ))
    }

    /// Context embeddings (one row per segment) without the projection head.
    pub fn embed_segments(&self, segments: &[&[Transition]]) -> Result<Matrix, EncoderError> {
        let mut g = ValueGraph::new();
        let nodes = self.bind(&mut g, false);
        let z = nodes.context_embeddings(&mut g, segments)?;
        Ok(g.value(z).clone())
    }
}

/// Stacks transition feature rows, checking the input width.
pub fn feature_matrix(input: usize, transitions: &[&Transition]) -> Result<Matrix, EncoderError> {
    let mut data = Vec::with_capacity(transitions.len() * input);
    for t in transitions {
        let f = t.features();
        if f.len() != input {
            return Err(EncoderError::DimMismatch {
                expected: input,
                got: f.len(),
            });
        }
        data.extend(f);
    }
    Ok(Matrix::new(transitions.len(), input, data)?)
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Encoder weights bound into one graph.
pub struct EncoderNodes {
    input: usize,
    transition: MlpNodes,
    score: MlpNodes,
    value: MlpNodes,
    output: MlpNodes,
    projection: MlpNodes,
}

impl EncoderNodes {
    /// Parameter nodes in [`EncoderParams::tensors`] order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        [&self.transition, &self.score, &self.value, &self.output, &self.projection]
            .into_iter()
            .flat_map(MlpNodes::param_ids)
            .collect()
    }

    pub fn transition_embeddings(&self, g: &mut ValueGraph, x: NodeId) -> Result<NodeId, EncoderError> {
        let h = self.transition.forward(g, x)?;
        Ok(g.l2_normalize_rows(h)?)
    }

    /// Pools the rows of `v` segment by segment into unit-norm context embeddings.
    pub fn pool(&self, g: &mut ValueGraph, v: NodeId, offsets: &[usize]) -> Result<NodeId, EncoderError> {
        // canonical row order inside each segment
        let vals = g.value(v);
        let mut order: Vec<usize> = Vec::with_capacity(vals.rows());
        for w in offsets.windows(2) {
            let mut idx: Vec<usize> = (w[0]..w[1]).collect();
            idx.sort_by(|&a, &b| lexicographic(vals.row(a), vals.row(b)));
            order.extend(idx);
        }
        let v = g.gather_rows(v, &order)?;
        let scores = self.score.forward(g, v)?;
        let weights = g.segment_softmax(scores, offsets)?;
        let values = self.value.forward(g, v)?;
        let weighted = g.mul_col(values, weights)?;
        let pooled = g.segment_sum(weighted, offsets)?;
        let out = self.output.forward(g, pooled)?;
        Ok(g.l2_normalize_rows(out)?)
    }

    pub fn project(&self, g: &mut ValueGraph, z: NodeId) -> Result<NodeId, EncoderError> {
        let p = self.projection.forward(g, z)?;
        Ok(g.l2_normalize_rows(p)?)
    }

    pub fn context_embeddings(&self, g: &mut ValueGraph, segments: &[&[Transition]]) -> Result<NodeId, EncoderError> {
        let mut offsets = vec![0];
        let mut rows: Vec<&Transition> = Vec::new();
        for seg in segments {
            if seg.is_empty() {
                return Err(EncoderError::EmptySegment);
            }
            rows.extend(seg.iter());
            offsets.push(rows.len());
        }
        if rows.is_empty() {
            return Err(EncoderError::EmptySegment);
        }
        let x = g.constant(feature_matrix(self.input, &rows)?);
        let v = self.transition_embeddings(g, x)?;
        self.pool(g, v, &offsets)
    }

    /// (z, w) node pair, one row per segment.
    pub fn encode_segments(
        &self,
        g: &mut ValueGraph,
        segments: &[&[Transition]],
    ) -> Result<(NodeId, NodeId), EncoderError> {
        let z = self.context_embeddings(g, segments)?;
        let w = self.project(g, z)?;
        Ok((z, w))
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DiffError, Matrix, NodeId, ValueGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully connected layer; `weight` is in×out so rows of the input multiply on the left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    /// Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut sample = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<_>>();
        let weight = Matrix::new(fan_in, fan_out, sample(fan_in * fan_out)).unwrap();
        let bias = Matrix::new(1, fan_out, sample(fan_out)).unwrap();
        Self { weight, bias }
    }
}

/// Multi-layer perceptron with a hidden activation and a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` lists every width including input and output, e.g. `[7, 64, 64, 20]`.
    pub fn new<R: Rng>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Registers the weights in `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut ValueGraph, trainable: bool) -> MlpNodes {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.param(l.weight.clone()), g.param(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                }
            })
            .collect();
        MlpNodes {
            layers,
            activation: self.activation,
        }
    }

    /// Ungraphed forward pass for inference.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix, DiffError> {
        let mut g = ValueGraph::new();
        let nodes = self.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let out = nodes.forward(&mut g, xi)?;
        Ok(g.value(out).clone())
    }
}

/// Node handles for an [`Mlp`] bound into one graph.
#[derive(Clone, Debug)]
pub struct MlpNodes {
    layers: Vec<(NodeId, NodeId)>,
    activation: Activation,
}

impl MlpNodes {
    pub fn forward(&self, g: &mut ValueGraph, x: NodeId) -> Result<NodeId, DiffError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let lin = g.matmul(h, w)?;
            h = g.add_row(lin, b)?;
            if i < last {
                h = match self.activation {
                    Activation::Tanh => g.tanh(h)?,
                    Activation::Relu => g.relu(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Parameter nodes in the same order as [`Mlp::params`].
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// target ← (1 - rate)·target + rate·source, tensor by tensor.
pub fn polyak_update(target: Vec<&mut Matrix>, source: Vec<&Matrix>, rate: f64) {
    for (t, s) in target.into_iter().zip(source) {
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = (1.0 - rate) * *a + rate * b;
        }
    }
}

use serde::{Deserialize, Serialize};

use super::data::{Batch, Target};
use crate::adapters::{adapted_linear, merge, AdaptedLayer, AdaptedNode, Variant};
use crate::error::{LorsError, Result};
use crate::graph::{NodeId, Tape};
use crate::prune::SparseWeight;
use crate::tensor::{self, DenseMatrix, RngState};

/// What the last layer's output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Output compared to targets by mean squared error.
    Regression,
    /// Output rows are logits for `classes` classes.
    Classification { classes: usize },
}

/// One frozen layer of a base model.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseLayer {
    pub weight: SparseWeight,
    pub bias: Option<DenseMatrix>,
}

/// A stack of (possibly pruned) linear layers with ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub layers: Vec<BaseLayer>,
    pub head: Head,
}

impl BaseModel {
    pub fn new(layers: Vec<BaseLayer>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(LorsError::arg("a model needs at least one layer"));
        }
        for pair in layers.windows(2) {
            let (out, next_in) = (pair[0].weight.shape().0, pair[1].weight.shape().1);
            if out != next_in {
                return Err(LorsError::shape("layer composition", pair[0].weight.shape(), pair[1].weight.shape()));
            }
        }
        for l in &layers {
            if let Some(b) = &l.bias {
                if b.shape() != (l.weight.shape().0, 1) {
                    return Err(LorsError::shape("bias", b.shape(), (l.weight.shape().0, 1)));
                }
            }
        }
        if let Head::Classification { classes } = head {
            let out = layers.last().map(|l| l.weight.shape().0).unwrap_or(0);
            if classes < 2 || classes != out {
                return Err(LorsError::arg(format!("{classes} classes do not fit an output width of {out}")));
            }
        }
        Ok(Self { layers, head })
    }

    /// Dense random MLP with `dims = [in, hidden…, out]`, weights scaled by
    /// `1/√fan_in` and small biases.
    pub fn random(dims: &[usize], head: Head, rng: &mut RngState) -> Result<Self> {
        if dims.len() < 2 {
            return Err(LorsError::arg("need at least input and output widths"));
        }
        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let w = DenseMatrix::random_normal(fan_out, fan_in, rng, 0.0, 1.0 / (fan_in as f64).sqrt());
                let b = DenseMatrix::random_normal(fan_out, 1, rng, 0.0, 0.1);
                BaseLayer { weight: SparseWeight::dense(w), bias: Some(b) }
            })
            .collect();
        Self::new(layers, head)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape().1
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.shape().0).unwrap_or(0)
    }

    /// Forward pass of the frozen weights alone.
    pub fn predict(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = tensor::matmul(l.weight.values(), &h)?;
            if let Some(b) = &l.bias {
                h = tensor::add_column_broadcast(&h, b)?;
            }
            if i + 1 < self.layers.len() {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Applies `f` to every weight, keeping biases and head.
    pub fn map_weights(&self, mut f: impl FnMut(usize, &SparseWeight) -> Result<SparseWeight>) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| Ok(BaseLayer { weight: f(i, &l.weight)?, bias: l.bias.clone() }))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, self.head)
    }
}

/// Adapted layers with ReLU between them and a task head.
#[derive(Debug, Clone)]
pub struct ToyModel {
    layers: Vec<AdaptedLayer>,
    head: Head,
}

/// Tape nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub output: NodeId,
    pub layers: Vec<AdaptedNode>,
}

impl ToyModel {
    pub fn new(layers: Vec<AdaptedLayer>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(LorsError::arg("a model needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].shape().0 != pair[1].shape().1 {
                return Err(LorsError::shape("layer composition", pair[0].shape(), pair[1].shape()));
            }
        }
        Ok(Self { layers, head })
    }

    /// Wraps every base layer with a zero adapter of the given variant.
    pub fn adapt(base: &BaseModel, variant: Variant, rank: usize, alpha: f64) -> Result<Self> {
        let layers = base
            .layers
            .iter()
            .map(|l| AdaptedLayer::with_zero_adapter(l.weight.clone(), variant, rank, alpha, l.bias.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, base.head)
    }

    pub fn layers(&self) -> &[AdaptedLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AdaptedLayer] {
        &mut self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn variant(&self) -> Variant {
        self.layers[0].variant()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].shape().1
    }

    /// Records the full forward pass on `tape`.
    pub fn forward(&mut self, tape: &mut Tape, x: NodeId) -> Result<ForwardNodes> {
        let n = self.layers.len();
        let mut h = x;
        let mut nodes = Vec::with_capacity(n);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let node = adapted_linear(tape, layer, h)?;
            h = if i + 1 < n { tape.relu(node.output)? } else { node.output };
            nodes.push(node);
        }
        Ok(ForwardNodes { output: h, layers: nodes })
    }

    /// Records the loss of `output` against `target`.
    pub fn loss(&self, tape: &mut Tape, output: NodeId, target: &Target) -> Result<NodeId> {
        match (self.head, target) {
            (Head::Regression, Target::Regression(t)) => tape.mse(output, t),
            (Head::Classification { .. }, Target::Classes(labels)) => tape.softmax_cross_entropy(output, labels),
            _ => Err(LorsError::arg("target kind does not match the model head")),
        }
    }

    /// Inference forward (no tape, dropout off).
    pub fn predict(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut h = x.clone();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(&h)?;
            if i + 1 < n {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Loss of one batch through a fresh tape.
    pub fn batch_loss(&mut self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.input(batch.x.clone(), false);
        let out = self.forward(&mut tape, x)?;
        let loss = self.loss(&mut tape, out.output, &batch.target)?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Every layer merged into a plain sparse weight.
    pub fn merged(&self) -> Result<BaseModel> {
        let layers = self
            .layers
            .iter()
            .map(|l| Ok(BaseLayer { weight: merge(l)?, bias: l.bias().cloned() }))
            .collect::<Result<Vec<_>>>()?;
        BaseModel::new(layers, self.head)
    }
}

//! Reverse-mode differentiation tape with first-class accounting of the
//! tensors each op keeps alive for its backward pass.
//!
//! Leaves come in three kinds. Parameters and constants are held by the model
//! anyway, so an op that needs one in backward captures it without counting it.
//! Inputs (activations) and intermediate results are counted whenever an op
//! saves them. This matches the convention that the saved-parameter figures
//! for a linear layer count activations such as `X`, never the weights.

mod counters;
pub mod gradcheck;
mod ops;

pub use counters::{CostCounters, Phase, SavedContext};

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{LorsError, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable; gradients are reported, saves are not counted.
    Param,
    /// Frozen weight; no gradient, saves are not counted.
    Constant,
    /// Activation fed into the tape; saves are counted.
    Input { requires_grad: bool },
}

/// A tensor an op keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct SavedTensor {
    pub label: String,
    pub tensor: Rc<DenseMatrix>,
}

impl SavedTensor {
    pub fn new(label: impl Into<String>, tensor: Rc<DenseMatrix>) -> Self {
        Self { label: label.into(), tensor }
    }
}

/// Maps the upstream gradient of an op's output to one optional gradient per
/// input. Runs at most once.
pub type BackwardFn = Box<dyn FnOnce(&DenseMatrix, &mut CostCounters) -> Result<Vec<Option<DenseMatrix>>>>;

/// Everything needed to append a differentiable op to a tape.
pub struct OpRecord {
    pub name: String,
    pub inputs: Vec<NodeId>,
    pub output: DenseMatrix,
    pub saved: Vec<SavedTensor>,
    pub backward: BackwardFn,
}

struct Node {
    name: String,
    inputs: Vec<NodeId>,
    value: Rc<DenseMatrix>,
    leaf: Option<LeafKind>,
    requires_grad: bool,
    saved: Vec<SavedTensor>,
    backward: Option<BackwardFn>,
}

/// What a backward hook sees just before a node's backward runs.
pub struct BackwardVisit<'a> {
    pub node: NodeId,
    pub op: &'a str,
    pub upstream: &'a DenseMatrix,
    pub inputs: Vec<Rc<DenseMatrix>>,
}

/// Leaf gradients produced by a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: BTreeMap<NodeId, DenseMatrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.by_node.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<DenseMatrix> {
        self.by_node.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

/// A single-use reverse-mode tape.
pub struct Tape {
    nodes: Vec<Node>,
    counters: CostCounters,
    saved: SavedContext,
    consumed: bool,
    invocations: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            counters: CostCounters::new(),
            saved: SavedContext::default(),
            consumed: false,
            invocations: 0,
        }
    }

    fn leaf(&mut self, name: &str, value: DenseMatrix, kind: LeafKind) -> NodeId {
        let requires_grad = matches!(kind, LeafKind::Param | LeafKind::Input { requires_grad: true });
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            name: name.to_string(),
            inputs: Vec::new(),
            value: Rc::new(value),
            leaf: Some(kind),
            requires_grad,
            saved: Vec::new(),
            backward: None,
        });
        self.saved.push(0);
        id
    }

    pub fn param(&mut self, value: DenseMatrix) -> NodeId {
        self.leaf("param", value, LeafKind::Param)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.leaf("constant", value, LeafKind::Constant)
    }

    pub fn input(&mut self, value: DenseMatrix, requires_grad: bool) -> NodeId {
        self.leaf("input", value, LeafKind::Input { requires_grad })
    }

    /// Appends an op. Saved tensors are only retained (and counted) when at
    /// least one input requires a gradient.
    pub fn record(&mut self, op: OpRecord) -> Result<NodeId> {
        for input in &op.inputs {
            if input.0 >= self.nodes.len() {
                return Err(LorsError::graph(format!("op {} references dangling node {input}", op.name)));
            }
        }
        if self.consumed {
            return Err(LorsError::graph("cannot record on a consumed tape"));
        }
        let requires_grad = op.inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let (saved, backward) = if requires_grad { (op.saved, Some(op.backward)) } else { (Vec::new(), None) };
        let count: u64 = saved.iter().map(|s| s.tensor.elements()).sum();
        self.counters.add_saved(count);
        self.saved.push(count);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            name: op.name,
            inputs: op.inputs,
            value: Rc::new(op.output),
            leaf: None,
            requires_grad,
            saved,
            backward,
        });
        Ok(id)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or_else(|| LorsError::graph(format!("unknown node {id}")))
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    pub fn value_rc(&self, id: NodeId) -> Rc<DenseMatrix> {
        Rc::clone(&self.nodes[id.0].value)
    }

    pub fn op_name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        self.nodes[id.0].leaf
    }

    /// Saved tensors still held by a node (empty after its backward ran).
    pub fn saved_tensors(&self, id: NodeId) -> &[SavedTensor] {
        &self.nodes[id.0].saved
    }

    /// Every saved tensor still held on the tape, in recording order.
    pub fn all_saved_tensors(&self) -> Vec<SavedTensor> {
        self.nodes.iter().flat_map(|n| n.saved.iter().cloned()).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counters(&self) -> &CostCounters {
        &self.counters
    }

    pub fn counters_mut(&mut self) -> &mut CostCounters {
        &mut self.counters
    }

    pub fn saved_context(&self) -> &SavedContext {
        &self.saved
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// How many backward closures have run on this tape.
    pub fn invocations(&self) -> usize {
        self.invocations
    }

    /// Non-leaf ancestors of `output` (inclusive) that carry a gradient path.
    pub fn participating_nodes(&self, output: NodeId) -> usize {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![output];
        let mut count = 0;
        while let Some(id) = stack.pop() {
            if seen[id.0] {
                continue;
            }
            seen[id.0] = true;
            let node = &self.nodes[id.0];
            if node.leaf.is_none() && node.requires_grad {
                count += 1;
                stack.extend(node.inputs.iter().copied());
            }
        }
        count
    }

    /// Backward from a scalar (1×1) loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        let shape = self.node(loss)?.value.shape();
        if shape != (1, 1) {
            return Err(LorsError::graph(format!("loss node must be 1x1, got {shape:?}")));
        }
        self.backward_seeded(loss, DenseMatrix::ones(1, 1))
    }

    /// Backward from an arbitrary output with an explicit upstream gradient.
    pub fn backward_seeded(&mut self, output: NodeId, seed: DenseMatrix) -> Result<Gradients> {
        self.backward_with_hook(output, seed, &mut |_| Ok(()))
    }

    /// Backward pass that calls `hook` just before each op's backward runs.
    ///
    /// Nodes are visited in reverse recording order. Each node's backward is
    /// invoked exactly once; afterwards its saved tensors are released. When a
    /// node feeds several consumers, their contributions are summed in the
    /// order the consumers were recorded.
    pub fn backward_with_hook(
        &mut self,
        output: NodeId,
        seed: DenseMatrix,
        hook: &mut dyn FnMut(BackwardVisit<'_>) -> Result<()>,
    ) -> Result<Gradients> {
        if self.consumed {
            return Err(LorsError::graph("backward called on a consumed tape"));
        }
        let out_shape = self.node(output)?.value.shape();
        if seed.shape() != out_shape {
            return Err(LorsError::shape("backward seed", seed.shape(), out_shape));
        }
        self.consumed = true;
        self.counters.set_phase(Phase::Backward);
        let result = self.run_backward(output, seed, hook);
        self.counters.set_phase(Phase::Forward);
        result
    }

    fn run_backward(
        &mut self,
        output: NodeId,
        seed: DenseMatrix,
        hook: &mut dyn FnMut(BackwardVisit<'_>) -> Result<()>,
    ) -> Result<Gradients> {
        // pending[i] holds (consumer index, contribution) pairs.
        let mut pending: Vec<Vec<(usize, DenseMatrix)>> = (0..self.nodes.len()).map(|_| Vec::new()).collect();
        pending[output.0].push((usize::MAX, seed));
        let mut grads = Gradients::default();

        for idx in (0..=output.0).rev() {
            if pending[idx].is_empty() {
                continue;
            }
            let mut parts = std::mem::take(&mut pending[idx]);
            parts.sort_by_key(|(consumer, _)| *consumer);
            let mut iter = parts.into_iter();
            let (_, mut g) = iter.next().expect("nonempty");
            for (_, more) in iter {
                g = self.counters.add(&g, &more)?;
            }

            if self.nodes[idx].leaf.is_some() {
                if self.nodes[idx].requires_grad {
                    grads.by_node.insert(NodeId(idx), g);
                }
                continue;
            }
            let Some(backward) = self.nodes[idx].backward.take() else {
                continue;
            };
            let inputs: Vec<NodeId> = self.nodes[idx].inputs.clone();
            hook(BackwardVisit {
                node: NodeId(idx),
                op: &self.nodes[idx].name,
                upstream: &g,
                inputs: inputs.iter().map(|i| Rc::clone(&self.nodes[i.0].value)).collect(),
            })?;
            let input_grads = backward(&g, &mut self.counters)?;
            self.invocations += 1;
            self.nodes[idx].saved.clear();
            self.saved.release(idx)?;
            if input_grads.len() != inputs.len() {
                return Err(LorsError::graph(format!(
                    "op {} returned {} gradients for {} inputs",
                    self.nodes[idx].name,
                    input_grads.len(),
                    inputs.len()
                )));
            }
            for (input, ig) in inputs.into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let expect = self.nodes[input.0].value.shape();
                if ig.shape() != expect {
                    return Err(LorsError::shape("gradient", ig.shape(), expect));
                }
                pending[input.0].push((idx, ig));
            }
        }
        Ok(grads)
    }
}

//! SPP: the adapter update is `W̃ ⊙ Repeat₁(A, C/r) ⊙ Repeat₀(B, R)`, which
//! equals `W̃ ⊙ (A·B̂)` with `B̂ = [diag(B₁) … diag(B_{C/r})]`. The layer runs
//! the block-diagonal form on a nested tape, so its backward is derived by
//! the tape rather than written by hand.

use std::rc::Rc;
use std::sync::Arc;

use super::{check_upstream, consumed_error, AdaptedLayer, LayerGrads};
use crate::error::{LorsError, Result};
use crate::graph::{CostCounters, NodeId, SavedTensor, Tape};
use crate::prune::SparseWeight;
use crate::tensor::{self, DenseMatrix, RngState};

/// `B̂ (r×C)` with entry `(p, j)` equal to `B[j]` when `j mod r == p`.
pub fn block_diag_b(b: &DenseMatrix, r: usize) -> Result<DenseMatrix> {
    if b.rows() != 1 || r == 0 || !b.cols().is_multiple_of(r) {
        return Err(LorsError::arg(format!("B must be 1xC with r | C, got {:?} and r={r}", b.shape())));
    }
    Ok(DenseMatrix::from_fn(r, b.cols(), |p, j| if j % r == p { b.get(0, j) } else { 0.0 }))
}

/// `W̃ + W̃ ⊙ (A·B̂)`.
pub fn spp_block_diag_weight(base: &DenseMatrix, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let bhat = block_diag_b(b, a.cols())?;
    let ab = tensor::matmul(a, &bhat)?;
    tensor::add(base, &tensor::hadamard(base, &ab)?)
}

/// `W̃ + W̃ ⊙ Repeat₁(A, C/r) ⊙ Repeat₀(B, R)`, expanded literally.
pub fn spp_repeat_weight(base: &DenseMatrix, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let (rows, cols) = base.shape();
    let r = a.cols();
    if a.rows() != rows || b.shape() != (1, cols) || cols % r != 0 {
        return Err(LorsError::arg(format!(
            "SPP repeat needs A {rows}xr, B 1x{cols} and r | {cols}; got A {:?}, B {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let rep_a = DenseMatrix::from_fn(rows, cols, |i, j| a.get(i, j % r));
    let rep_b = DenseMatrix::from_fn(rows, cols, |_, j| b.get(0, j));
    let delta = tensor::hadamard(&tensor::hadamard(base, &rep_a)?, &rep_b)?;
    tensor::add(base, &delta)
}

struct Subgraph {
    tape: Tape,
    out: NodeId,
    x: NodeId,
    a: NodeId,
    b: NodeId,
}

/// Builds the adapter computation on a fresh tape.
fn build(base: &DenseMatrix, a: &DenseMatrix, b: &DenseMatrix, x: &DenseMatrix, dropout: f64, rng: &mut RngState) -> Result<Subgraph> {
    let mut tape = Tape::new();
    let x_id = tape.input(x.clone(), true);
    let w_id = tape.constant(base.clone());
    let a_id = tape.param(a.clone());
    let b_id = tape.param(b.clone());
    let bhat = tape.block_diag_expand(b_id, a.cols())?;
    let ab = tape.matmul(a_id, bhat)?;
    let delta = tape.hadamard(w_id, ab)?;
    let out = if dropout == 0.0 {
        let adapted = tape.add(w_id, delta)?;
        tape.matmul(adapted, x_id)?
    } else {
        let y1 = tape.matmul(w_id, x_id)?;
        let xd = tape.dropout(x_id, dropout, rng)?;
        let y2 = tape.matmul(delta, xd)?;
        tape.add(y1, y2)?
    };
    Ok(Subgraph { tape, out, x: x_id, a: a_id, b: b_id })
}

pub struct SppContext {
    inner: Option<Inner>,
}

enum State {
    Live(Subgraph),
    /// Checkpointed: only `X` (and the dropout stream position) is kept.
    Checkpointed { x: Rc<DenseMatrix>, rng: RngState },
}

struct Inner {
    state: State,
    base: Arc<SparseWeight>,
    a: DenseMatrix,
    b: DenseMatrix,
    dropout: f64,
    has_bias: bool,
    rows: usize,
    cols_l: usize,
}

impl SppContext {
    pub fn saved(&self) -> Vec<SavedTensor> {
        match &self.inner {
            Some(Inner { state: State::Live(sub), .. }) => sub.tape.all_saved_tensors(),
            Some(Inner { state: State::Checkpointed { x, .. }, .. }) => vec![super::saved("x", x)],
            None => vec![],
        }
    }
}

/// Runs the SPP layer forward. `spp_gc` discards the nested tape and keeps
/// only `X`; `spp` keeps the tape for backward.
///
/// MACs (no dropout): `RCL + rRC + RC`.
pub fn spp_forward(
    layer: &AdaptedLayer,
    x: &DenseMatrix,
    rng: &mut RngState,
    cc: &mut CostCounters,
) -> Result<(DenseMatrix, SppContext)> {
    layer.check_input(x)?;
    let adapter = layer.spp_adapter()?;
    let base = layer.base_arc();
    let rng_at_start = rng.clone();
    let mut sub = build(base.values(), &adapter.a, &adapter.b, x, adapter.dropout, rng)?;
    cc.absorb(sub.tape.counters());
    sub.tape.counters_mut().reset();
    let mut y = sub.tape.value(sub.out).clone();
    if let Some(bias) = layer.bias() {
        y = cc.add_bias(&y, bias)?;
    }
    let state = if layer.variant() == super::Variant::SppGc {
        State::Checkpointed { x: Rc::new(x.clone()), rng: rng_at_start }
    } else {
        State::Live(sub)
    };
    let ctx = SppContext {
        inner: Some(Inner {
            state,
            base,
            a: adapter.a.clone(),
            b: adapter.b.clone(),
            dropout: adapter.dropout,
            has_bias: layer.bias().is_some(),
            rows: layer.shape().0,
            cols_l: x.cols(),
        }),
    };
    Ok((y, ctx))
}

/// Backward through the nested tape; the checkpointed form first replays the
/// forward, so its backward MACs are `3RCL + 3rRC + 2RC`.
pub fn spp_backward(ctx: &mut SppContext, dy: &DenseMatrix, cc: &mut CostCounters) -> Result<LayerGrads> {
    let s = ctx.inner.take().ok_or_else(|| consumed_error("spp"))?;
    check_upstream(dy, s.rows, s.cols_l)?;
    let mut sub = match s.state {
        State::Live(sub) => sub,
        State::Checkpointed { x, mut rng } => {
            let sub = build(s.base.values(), &s.a, &s.b, &x, s.dropout, &mut rng)?;
            cc.absorb(sub.tape.counters());
            let mut sub = sub;
            sub.tape.counters_mut().reset();
            sub
        }
    };
    let mut grads = sub.tape.backward_seeded(sub.out, dy.clone())?;
    cc.absorb(sub.tape.counters());
    let take = |g: &mut crate::graph::Gradients, id: NodeId| {
        g.take(id).ok_or_else(|| LorsError::graph("spp subgraph produced no gradient"))
    };
    let d_x = take(&mut grads, sub.x)?;
    let d_a = take(&mut grads, sub.a)?;
    let d_b = take(&mut grads, sub.b)?;
    let d_bias = s.has_bias.then(|| cc.row_sums(dy));
    Ok(LayerGrads { d_a, d_b, d_x, d_bias })
}

use std::rc::Rc;
use std::sync::Arc;

use super::{check_upstream, consumed_error, masked_merge, saved, AdaptedLayer, LayerGrads};
use crate::error::Result;
use crate::graph::{CostCounters, SavedTensor};
use crate::prune::SparseWeight;
use crate::tensor::DenseMatrix;

/// SQFT keeps `X`, `M` and the merged weight `I_w³`. The checkpointed
/// variant keeps only `X` and rebuilds `I_w³` in backward.
pub struct SqftContext {
    inner: Option<Inner>,
}

struct Inner {
    x: Rc<DenseMatrix>,
    /// `Some` only for the non-checkpointed schedule.
    kept: Option<(Rc<DenseMatrix>, Rc<DenseMatrix>)>,
    base: Arc<SparseWeight>,
    mask: Arc<DenseMatrix>,
    a: DenseMatrix,
    b: DenseMatrix,
    alpha: f64,
    has_bias: bool,
}

impl SqftContext {
    pub fn saved(&self) -> Vec<SavedTensor> {
        match &self.inner {
            Some(i) => {
                let mut out = vec![saved("x", &i.x)];
                if let Some((mask, merged)) = &i.kept {
                    out.push(saved("mask", mask));
                    out.push(saved("i_w3", merged));
                }
                out
            }
            None => vec![],
        }
    }

    pub fn is_checkpointed(&self) -> bool {
        self.inner.as_ref().is_some_and(|i| i.kept.is_none())
    }
}

fn forward(layer: &AdaptedLayer, x: &DenseMatrix, cc: &mut CostCounters, checkpoint: bool) -> Result<(DenseMatrix, SqftContext)> {
    layer.check_input(x)?;
    let pair = layer.low_rank()?;
    let base = layer.base_arc();
    let mask = layer.mask_arc();
    let merged = masked_merge(base.values(), &pair.a, &pair.b, pair.alpha, &mask, cc)?;
    let mut y = cc.matmul(&merged, x)?;
    if let Some(bias) = layer.bias() {
        y = cc.add_bias(&y, bias)?;
    }
    let kept = (!checkpoint).then(|| (Rc::new((*mask).clone()), Rc::new(merged)));
    let ctx = SqftContext {
        inner: Some(Inner {
            x: Rc::new(x.clone()),
            kept,
            base,
            mask,
            a: pair.a.clone(),
            b: pair.b.clone(),
            alpha: pair.alpha,
            has_bias: layer.bias().is_some(),
        }),
    };
    Ok((y, ctx))
}

/// `Y = (W̃ + α·AB ⊙ M)X` (+ bias).
///
/// MACs: `RCL + rRC + RC`. Saved: `2RC + CL`.
pub fn sqft_forward(layer: &AdaptedLayer, x: &DenseMatrix, cc: &mut CostCounters) -> Result<(DenseMatrix, SqftContext)> {
    forward(layer, x, cc, false)
}

/// Same numerics as [`sqft_forward`]; saves only `X` (`CL`).
pub fn sqft_gc_forward(layer: &AdaptedLayer, x: &DenseMatrix, cc: &mut CostCounters) -> Result<(DenseMatrix, SqftContext)> {
    forward(layer, x, cc, true)
}

/// Masked weight-gradient schedule:
/// `dX = I_w³ᵀdY`, `I_w⁴ = dY·Xᵀ`, `I_w⁵ = I_w⁴ ⊙ M`, `dA = α·I_w⁵Bᵀ`,
/// `dB = α·AᵀI_w⁵`.
///
/// MACs: `2RCL + 2rRC + RC`, plus `rRC + RC` when the merged weight has to be
/// recomputed (checkpointed context).
pub fn sqft_backward(ctx: &mut SqftContext, dy: &DenseMatrix, cc: &mut CostCounters) -> Result<LayerGrads> {
    let s = ctx.inner.take().ok_or_else(|| consumed_error("sqft"))?;
    check_upstream(dy, s.a.rows(), s.x.cols())?;
    let (mask, merged): (&DenseMatrix, Rc<DenseMatrix>) = match &s.kept {
        Some((mask, merged)) => (mask, Rc::clone(merged)),
        None => (&s.mask, Rc::new(masked_merge(s.base.values(), &s.a, &s.b, s.alpha, &s.mask, cc)?)),
    };
    let d_x = cc.matmul(&merged.transpose(), dy)?;
    let i_w4 = cc.matmul(dy, &s.x.transpose())?;
    let i_w5 = cc.hadamard(&i_w4, mask)?;
    let d_a = cc.matmul(&i_w5, &s.b.transpose())?;
    let d_a = cc.scale(&d_a, s.alpha);
    let d_b = cc.matmul(&s.a.transpose(), &i_w5)?;
    let d_b = cc.scale(&d_b, s.alpha);
    let d_bias = s.has_bias.then(|| cc.row_sums(dy));
    Ok(LayerGrads { d_a, d_b, d_x, d_bias })
}

/// Backward for a context produced by [`sqft_gc_forward`].
pub fn sqft_gc_backward(ctx: &mut SqftContext, dy: &DenseMatrix, cc: &mut CostCounters) -> Result<LayerGrads> {
    sqft_backward(ctx, dy, cc)
}

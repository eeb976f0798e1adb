use std::rc::Rc;
use std::sync::Arc;

use super::{check_upstream, consumed_error, fault, masked_merge, saved, AdaptedLayer, LayerGrads};
use crate::error::Result;
use crate::graph::{CostCounters, SavedTensor};
use crate::prune::SparseWeight;
use crate::tensor::DenseMatrix;

/// LoRS keeps only the layer input `X`.
pub struct LorsContext {
    inner: Option<Inner>,
}

struct Inner {
    x: Rc<DenseMatrix>,
    base: Arc<SparseWeight>,
    mask: Arc<DenseMatrix>,
    a: DenseMatrix,
    b: DenseMatrix,
    alpha: f64,
    has_bias: bool,
}

impl LorsContext {
    pub fn saved(&self) -> Vec<SavedTensor> {
        match &self.inner {
            Some(i) => vec![saved("x", &i.x)],
            None => vec![],
        }
    }
}

/// Builds `W^(t) = W̃ + α·AB ⊙ M`, applies it and drops it.
///
/// MACs: `RCL + rRC + RC`. Saved: `CL`.
pub fn lors_forward(layer: &AdaptedLayer, x: &DenseMatrix, cc: &mut CostCounters) -> Result<(DenseMatrix, LorsContext)> {
    layer.check_input(x)?;
    let pair = layer.low_rank()?;
    let base = layer.base_arc();
    let mask = layer.mask_arc();
    let merged = masked_merge(base.values(), &pair.a, &pair.b, pair.alpha, &mask, cc)?;
    let mut y = cc.matmul(&merged, x)?;
    drop(merged);
    if let Some(bias) = layer.bias() {
        y = cc.add_bias(&y, bias)?;
    }
    let ctx = LorsContext {
        inner: Some(Inner {
            x: Rc::new(x.clone()),
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

/// Recomputes the merged weight for `dX`, then forms the adapter gradients
/// through rank-`r` intermediates without the mask:
/// `I_w¹ = XᵀBᵀ`, `I_w² = AᵀdY`, `dA = α·dY·I_w¹`, `dB = α·I_w²·Xᵀ`.
///
/// MACs: `RCL + 2rRL + 2rCL + rRC + RC`.
pub fn lors_backward(ctx: &mut LorsContext, dy: &DenseMatrix, cc: &mut CostCounters) -> Result<LayerGrads> {
    let s = ctx.inner.take().ok_or_else(|| consumed_error("lors"))?;
    check_upstream(dy, s.a.rows(), s.x.cols())?;
    let merged = masked_merge(s.base.values(), &s.a, &s.b, s.alpha, &s.mask, cc)?;
    let d_x = cc.matmul(&merged.transpose(), dy)?;
    drop(merged);
    let i_w1 = cc.matmul(&s.x.transpose(), &s.b.transpose())?;
    let i_w2 = cc.matmul(&s.a.transpose(), dy)?;
    let d_a = cc.matmul(dy, &i_w1)?;
    let mut d_a = cc.scale(&d_a, s.alpha);
    let d_b = cc.matmul(&i_w2, &s.x.transpose())?;
    let d_b = cc.scale(&d_b, s.alpha);
    if fault::lors_sign_flip() {
        d_a = d_a.map(|v| -v);
    }
    if fault::lors_explicit_dw() {
        cc.matmul(dy, &s.x.transpose())?;
    }
    let d_bias = s.has_bias.then(|| cc.row_sums(dy));
    Ok(LayerGrads { d_a, d_b, d_x, d_bias })
}

use std::rc::Rc;
use std::sync::Arc;

use super::{check_upstream, consumed_error, saved, AdaptedLayer, LayerGrads};
use crate::error::Result;
use crate::graph::{CostCounters, SavedTensor};
use crate::prune::SparseWeight;
use crate::tensor::DenseMatrix;

/// Plain LoRA keeps `X` and `I_a² = BX`.
pub struct LoraContext {
    inner: Option<Inner>,
}

struct Inner {
    x: Rc<DenseMatrix>,
    i_a2: Rc<DenseMatrix>,
    base: Arc<SparseWeight>,
    a: DenseMatrix,
    b: DenseMatrix,
    alpha: f64,
    has_bias: bool,
}

impl LoraContext {
    pub fn saved(&self) -> Vec<SavedTensor> {
        match &self.inner {
            Some(i) => vec![saved("x", &i.x), saved("i_a2", &i.i_a2)],
            None => vec![],
        }
    }
}

/// `Y = W̃X + α·A(BX)` (+ bias).
///
/// MACs: `RCL + rCL + rRL`. Saved: `CL + rL`.
pub fn lora_forward(layer: &AdaptedLayer, x: &DenseMatrix, cc: &mut CostCounters) -> Result<(DenseMatrix, LoraContext)> {
    layer.check_input(x)?;
    let pair = layer.low_rank()?;
    let base = layer.base_arc();
    let i_a1 = cc.matmul(base.values(), x)?;
    let i_a2 = cc.matmul(&pair.b, x)?;
    let i_a3 = cc.matmul(&pair.a, &i_a2)?;
    let i_a3 = cc.scale(&i_a3, pair.alpha);
    let mut y = cc.add(&i_a1, &i_a3)?;
    if let Some(bias) = layer.bias() {
        y = cc.add_bias(&y, bias)?;
    }
    let ctx = LoraContext {
        inner: Some(Inner {
            x: Rc::new(x.clone()),
            i_a2: Rc::new(i_a2),
            base,
            a: pair.a.clone(),
            b: pair.b.clone(),
            alpha: pair.alpha,
            has_bias: layer.bias().is_some(),
        }),
    };
    Ok((y, ctx))
}

/// MACs: `RCL + 2rRL + 2rCL`.
pub fn lora_backward(ctx: &mut LoraContext, dy: &DenseMatrix, cc: &mut CostCounters) -> Result<LayerGrads> {
    let s = ctx.inner.take().ok_or_else(|| consumed_error("lora"))?;
    check_upstream(dy, s.a.rows(), s.x.cols())?;
    let d_a = cc.matmul(dy, &s.i_a2.transpose())?;
    let d_a = cc.scale(&d_a, s.alpha);
    let i_a4 = cc.matmul(&s.a.transpose(), dy)?;
    let d_b = cc.matmul(&i_a4, &s.x.transpose())?;
    let d_b = cc.scale(&d_b, s.alpha);
    let i_a5 = cc.matmul(&s.base.values().transpose(), dy)?;
    let i_a6 = cc.matmul(&s.b.transpose(), &i_a4)?;
    let i_a6 = cc.scale(&i_a6, s.alpha);
    let d_x = cc.add(&i_a5, &i_a6)?;
    let d_bias = s.has_bias.then(|| cc.row_sums(dy));
    Ok(LayerGrads { d_a, d_b, d_x, d_bias })
}

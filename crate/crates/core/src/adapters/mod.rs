//! Adapter layer variants and their forward/backward schedules.
//!
//! Shapes follow the column convention: a layer maps `X ∈ ℝ^{C×L}` (one
//! column per token) to `Y ∈ ℝ^{R×L}` through a sparse base `W̃ ∈ ℝ^{R×C}`.
//!
//! | variant   | forward                                   | kept for backward |
//! |-----------|-------------------------------------------|-------------------|
//! | `lora`    | `W̃X + α·A(BX)`                            | `X`, `BX`         |
//! | `sqft`    | `(W̃ + αAB ⊙ M)X`                          | `X`, `M`, merged  |
//! | `sqft_gc` | same as `sqft`, merged weight recomputed   | `X`               |
//! | `spp`     | `(W̃ + W̃ ⊙ (A·B̂))X`, tape-derived backward | tape saves        |
//! | `spp_gc`  | same as `spp`, adapter branch recomputed   | `X`               |
//! | `lors`    | `(W̃ + αAB ⊙ M)X`, weight recomputed, STE   | `X`               |
//!
//! LoRS drops the mask from the adapter gradients (straight-through) and
//! contracts `XᵀBᵀ` and `AᵀdY` first, so no `R×C×L` product is needed for
//! `dA`/`dB`.

mod cost;
mod lora;
mod lors;
mod spp;
mod sqft;

pub use cost::{predict_cost, CostPrediction};
pub use lora::{lora_backward, lora_forward, LoraContext};
pub use lors::{lors_backward, lors_forward, LorsContext};
pub use spp::{block_diag_b, spp_backward, spp_block_diag_weight, spp_forward, spp_repeat_weight, SppContext};
pub use sqft::{sqft_backward, sqft_forward, sqft_gc_backward, sqft_gc_forward, SqftContext};

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LorsError, Result};
use crate::graph::{CostCounters, NodeId, OpRecord, SavedTensor, Tape};
use crate::prune::SparseWeight;
use crate::tensor::{DenseMatrix, RngState};

/// Default scaling factor applied to the adapter product.
pub const DEFAULT_ALPHA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lora,
    Sqft,
    SqftGc,
    Spp,
    SppGc,
    Lors,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Lora, Variant::Sqft, Variant::SqftGc, Variant::Spp, Variant::SppGc, Variant::Lors];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lora => "lora",
            Variant::Sqft => "sqft",
            Variant::SqftGc => "sqft_gc",
            Variant::Spp => "spp",
            Variant::SppGc => "spp_gc",
            Variant::Lors => "lors",
        }
    }

    pub fn is_spp(self) -> bool {
        matches!(self, Variant::Spp | Variant::SppGc)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = LorsError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| LorsError::arg(format!("unknown variant {s:?}")))
    }
}

/// Low-rank factors `A (R×r)`, `B (r×C)` and the scaling factor `α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub alpha: f64,
}

impl AdapterPair {
    pub fn new(a: DenseMatrix, b: DenseMatrix, alpha: f64) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(LorsError::shape("adapter pair", a.shape(), b.shape()));
        }
        let r = a.cols();
        if r > a.rows().min(b.cols()) {
            return Err(LorsError::arg(format!(
                "adapter rank {r} exceeds min(R, C) = {}",
                a.rows().min(b.cols())
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LorsError::arg(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { a, b, alpha })
    }

    pub fn zeros(out_dim: usize, in_dim: usize, rank: usize, alpha: f64) -> Result<Self> {
        if rank == 0 {
            return Err(LorsError::arg("adapter rank must be at least 1"));
        }
        Self::new(DenseMatrix::zeros(out_dim, rank), DenseMatrix::zeros(rank, in_dim), alpha)
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }
}

/// SPP factors: `A (R×r)` and `B (1×C)` with `r | C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SppAdapter {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    /// Dropout probability on the adapter branch input; 0 disables it.
    #[serde(default)]
    pub dropout: f64,
}

impl SppAdapter {
    pub fn new(a: DenseMatrix, b: DenseMatrix, dropout: f64) -> Result<Self> {
        if b.rows() != 1 {
            return Err(LorsError::arg(format!("SPP B must be 1xC, got {:?}", b.shape())));
        }
        let (r, c) = (a.cols(), b.cols());
        if c % r != 0 {
            return Err(LorsError::arg(format!("SPP rank {r} must divide the input dimension {c}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(LorsError::arg(format!("dropout must be in [0, 1), got {dropout}")));
        }
        Ok(Self { a, b, dropout })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adapter {
    LowRank(AdapterPair),
    Spp(SppAdapter),
}

impl Adapter {
    pub fn rank(&self) -> usize {
        match self {
            Adapter::LowRank(p) => p.rank(),
            Adapter::Spp(s) => s.rank(),
        }
    }

    /// `(A, B)` regardless of kind.
    pub fn factors(&self) -> (&DenseMatrix, &DenseMatrix) {
        match self {
            Adapter::LowRank(p) => (&p.a, &p.b),
            Adapter::Spp(s) => (&s.a, &s.b),
        }
    }

    pub fn factors_mut(&mut self) -> (&mut DenseMatrix, &mut DenseMatrix) {
        match self {
            Adapter::LowRank(p) => (&mut p.a, &mut p.b),
            Adapter::Spp(s) => (&mut s.a, &mut s.b),
        }
    }
}

/// A frozen sparse base weight plus trainable adapter (and optional bias).
///
/// The 0/1 mask of the base is captured once at construction and reused by
/// every schedule and by [`merge`].
#[derive(Debug, Clone)]
pub struct AdaptedLayer {
    base: Arc<SparseWeight>,
    mask: Arc<DenseMatrix>,
    adapter: Adapter,
    bias: Option<DenseMatrix>,
    variant: Variant,
    dropout_rng: RngState,
}

impl AdaptedLayer {
    pub fn new(base: SparseWeight, adapter: Adapter, bias: Option<DenseMatrix>, variant: Variant) -> Result<Self> {
        let (r_out, c_in) = base.shape();
        match (&adapter, variant.is_spp()) {
            (Adapter::LowRank(_), false) | (Adapter::Spp(_), true) => {}
            _ => return Err(LorsError::arg(format!("adapter kind does not fit variant {variant}"))),
        }
        let (a, b) = adapter.factors();
        if a.rows() != r_out || b.cols() != c_in {
            return Err(LorsError::shape("adapted layer", base.shape(), (a.rows(), b.cols())));
        }
        if let Some(bias) = &bias {
            if bias.shape() != (r_out, 1) {
                return Err(LorsError::shape("bias", bias.shape(), (r_out, 1)));
            }
        }
        let mask = Arc::new(base.mask());
        Ok(Self { base: Arc::new(base), mask, adapter, bias, variant, dropout_rng: RngState::new(0) })
    }

    /// Layer with a zero adapter of the right kind for `variant`.
    pub fn with_zero_adapter(
        base: SparseWeight,
        variant: Variant,
        rank: usize,
        alpha: f64,
        bias: Option<DenseMatrix>,
    ) -> Result<Self> {
        let (r_out, c_in) = base.shape();
        let adapter = if variant.is_spp() {
            if rank == 0 {
                return Err(LorsError::arg("adapter rank must be at least 1"));
            }
            Adapter::Spp(SppAdapter::new(DenseMatrix::zeros(r_out, rank), DenseMatrix::zeros(1, c_in), 0.0)?)
        } else {
            Adapter::LowRank(AdapterPair::zeros(r_out, c_in, rank, alpha)?)
        };
        Self::new(base, adapter, bias, variant)
    }

    pub fn base(&self) -> &SparseWeight {
        &self.base
    }

    pub(crate) fn base_arc(&self) -> Arc<SparseWeight> {
        Arc::clone(&self.base)
    }

    /// The mask captured at construction.
    pub fn mask(&self) -> &DenseMatrix {
        &self.mask
    }

    pub(crate) fn mask_arc(&self) -> Arc<DenseMatrix> {
        Arc::clone(&self.mask)
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut Adapter {
        &mut self.adapter
    }

    /// Replaces the adapter. The kind must fit the variant and the outer
    /// dimensions must match the base; the rank may change.
    pub fn set_adapter(&mut self, adapter: Adapter) -> Result<()> {
        let (a, b) = adapter.factors();
        let (rows, cols) = self.shape();
        if std::mem::discriminant(&adapter) != std::mem::discriminant(&self.adapter) {
            return Err(LorsError::arg(format!("adapter kind does not fit variant {}", self.variant)));
        }
        if a.rows() != rows || b.cols() != cols {
            return Err(LorsError::shape("set_adapter", (a.rows(), b.cols()), (rows, cols)));
        }
        self.adapter = adapter;
        Ok(())
    }

    pub fn bias(&self) -> Option<&DenseMatrix> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut DenseMatrix> {
        self.bias.as_mut()
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// `A`, `B` and, when asked and present, the bias, in that order.
    pub fn trainable_mut(&mut self, with_bias: bool) -> Vec<&mut DenseMatrix> {
        let (a, b) = self.adapter.factors_mut();
        let mut out = vec![a, b];
        if with_bias {
            out.extend(self.bias.as_mut());
        }
        out
    }

    /// `(R, C)`.
    pub fn shape(&self) -> (usize, usize) {
        self.base.shape()
    }

    pub fn rank(&self) -> usize {
        self.adapter.rank()
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = RngState::new(seed);
    }

    pub(crate) fn low_rank(&self) -> Result<&AdapterPair> {
        match &self.adapter {
            Adapter::LowRank(p) => Ok(p),
            Adapter::Spp(_) => Err(LorsError::arg(format!("variant {} has no low-rank pair", self.variant))),
        }
    }

    pub(crate) fn spp_adapter(&self) -> Result<&SppAdapter> {
        match &self.adapter {
            Adapter::Spp(s) => Ok(s),
            Adapter::LowRank(_) => Err(LorsError::arg(format!("variant {} has no SPP adapter", self.variant))),
        }
    }

    pub(crate) fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.rows() != self.shape().1 {
            return Err(LorsError::shape("adapted layer input", self.shape(), x.shape()));
        }
        Ok(())
    }

    /// Forward without keeping anything for backward and with dropout off.
    /// Matches [`AdaptedLayer::forward`] bitwise when dropout is disabled.
    pub fn infer(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut scratch = CostCounters::new();
        match self.variant {
            Variant::Lora => Ok(lora_forward(self, x, &mut scratch)?.0),
            Variant::Sqft | Variant::SqftGc => Ok(sqft_gc_forward(self, x, &mut scratch)?.0),
            Variant::Lors => Ok(lors_forward(self, x, &mut scratch)?.0),
            Variant::Spp | Variant::SppGc => {
                self.check_input(x)?;
                let s = self.spp_adapter()?;
                let w = spp_block_diag_weight(self.base.values(), &s.a, &s.b)?;
                let y = crate::tensor::matmul(&w, x)?;
                match &self.bias {
                    Some(bias) => crate::tensor::add_column_broadcast(&y, bias),
                    None => Ok(y),
                }
            }
        }
    }

    /// Runs this layer's variant schedule forward.
    pub fn forward(&mut self, x: &DenseMatrix, cc: &mut CostCounters) -> Result<(DenseMatrix, LayerContext)> {
        Ok(match self.variant {
            Variant::Lora => {
                let (y, c) = lora_forward(self, x, cc)?;
                (y, LayerContext::Lora(c))
            }
            Variant::Sqft => {
                let (y, c) = sqft_forward(self, x, cc)?;
                (y, LayerContext::Sqft(c))
            }
            Variant::SqftGc => {
                let (y, c) = sqft_gc_forward(self, x, cc)?;
                (y, LayerContext::Sqft(c))
            }
            Variant::Spp | Variant::SppGc => {
                let mut rng = self.dropout_rng.clone();
                let out = spp_forward(self, x, &mut rng, cc)?;
                self.dropout_rng = rng;
                (out.0, LayerContext::Spp(out.1))
            }
            Variant::Lors => {
                let (y, c) = lors_forward(self, x, cc)?;
                (y, LayerContext::Lors(c))
            }
        })
    }
}

/// Gradients of one adapted layer. `d_a`/`d_b` have the adapter's shapes.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_a: DenseMatrix,
    pub d_b: DenseMatrix,
    pub d_x: DenseMatrix,
    pub d_bias: Option<DenseMatrix>,
}

/// Whatever a variant keeps between forward and backward.
pub enum LayerContext {
    Lora(LoraContext),
    Sqft(SqftContext),
    Spp(SppContext),
    Lors(LorsContext),
}

impl LayerContext {
    /// Tensors retained for backward; the counted saved elements.
    pub fn saved(&self) -> Vec<SavedTensor> {
        match self {
            LayerContext::Lora(c) => c.saved(),
            LayerContext::Sqft(c) => c.saved(),
            LayerContext::Spp(c) => c.saved(),
            LayerContext::Lors(c) => c.saved(),
        }
    }

    pub fn saved_elements(&self) -> u64 {
        self.saved().iter().map(|s| s.tensor.elements()).sum()
    }

    pub fn backward(&mut self, dy: &DenseMatrix, cc: &mut CostCounters) -> Result<LayerGrads> {
        match self {
            LayerContext::Lora(c) => lora_backward(c, dy, cc),
            LayerContext::Sqft(c) => sqft_backward(c, dy, cc),
            LayerContext::Spp(c) => spp_backward(c, dy, cc),
            LayerContext::Lors(c) => lors_backward(c, dy, cc),
        }
    }
}

/// Tape leaves created for one adapted layer.
#[derive(Debug, Clone, Copy)]
pub struct AdaptedNode {
    pub output: NodeId,
    pub a: NodeId,
    pub b: NodeId,
    pub bias: Option<NodeId>,
}

/// Records `layer` applied to `x` as a single op on `tape`, with the adapter
/// factors (and bias) as parameter leaves.
pub fn adapted_linear(tape: &mut Tape, layer: &mut AdaptedLayer, x: NodeId) -> Result<AdaptedNode> {
    let (a, b) = layer.adapter().factors();
    let a_id = tape.param(a.clone());
    let b_id = tape.param(b.clone());
    let bias_id = layer.bias().map(|bias| tape.param(bias.clone()));
    let xv = tape.value_rc(x);
    let (y, mut ctx) = layer.forward(&xv, tape.counters_mut())?;
    let saved = ctx.saved();
    let mut inputs = vec![x, a_id, b_id];
    inputs.extend(bias_id);
    let output = tape.record(OpRecord {
        name: format!("adapted_linear:{}", layer.variant()),
        inputs,
        output: y,
        saved,
        backward: Box::new(move |g, cc| {
            let grads = ctx.backward(g, cc)?;
            let mut out = vec![Some(grads.d_x), Some(grads.d_a), Some(grads.d_b)];
            if grads.d_bias.is_some() {
                out.push(grads.d_bias);
            }
            Ok(out)
        }),
    })?;
    Ok(AdaptedNode { output, a: a_id, b: b_id, bias: bias_id })
}

/// `W̃ + α·(AB) ⊙ M`. Shared by every masked low-rank schedule so their
/// merged weights agree bitwise.
pub(crate) fn masked_merge(
    base: &DenseMatrix,
    pair_a: &DenseMatrix,
    pair_b: &DenseMatrix,
    alpha: f64,
    mask: &DenseMatrix,
    cc: &mut CostCounters,
) -> Result<DenseMatrix> {
    let ab = cc.matmul(pair_a, pair_b)?;
    let scaled = cc.scale(&ab, alpha);
    let masked = cc.hadamard(&scaled, mask)?;
    cc.add(base, &masked)
}

/// The final sparse weight `W̃ + α·AB ⊙ M` (SPP: `W̃ + W̃ ⊙ (A·B̂)`), masked
/// with the original mask so its pattern never grows.
pub fn merge(layer: &AdaptedLayer) -> Result<SparseWeight> {
    let mut scratch = CostCounters::new();
    let base = layer.base().values();
    let values = match layer.adapter() {
        Adapter::LowRank(p) => masked_merge(base, &p.a, &p.b, p.alpha, layer.mask(), &mut scratch)?,
        Adapter::Spp(s) => {
            let w = spp_block_diag_weight(base, &s.a, &s.b)?;
            crate::tensor::hadamard(&w, layer.mask())?
        }
    };
    Ok(SparseWeight::new(values, layer.base().sparsity()))
}

pub(crate) fn consumed_error(what: &str) -> LorsError {
    LorsError::graph(format!("{what} context already consumed"))
}

pub(crate) fn check_upstream(dy: &DenseMatrix, rows: usize, cols: usize) -> Result<()> {
    if dy.shape() != (rows, cols) {
        return Err(LorsError::shape("upstream gradient", dy.shape(), (rows, cols)));
    }
    Ok(())
}

pub(crate) fn saved(label: &str, m: &Rc<DenseMatrix>) -> SavedTensor {
    SavedTensor::new(label, Rc::clone(m))
}

/// Test hooks that corrupt the LoRS backward pass on the current thread.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static LORS_SIGN_FLIP: Cell<bool> = const { Cell::new(false) };
        static LORS_EXPLICIT_DW: Cell<bool> = const { Cell::new(false) };
    }

    /// Makes the LoRS backward also materialise `dY·Xᵀ`, as a naive schedule
    /// would; gradients are unchanged but the MAC count no longer matches.
    pub fn set_lors_explicit_dw(on: bool) {
        LORS_EXPLICIT_DW.with(|f| f.set(on));
    }

    pub(crate) fn lors_explicit_dw() -> bool {
        LORS_EXPLICIT_DW.with(|f| f.get())
    }

    /// Flips the sign of `dA` produced by the LoRS backward on this thread.
    pub fn set_lors_sign_flip(on: bool) {
        LORS_SIGN_FLIP.with(|f| f.set(on));
    }

    pub(crate) fn lors_sign_flip() -> bool {
        LORS_SIGN_FLIP.with(|f| f.get())
    }
}

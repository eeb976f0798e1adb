//! Adapter initialisation: zero/random starts and the gradient-SVD start.
//!
//! The gradient start picks `B⁽⁰⁾` to minimise `‖dW − dW·BᵀB‖_F` over
//! matrices with orthonormal rows, where `dW = dY·Xᵀ` is the weight gradient
//! of the first training step at `A = 0`. The minimiser is the top-`r` right
//! singular vectors of `dW`. With `A⁽⁰⁾ = 0`, one gradient step then moves
//! the effective weight by `−lr·α²·dW·B⁽⁰⁾ᵀB⁽⁰⁾`, the best rank-`r` proxy of a
//! full gradient step.

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterPair, AdaptedLayer, SppAdapter};
use crate::error::{LorsError, Result};
use crate::graph::Tape;
use crate::tensor::{self, svd, DenseMatrix, RngState};
use crate::train::{Batch, Head, Target, ToyModel};

/// One loss evaluation's worth of inputs and targets. The target kind
/// selects the loss.
pub type ProbeBatch = Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    ZeroARandomB,
    ZeroAZeroB,
    GradientSvd,
}

impl std::str::FromStr for InitStrategy {
    type Err = LorsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "zero_a_random_b" | "random" => Ok(InitStrategy::ZeroARandomB),
            "zero_a_zero_b" | "zero" => Ok(InitStrategy::ZeroAZeroB),
            "gradient_svd" | "svd" => Ok(InitStrategy::GradientSvd),
            other => Err(LorsError::arg(format!("unknown init strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitSpec {
    pub strategy: InitStrategy,
    pub seed: u64,
    /// Standard deviation of random `B`; `None` means `1/√C` per layer.
    pub std: Option<f64>,
    /// Samples in the gradient probe batch.
    pub probe_size: usize,
    /// Mask `dW` with the base pattern before the SVD. Off by default: the
    /// adapter gradients are straight-through, so the unmasked `dW` is what
    /// the first step actually follows.
    pub mask_gradient: bool,
    /// Multiplier on the orthonormal `B⁽⁰⁾` rows.
    pub svd_scale: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self { strategy: InitStrategy::GradientSvd, seed: 0, std: None, probe_size: 32, mask_gradient: false, svd_scale: 1.0 }
    }
}

impl InitSpec {
    pub fn with_strategy(strategy: InitStrategy) -> Self {
        Self { strategy, ..Self::default() }
    }
}

/// `A = 0`, `B ~ N(0, std²)` from `seed`. SPP layers get a `1×C` row.
pub fn init_zero_random(layer: &AdaptedLayer, seed: u64, std: f64) -> Result<Adapter> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(LorsError::arg(format!("std must be nonnegative, got {std}")));
    }
    let (rows, cols) = layer.shape();
    let r = layer.rank();
    let mut rng = RngState::new(seed);
    match layer.adapter() {
        Adapter::LowRank(p) => {
            let b = DenseMatrix::random_normal(r, cols, &mut rng, 0.0, std);
            Ok(Adapter::LowRank(AdapterPair::new(DenseMatrix::zeros(rows, r), b, p.alpha)?))
        }
        Adapter::Spp(s) => {
            let b = DenseMatrix::random_normal(1, cols, &mut rng, 0.0, std);
            Ok(Adapter::Spp(SppAdapter::new(DenseMatrix::zeros(rows, r), b, s.dropout)?))
        }
    }
}

fn zero_adapter(layer: &AdaptedLayer) -> Result<Adapter> {
    init_zero_random(layer, 0, 0.0)
}

/// Per-layer outcome of the gradient-SVD start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSvdStats {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub grad_norm: f64,
    /// `‖dW − dW·BᵀB‖_F` with the orthonormal rows.
    pub residual: f64,
    /// `sqrt(Σ_{i>r} σᵢ²)`.
    pub tail_norm: f64,
    pub singular_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSvdReport {
    pub layers: Vec<LayerSvdStats>,
    /// Most full `R×C` gradients alive at once during the pass.
    pub peak_dense_gradients: usize,
    /// Largest number of gradient elements alive at once.
    pub peak_gradient_elements: u64,
}

#[derive(Default)]
struct GradientProbe {
    live: usize,
    live_elements: u64,
    peak: usize,
    peak_elements: u64,
}

impl GradientProbe {
    fn alloc(&mut self, m: &DenseMatrix) {
        self.live += 1;
        self.live_elements += m.elements();
        self.peak = self.peak.max(self.live);
        self.peak_elements = self.peak_elements.max(self.live_elements);
    }

    fn release(&mut self, m: DenseMatrix) {
        self.live -= 1;
        self.live_elements -= m.elements();
    }
}

/// Rank-`r` right singular basis of `dw` and its statistics.
fn svd_rows(dw: &DenseMatrix, r: usize, layer: usize) -> Result<(DenseMatrix, LayerSvdStats)> {
    let dec = svd(dw)?;
    let rows = dec.top_right_rows(r);
    let proj = tensor::matmul(&tensor::matmul(dw, &rows.transpose())?, &rows)?;
    let residual = tensor::sub(dw, &proj)?.frobenius_norm();
    let stats = LayerSvdStats {
        layer,
        rows: dw.rows(),
        cols: dw.cols(),
        rank: r,
        grad_norm: dw.frobenius_norm(),
        residual,
        tail_norm: dec.tail_norm(r),
        singular_values: dec.s,
    };
    Ok((rows, stats))
}

/// Sets every layer to `A = 0`, `B = svd_scale · V_{:r}ᵀ` of its first-step
/// weight gradient on `probe`.
///
/// All layers are handled in one backward pass: a hook sees each adapted
/// layer's upstream `dY` and input `X` just before that layer's backward,
/// forms `dW = dY·Xᵀ`, decomposes it and drops it, so at most one dense
/// gradient is alive at a time. Because every `A` is zero, the adapters do
/// not feed into any `dY`, which makes the single pass equivalent to
/// visiting the layers one by one.
pub fn init_gradient_svd(model: &mut ToyModel, probe: &ProbeBatch, rank: usize, spec: &InitSpec) -> Result<GradientSvdReport> {
    if probe.is_empty() {
        return Err(LorsError::arg("gradient_svd needs a nonempty probe batch"));
    }
    for layer in model.layers() {
        let (rows, cols) = layer.shape();
        if matches!(layer.adapter(), Adapter::Spp(_)) {
            return Err(LorsError::arg(format!("gradient_svd needs a low-rank adapter, not {}", layer.variant())));
        }
        if rank == 0 || rank > rows.min(cols) {
            return Err(LorsError::arg(format!("rank {rank} must lie in 1..=min(R, C) = {}", rows.min(cols))));
        }
    }
    for layer in model.layers_mut() {
        let zero = zero_adapter(layer)?;
        layer.set_adapter(zero)?;
    }

    let mut tape = Tape::new();
    let x = tape.input(probe.x.clone(), false);
    let nodes = model.forward(&mut tape, x)?;
    let loss = model.loss(&mut tape, nodes.output, &probe.target)?;
    let by_node: BTreeMap<_, _> = nodes.layers.iter().enumerate().map(|(i, n)| (n.output, i)).collect();
    let masks: Vec<DenseMatrix> = model.layers().iter().map(|l| l.mask().clone()).collect();

    let probe_mem = RefCell::new(GradientProbe::default());
    let found: RefCell<Vec<Option<(DenseMatrix, LayerSvdStats)>>> = RefCell::new(vec![None; masks.len()]);
    tape.backward_with_hook(loss, DenseMatrix::ones(1, 1), &mut |visit| {
        let Some(&i) = by_node.get(&visit.node) else { return Ok(()) };
        let mut dw = tensor::matmul(visit.upstream, &visit.inputs[0].transpose())?;
        probe_mem.borrow_mut().alloc(&dw);
        if spec.mask_gradient {
            dw = tensor::hadamard(&dw, &masks[i])?;
        }
        let result = svd_rows(&dw, rank, i);
        probe_mem.borrow_mut().release(dw);
        found.borrow_mut()[i] = Some(result?);
        Ok(())
    })?;

    let mut stats = Vec::with_capacity(masks.len());
    for (i, entry) in found.into_inner().into_iter().enumerate() {
        let (rows, s) = entry.ok_or_else(|| LorsError::graph(format!("layer {i} was not reached by the probe loss")))?;
        let layer = &mut model.layers_mut()[i];
        let alpha = match layer.adapter() {
            Adapter::LowRank(p) => p.alpha,
            Adapter::Spp(_) => unreachable!("checked above"),
        };
        let b = tensor::scale(&rows, spec.svd_scale);
        let pair = AdapterPair::new(DenseMatrix::zeros(layer.shape().0, rank), b, alpha)?;
        layer.set_adapter(Adapter::LowRank(pair))?;
        stats.push(s);
    }
    let mem = probe_mem.into_inner();
    Ok(GradientSvdReport { layers: stats, peak_dense_gradients: mem.peak, peak_gradient_elements: mem.peak_elements })
}

/// Applies `spec` to every layer. `probe` is required for the gradient start.
pub fn initialize(model: &mut ToyModel, spec: &InitSpec, probe: Option<&ProbeBatch>) -> Result<Option<GradientSvdReport>> {
    match spec.strategy {
        InitStrategy::GradientSvd => {
            let probe = probe.ok_or_else(|| LorsError::arg("gradient_svd requires a probe batch"))?;
            let rank = model.layers()[0].rank();
            init_gradient_svd(model, probe, rank, spec).map(Some)
        }
        InitStrategy::ZeroARandomB | InitStrategy::ZeroAZeroB => {
            let base = RngState::new(spec.seed);
            for (i, layer) in model.layers_mut().iter_mut().enumerate() {
                let std = match spec.strategy {
                    InitStrategy::ZeroAZeroB => 0.0,
                    _ => spec.std.unwrap_or(1.0 / (layer.shape().1 as f64).sqrt()),
                };
                let seed = base.fork(i as u64).next_u64();
                let adapter = init_zero_random(layer, seed, std)?;
                layer.set_adapter(adapter)?;
            }
            Ok(None)
        }
    }
}

/// Residuals of one plain gradient step against the rank-`r` update identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstStepReport {
    /// `‖ΔW − (−lr·α²·dW·BᵀB)‖_F / ‖dW‖_F`, with `ΔW = α(A⁽¹⁾B⁽¹⁾ − A⁽⁰⁾B⁽⁰⁾)`
    /// taken without the mask.
    pub residual: f64,
    /// Same, with `ΔW` masked by the base pattern.
    pub masked_residual: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub alpha: f64,
}

/// Takes one gradient-descent step of rate `lr` on a single layer with a
/// squared-error loss against `probe` and compares the weight change with
/// `−lr·α²·dW·BᵀB`. Exact (up to rounding) when `A = 0` before the step.
pub fn first_step_update_check(layer: &AdaptedLayer, probe: &ProbeBatch, lr: f64) -> Result<FirstStepReport> {
    let Adapter::LowRank(pair) = layer.adapter() else {
        return Err(LorsError::arg("first-step check needs a low-rank adapter"));
    };
    match &probe.target {
        Target::Regression(t) if t.rows() == layer.shape().0 => {}
        _ => return Err(LorsError::arg("first-step check needs a regression target with one row per output")),
    }
    let (a0, b0, alpha) = (pair.a.clone(), pair.b.clone(), pair.alpha);
    let mut model = ToyModel::new(vec![layer.clone()], Head::Regression)?;
    let mut tape = Tape::new();
    let x = tape.input(probe.x.clone(), false);
    let nodes = model.forward(&mut tape, x)?;
    let loss = model.loss(&mut tape, nodes.output, &probe.target)?;
    let out = nodes.layers[0].output;
    let mut dw = None;
    let mut grads = tape.backward_with_hook(loss, DenseMatrix::ones(1, 1), &mut |visit| {
        if visit.node == out {
            dw = Some(tensor::matmul(visit.upstream, &visit.inputs[0].transpose())?);
        }
        Ok(())
    })?;
    let dw = dw.ok_or_else(|| LorsError::graph("layer output not visited"))?;
    let take = |g: &mut crate::graph::Gradients, id| g.take(id).ok_or_else(|| LorsError::graph("missing adapter gradient"));
    let da = take(&mut grads, nodes.layers[0].a)?;
    let db = take(&mut grads, nodes.layers[0].b)?;

    let a1 = tensor::sub(&a0, &tensor::scale(&da, lr))?;
    let b1 = tensor::sub(&b0, &tensor::scale(&db, lr))?;
    let w0 = tensor::scale(&tensor::matmul(&a0, &b0)?, alpha);
    let w1 = tensor::scale(&tensor::matmul(&a1, &b1)?, alpha);
    let delta = tensor::sub(&w1, &w0)?;
    let btb = tensor::matmul(&b0.transpose(), &b0)?;
    let expected = tensor::scale(&tensor::matmul(&dw, &btb)?, -lr * alpha * alpha);
    let grad_norm = dw.frobenius_norm();
    let ratio = |m: DenseMatrix| if grad_norm > 0.0 { m.frobenius_norm() / grad_norm } else { 0.0 };
    let residual = ratio(tensor::sub(&delta, &expected)?);
    let masked_residual = ratio(tensor::sub(&tensor::hadamard(&delta, layer.mask())?, &expected)?);
    Ok(FirstStepReport { residual, masked_residual, grad_norm, lr, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Variant;
    use crate::prune::{prune_magnitude, SparseWeight};
    use crate::train::{BaseLayer, BaseModel};

    fn probe(c: usize, out: usize, n: usize, rng: &mut RngState) -> ProbeBatch {
        Batch::new(
            DenseMatrix::random_normal(c, n, rng, 0.0, 1.0),
            Target::Regression(DenseMatrix::random_normal(out, n, rng, 0.0, 1.0)),
        )
        .unwrap()
    }

    fn pruned_model(variant: Variant, rank: usize, rng: &mut RngState) -> ToyModel {
        let dense = BaseModel::random(&[8, 10, 6], Head::Regression, rng).unwrap();
        let base = dense.map_weights(|_, w| prune_magnitude(w.values(), 0.5)).unwrap();
        ToyModel::adapt(&base, variant, rank, 2.0).unwrap()
    }

    #[test]
    fn zero_random_start_leaves_output_unchanged() {
        let mut rng = RngState::new(1);
        let layer = AdaptedLayer::with_zero_adapter(
            prune_magnitude(&DenseMatrix::random_normal(5, 6, &mut rng, 0.0, 1.0), 0.5).unwrap(),
            Variant::Sqft,
            2,
            2.0,
            None,
        )
        .unwrap();
        let mut l = layer.clone();
        l.set_adapter(init_zero_random(&layer, 7, 0.5).unwrap()).unwrap();
        let x = DenseMatrix::random_normal(6, 3, &mut rng, 0.0, 1.0);
        assert!(l.infer(&x).unwrap().bitwise_eq(&tensor::matmul(layer.base().values(), &x).unwrap()));
        let again = init_zero_random(&layer, 7, 0.5).unwrap();
        assert_eq!(again, *l.adapter());
        assert_eq!(init_zero_random(&layer, 7, 0.0).unwrap().factors().1.count_nonzero(), 0);
    }

    #[test]
    fn gradient_svd_rows_are_orthonormal_and_optimal() {
        let mut rng = RngState::new(2);
        let mut model = pruned_model(Variant::Lors, 3, &mut rng);
        let p = probe(8, 6, 32, &mut rng);
        let report = init_gradient_svd(&mut model, &p, 3, &InitSpec::default()).unwrap();
        assert_eq!(report.layers.len(), 2);
        assert_eq!(report.peak_dense_gradients, 1);
        for (layer, s) in model.layers().iter().zip(&report.layers) {
            let (a, b) = layer.adapter().factors();
            assert_eq!(a.count_nonzero(), 0);
            let gram = tensor::matmul(b, &b.transpose()).unwrap();
            assert!(gram.max_abs_diff(&DenseMatrix::identity(3)) < 1e-8);
            assert!((s.residual - s.tail_norm).abs() <= 1e-8 * s.grad_norm.max(1.0));
        }
    }

    #[test]
    fn gradient_svd_keeps_initial_outputs() {
        let mut rng = RngState::new(3);
        let mut model = pruned_model(Variant::Lors, 2, &mut rng);
        let p = probe(8, 6, 16, &mut rng);
        let before = model.predict(&p.x).unwrap();
        init_gradient_svd(&mut model, &p, 2, &InitSpec::default()).unwrap();
        assert!(model.predict(&p.x).unwrap().bitwise_eq(&before));
    }

    #[test]
    fn gradient_svd_rejects_bad_rank_and_spp() {
        let mut rng = RngState::new(4);
        let mut model = pruned_model(Variant::Lors, 2, &mut rng);
        let p = probe(8, 6, 4, &mut rng);
        assert!(matches!(init_gradient_svd(&mut model, &p, 7, &InitSpec::default()), Err(LorsError::Argument(_))));
        let mut spp = pruned_model(Variant::Spp, 2, &mut rng);
        assert!(init_gradient_svd(&mut spp, &p, 2, &InitSpec::default()).is_err());
    }

    #[test]
    fn first_step_identity_holds_with_dense_mask() {
        let mut rng = RngState::new(5);
        let base = SparseWeight::dense(DenseMatrix::random_normal(6, 5, &mut rng, 0.0, 1.0));
        let dense = BaseModel::new(vec![BaseLayer { weight: base, bias: None }], Head::Regression).unwrap();
        let mut model = ToyModel::adapt(&dense, Variant::Lors, 2, 2.0).unwrap();
        let p = probe(5, 6, 12, &mut rng);
        init_gradient_svd(&mut model, &p, 2, &InitSpec::default()).unwrap();
        let report = first_step_update_check(&model.layers()[0], &p, 0.05).unwrap();
        assert!(report.residual <= 1e-8, "{report:?}");
        assert!(report.masked_residual <= 1e-8);
        assert_eq!(first_step_update_check(&model.layers()[0], &p, 0.0).unwrap().residual, 0.0);
    }

    #[test]
    fn masked_first_step_differs_on_sparse_base() {
        let mut rng = RngState::new(6);
        let mut model = pruned_model(Variant::Lors, 2, &mut rng);
        let layer = model.layers()[0].clone();
        let single = BaseModel::new(vec![BaseLayer { weight: layer.base().clone(), bias: None }], Head::Regression).unwrap();
        model = ToyModel::adapt(&single, Variant::Lors, 2, 2.0).unwrap();
        let p = probe(8, 10, 12, &mut rng);
        init_gradient_svd(&mut model, &p, 2, &InitSpec::default()).unwrap();
        let report = first_step_update_check(&model.layers()[0], &p, 0.05).unwrap();
        assert!(report.residual <= 1e-8);
        assert!(report.masked_residual > 1e-3);
    }
}

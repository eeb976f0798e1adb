//! Self-checks run by `lors verify`: gradient oracles, forward equivalences,
//! straight-through characterisation, cost formulas, sparsity preservation,
//! init optimality, the first-step identity, SPP equivalence and
//! determinism.
//!
//! Every check compares the production code path against an independent,
//! naive expression built here from plain matrix products.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{
    merge, predict_cost, spp_block_diag_weight, spp_repeat_weight, Adapter, AdaptedLayer, AdapterPair, LayerGrads,
    SppAdapter, Variant,
};
use crate::error::{LorsError, Result};
use crate::graph::gradcheck::{assert_close, central_difference, FD_STEP};
use crate::graph::{CostCounters, Phase};
use crate::init::{first_step_update_check, init_gradient_svd, InitSpec, InitStrategy};
use crate::prune::{mask_violations, prune_magnitude, prune_two_four, two_four_violations, ScoreKind, SparseWeight, Sparsity};
use crate::tensor::{self, matmul, DenseMatrix, RngState};
use crate::train::{finetune, teacher_student, Batch, BaseModel, Head, Target, TeacherStudentConfig, ToyModel, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Grad,
    Forward,
    Ste,
    Cost,
    Sparsity,
    Init,
    FirstStep,
    Spp,
    Determinism,
}

impl Suite {
    pub const ALL: [Suite; 9] = [
        Suite::Grad,
        Suite::Forward,
        Suite::Ste,
        Suite::Cost,
        Suite::Sparsity,
        Suite::Init,
        Suite::FirstStep,
        Suite::Spp,
        Suite::Determinism,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Forward => "forward",
            Suite::Ste => "ste",
            Suite::Cost => "cost",
            Suite::Sparsity => "sparsity",
            Suite::Init => "init",
            Suite::FirstStep => "first_step",
            Suite::Spp => "spp",
            Suite::Determinism => "determinism",
        }
    }

    /// `"all"` or a comma-separated list of suite names.
    pub fn parse_selector(s: &str) -> Result<Vec<Suite>> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Suite::ALL.to_vec());
        }
        let mut out: Vec<Suite> = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let suite = part.parse()?;
            if !out.contains(&suite) {
                out.push(suite);
            }
        }
        if out.is_empty() {
            return Err(LorsError::arg("empty suite selector"));
        }
        Ok(out)
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = LorsError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| LorsError::arg(format!("unknown suite {s:?}; expected one of {:?} or all", Suite::ALL.map(Suite::name))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub suite: Suite,
    pub case: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub cases: Vec<CaseResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }

    /// One line per case plus a totals line.
    pub fn render_table(&self) -> String {
        let width = self.cases.iter().map(|c| c.case.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<12} {:<width$} {:<6} detail\n", "suite", "case", "result");
        for c in &self.cases {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            out += &format!("{:<12} {:<width$} {:<6} {}\n", c.suite.name(), c.case, verdict, c.detail);
        }
        let failed = self.failures().count();
        out += &format!("{} cases, {} passed, {} failed\n", self.cases.len(), self.cases.len() - failed, failed);
        out
    }
}

/// Runs `suites` in order. Internal errors are reported as failed cases.
pub fn run_suites(suites: &[Suite], seed: u64) -> VerifyReport {
    let mut report = VerifyReport::default();
    for &suite in suites {
        let rng = RngState::new(seed).fork(suite as u64);
        let checks: Vec<(&str, Check)> = match suite {
            Suite::Grad => grad_checks(),
            Suite::Forward => forward_checks(),
            Suite::Ste => ste_checks(),
            Suite::Cost => vec![("counters equal closed forms", cost_counters)],
            Suite::Sparsity => vec![("merged weights keep the mask", sparsity_unstructured), ("2:4 bases stay 2:4", sparsity_two_four)],
            Suite::Init => vec![("svd start is the best projection", init_optimal), ("one dense gradient alive", init_memory)],
            Suite::FirstStep => first_step_checks(),
            Suite::Spp => vec![("repeat form equals block-diagonal form", spp_equivalence)],
            Suite::Determinism => vec![("repeatable traces, frozen base", determinism)],
        };
        for (i, (name, check)) in checks.into_iter().enumerate() {
            let mut rng = rng.fork(i as u64);
            let (passed, detail) = match check(&mut rng) {
                Ok(Ok(detail)) => (true, detail),
                Ok(Err(detail)) => (false, detail),
                Err(e) => (false, format!("error: {e}")),
            };
            report.cases.push(CaseResult { suite, case: name.to_string(), passed, detail });
        }
    }
    report
}

/// `Ok(Ok(detail))` passes, `Ok(Err(detail))` fails.
type Outcome = Result<std::result::Result<String, String>>;
type Check = fn(&mut RngState) -> Outcome;

const GRAD_INSTANCES: usize = 100;
const GRAD_RTOL: f64 = 1e-5;
const GRAD_ATOL: f64 = 1e-8;
const EXACT_TOL: f64 = 1e-12;

/// A random layer problem: base `R×C` with about half its entries pruned.
struct Instance {
    base: SparseWeight,
    a: DenseMatrix,
    b: DenseMatrix,
    x: DenseMatrix,
    dy: DenseMatrix,
    alpha: f64,
}

impl Instance {
    fn random(rng: &mut RngState, density: f64) -> Self {
        let (r, c, l) = (2 + rng.below(7), 2 + rng.below(7), 2 + rng.below(7));
        // Adapters need r <= min(R, C).
        let k = 1 + rng.below(3.min(r).min(c));
        Self::with_shape(rng, r, c, l, k, density)
    }

    fn with_shape(rng: &mut RngState, rows: usize, cols: usize, tokens: usize, rank: usize, density: f64) -> Self {
        let w = DenseMatrix::from_fn(rows, cols, |_, _| {
            let v = rng.next_range(0.1, 1.0) * if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            if rng.bernoulli(density) {
                v
            } else {
                0.0
            }
        });
        let u = |r: usize, c: usize, rng: &mut RngState| DenseMatrix::random_uniform(r, c, rng, -1.0, 1.0);
        Self {
            base: SparseWeight::new(w, Sparsity::Unstructured { ratio: 1.0 - density }),
            a: u(rows, rank, rng),
            b: u(rank, cols, rng),
            x: u(cols, tokens, rng),
            dy: u(rows, tokens, rng),
            alpha: rng.next_range(0.5, 2.5),
        }
    }

    /// Same factors and data on a base with a fresh random pattern.
    fn remasked(&self, rng: &mut RngState) -> Self {
        let (rows, cols) = self.base.shape();
        let w = DenseMatrix::from_fn(rows, cols, |_, _| if rng.bernoulli(0.5) { rng.next_range(0.1, 1.0) } else { 0.0 });
        Self {
            base: SparseWeight::new(w, Sparsity::Unstructured { ratio: 0.5 }),
            a: self.a.clone(),
            b: self.b.clone(),
            x: self.x.clone(),
            dy: self.dy.clone(),
            alpha: self.alpha,
        }
    }

    fn layer(&self, variant: Variant) -> Result<AdaptedLayer> {
        let pair = AdapterPair::new(self.a.clone(), self.b.clone(), self.alpha)?;
        AdaptedLayer::new(self.base.clone(), Adapter::LowRank(pair), None, variant)
    }
}

struct Run {
    y: DenseMatrix,
    grads: LayerGrads,
    counters: CostCounters,
    saved: u64,
}

fn run_layer(layer: &mut AdaptedLayer, x: &DenseMatrix, dy: &DenseMatrix) -> Result<Run> {
    let mut counters = CostCounters::new();
    let (y, mut ctx) = layer.forward(x, &mut counters)?;
    let saved = ctx.saved_elements();
    counters.set_phase(Phase::Backward);
    let grads = ctx.backward(dy, &mut counters)?;
    Ok(Run { y, grads, counters, saved })
}

/// `(W̃ + α·(A·B)⊙M)·X`, entry by entry.
fn naive_output(base: &DenseMatrix, mask: Option<&DenseMatrix>, a: &DenseMatrix, b: &DenseMatrix, alpha: f64, x: &DenseMatrix) -> DenseMatrix {
    let (rows, cols) = base.shape();
    let w = DenseMatrix::from_fn(rows, cols, |i, j| {
        let ab: f64 = (0..a.cols()).map(|p| a.get(i, p) * b.get(p, j)).sum();
        base.get(i, j) + alpha * ab * mask.map_or(1.0, |m| m.get(i, j))
    });
    DenseMatrix::from_fn(rows, x.cols(), |i, t| (0..cols).map(|j| w.get(i, j) * x.get(j, t)).sum())
}

fn pairing(y: &DenseMatrix, g: &DenseMatrix) -> f64 {
    y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
}

/// Finite-difference gradients of `⟨f(A, B, X), dY⟩`.
fn fd_grads(f: impl Fn(&DenseMatrix, &DenseMatrix, &DenseMatrix) -> DenseMatrix, s: &Instance) -> [DenseMatrix; 3] {
    [
        central_difference(|p| pairing(&f(p, &s.b, &s.x), &s.dy), &s.a, FD_STEP),
        central_difference(|p| pairing(&f(&s.a, p, &s.x), &s.dy), &s.b, FD_STEP),
        central_difference(|p| pairing(&f(&s.a, &s.b, p), &s.dy), &s.x, FD_STEP),
    ]
}

fn compare_grads(g: &LayerGrads, expect: &[DenseMatrix; 3], rtol: f64, atol: f64) -> std::result::Result<(), String> {
    for (name, got, want) in [("dA", &g.d_a, &expect[0]), ("dB", &g.d_b, &expect[1]), ("dX", &g.d_x, &expect[2])] {
        assert_close(got, want, rtol, atol).map_err(|e| format!("{name} {e}"))?;
    }
    Ok(())
}

fn over_instances(
    rng: &mut RngState,
    n: usize,
    mut check: impl FnMut(usize, &mut RngState) -> Result<std::result::Result<(), String>>,
) -> Outcome {
    for k in 0..n {
        if let Err(e) = check(k, rng)? {
            return Ok(Err(format!("instance {k}: {e}")));
        }
    }
    Ok(Ok(format!("{n} instances")))
}

fn grad_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("lors vs straight-through surrogate", grad_lors),
        ("sqft/sqft_gc vs masked expression", grad_sqft),
        ("lora vs dense expression", grad_lora),
        ("spp/spp_gc vs repeat expression", grad_spp),
        ("all-ones mask: lors = sqft = lora", grad_dense_agreement),
    ]
}

/// Adapter gradients follow the unmasked product, `dX` the masked weight.
fn grad_lors(rng: &mut RngState) -> Outcome {
    over_instances(rng, GRAD_INSTANCES, |_, rng| {
        let s = Instance::random(rng, 0.5);
        let run = run_layer(&mut s.layer(Variant::Lors)?, &s.x, &s.dy)?;
        let (w, m) = (s.base.values(), s.base.mask());
        let [da, db, _] = fd_grads(|a, b, x| naive_output(w, None, a, b, s.alpha, x), &s);
        let [_, _, dx] = fd_grads(|a, b, x| naive_output(w, Some(&m), a, b, s.alpha, x), &s);
        Ok(compare_grads(&run.grads, &[da, db, dx], GRAD_RTOL, GRAD_ATOL))
    })
}

fn grad_sqft(rng: &mut RngState) -> Outcome {
    over_instances(rng, GRAD_INSTANCES, |_, rng| {
        let s = Instance::random(rng, 0.5);
        let (w, m) = (s.base.values(), s.base.mask());
        let expect = fd_grads(|a, b, x| naive_output(w, Some(&m), a, b, s.alpha, x), &s);
        for v in [Variant::Sqft, Variant::SqftGc] {
            let run = run_layer(&mut s.layer(v)?, &s.x, &s.dy)?;
            if let Err(e) = compare_grads(&run.grads, &expect, GRAD_RTOL, GRAD_ATOL) {
                return Ok(Err(format!("{v}: {e}")));
            }
        }
        Ok(Ok(()))
    })
}

fn grad_lora(rng: &mut RngState) -> Outcome {
    over_instances(rng, GRAD_INSTANCES, |_, rng| {
        let s = Instance::random(rng, 0.5);
        let run = run_layer(&mut s.layer(Variant::Lora)?, &s.x, &s.dy)?;
        let expect = fd_grads(|a, b, x| naive_output(s.base.values(), None, a, b, s.alpha, x), &s);
        Ok(compare_grads(&run.grads, &expect, GRAD_RTOL, GRAD_ATOL))
    })
}

fn grad_spp(rng: &mut RngState) -> Outcome {
    over_instances(rng, GRAD_INSTANCES / 2, |_, rng| {
        let rank = 1 + rng.below(3);
        let cols = rank * (1 + rng.below(3));
        let (rows, tokens) = (2 + rng.below(6), 2 + rng.below(6));
        let mut s = Instance::with_shape(rng, rows, cols, tokens, rank, 0.5);
        s.b = DenseMatrix::random_uniform(1, cols, rng, -1.0, 1.0);
        let w = s.base.values().clone();
        let expect = fd_grads(|a, b, x| matmul(&spp_repeat_weight(&w, a, b).unwrap(), x).unwrap(), &s);
        for v in [Variant::Spp, Variant::SppGc] {
            let adapter = Adapter::Spp(SppAdapter::new(s.a.clone(), s.b.clone(), 0.0)?);
            let mut layer = AdaptedLayer::new(s.base.clone(), adapter, None, v)?;
            let run = run_layer(&mut layer, &s.x, &s.dy)?;
            if let Err(e) = compare_grads(&run.grads, &expect, GRAD_RTOL, GRAD_ATOL) {
                return Ok(Err(format!("{v}: {e}")));
            }
        }
        Ok(Ok(()))
    })
}

fn grad_dense_agreement(rng: &mut RngState) -> Outcome {
    over_instances(rng, GRAD_INSTANCES, |_, rng| {
        let s = Instance::random(rng, 1.0);
        let lors = run_layer(&mut s.layer(Variant::Lors)?, &s.x, &s.dy)?.grads;
        for v in [Variant::Sqft, Variant::Lora] {
            let other = run_layer(&mut s.layer(v)?, &s.x, &s.dy)?.grads;
            if let Err(e) = compare_grads(&lors, &[other.d_a, other.d_b, other.d_x], 0.0, EXACT_TOL) {
                return Ok(Err(format!("lors vs {v}: {e}")));
            }
        }
        Ok(Ok(()))
    })
}

fn forward_checks() -> Vec<(&'static str, Check)> {
    vec![("sqft/sqft_gc/lors vs naive merged product", forward_masked), ("merge() vs lors forward", forward_merge)]
}

fn forward_masked(rng: &mut RngState) -> Outcome {
    over_instances(rng, 200, |_, rng| {
        let s = Instance::random(rng, 0.5);
        let expect = naive_output(s.base.values(), Some(&s.base.mask()), &s.a, &s.b, s.alpha, &s.x);
        for v in [Variant::Sqft, Variant::SqftGc, Variant::Lors] {
            let y = run_layer(&mut s.layer(v)?, &s.x, &s.dy)?.y;
            if let Err(e) = assert_close(&y, &expect, 0.0, EXACT_TOL) {
                return Ok(Err(format!("{v}: {e}")));
            }
        }
        Ok(Ok(()))
    })
}

fn forward_merge(rng: &mut RngState) -> Outcome {
    over_instances(rng, 200, |_, rng| {
        let s = Instance::random(rng, 0.5);
        let layer = s.layer(Variant::Lors)?;
        let y = run_layer(&mut layer.clone(), &s.x, &s.dy)?.y;
        let merged = merge(&layer)?;
        Ok(assert_close(&matmul(merged.values(), &s.x)?, &y, 0.0, EXACT_TOL))
    })
}

fn ste_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("lors dA/dB = sqft with all-ones mask (bitwise)", ste_bitwise),
        ("lors adapter grads ignore the mask", ste_mask_free),
    ]
}

/// Small multiples of 1/8: every product and partial sum is exact in f64.
fn dyadic(rows: usize, cols: usize, rng: &mut RngState, nonzero: bool) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        let mut k = rng.below(17) as f64 - 8.0;
        if nonzero && k == 0.0 {
            k = 1.0;
        }
        k / 8.0
    })
}

fn ste_bitwise(rng: &mut RngState) -> Outcome {
    over_instances(rng, 100, |_, rng| {
        let (rows, cols, tokens) = (2 + rng.below(7), 2 + rng.below(7), 2 + rng.below(7));
        let rank = 1 + rng.below(3.min(rows).min(cols));
        let sparse = dyadic(rows, cols, rng, false);
        let dense = dyadic(rows, cols, rng, true);
        let (a, b, x, dy) =
            (dyadic(rows, rank, rng, false), dyadic(rank, cols, rng, false), dyadic(cols, tokens, rng, false), dyadic(rows, tokens, rng, false));
        let make = |w: &DenseMatrix, v| -> Result<AdaptedLayer> {
            let pair = AdapterPair::new(a.clone(), b.clone(), 2.0)?;
            AdaptedLayer::new(SparseWeight::new(w.clone(), Sparsity::Unstructured { ratio: 0.5 }), Adapter::LowRank(pair), None, v)
        };
        let lors = run_layer(&mut make(&sparse, Variant::Lors)?, &x, &dy)?.grads;
        let sqft = run_layer(&mut make(&dense, Variant::Sqft)?, &x, &dy)?.grads;
        if !lors.d_a.bitwise_eq(&sqft.d_a) || !lors.d_b.bitwise_eq(&sqft.d_b) {
            return Ok(Err(format!("max |ΔdA| {:e}, |ΔdB| {:e}", lors.d_a.max_abs_diff(&sqft.d_a), lors.d_b.max_abs_diff(&sqft.d_b))));
        }
        Ok(Ok(()))
    })
}

/// Changing which entries are pruned leaves the LoRS adapter gradients
/// untouched, while the masked (SQFT) gradients move.
fn ste_mask_free(rng: &mut RngState) -> Outcome {
    let mut sqft_moved = 0;
    let out = over_instances(rng, 50, |_, rng| {
        let s = Instance::random(rng, 0.5);
        let t = s.remasked(rng);
        let grads = |inst: &Instance, v| run_layer(&mut inst.layer(v)?, &inst.x, &inst.dy).map(|r| r.grads);
        let (g1, g2) = (grads(&s, Variant::Lors)?, grads(&t, Variant::Lors)?);
        if grads(&s, Variant::Sqft)?.d_a.max_abs_diff(&grads(&t, Variant::Sqft)?.d_a) > 1e-9 {
            sqft_moved += 1;
        }
        if !g1.d_a.bitwise_eq(&g2.d_a) || !g1.d_b.bitwise_eq(&g2.d_b) {
            return Ok(Err("lors adapter gradient changed with the mask".to_string()));
        }
        Ok(Ok(()))
    })?;
    Ok(match out {
        Ok(d) if sqft_moved == 0 => Err(format!("{d}, but masked gradients never changed either")),
        Ok(d) => Ok(format!("{d}; masked gradients changed in {sqft_moved}")),
        e => e,
    })
}

fn cost_counters(rng: &mut RngState) -> Outcome {
    over_instances(rng, 50, |_, rng| {
        let rank = 1 + rng.below(4);
        let (rows, cols, tokens) = (rank + rng.below(12), rank * (1 + rng.below(5)), rank + rng.below(12));
        let s = Instance::with_shape(rng, rows, cols, tokens, rank, 0.5);
        for v in Variant::ALL {
            let mut layer = if v.is_spp() {
                let adapter = Adapter::Spp(SppAdapter::new(s.a.clone(), DenseMatrix::random_uniform(1, cols, rng, -1.0, 1.0), 0.0)?);
                AdaptedLayer::new(s.base.clone(), adapter, None, v)?
            } else {
                s.layer(v)?
            };
            let run = run_layer(&mut layer, &s.x, &s.dy)?;
            let p = predict_cost(v, rows, cols, tokens, rank);
            let got = (run.counters.macs_forward, run.counters.macs_backward, run.saved);
            let want = (p.macs_forward, p.macs_backward, p.saved_elements);
            if got != want {
                return Ok(Err(format!("{v} at {rows}x{cols}x{tokens}x{rank}: measured {got:?}, predicted {want:?}")));
            }
        }
        Ok(Ok(()))
    })
}

fn small_task(rng: &mut RngState) -> Result<(BaseModel, crate::train::Dataset)> {
    let teacher = BaseModel::random(&[12, 12, 4], Head::Regression, rng)?;
    let data = teacher_student(&teacher, &TeacherStudentConfig { samples: 128, latent_dim: 6, noise: 0.0 }, rng)?;
    Ok((teacher, data))
}

fn config_for(variant: Variant, steps: usize) -> TrainConfig {
    let strategy = if variant.is_spp() { InitStrategy::ZeroARandomB } else { InitStrategy::GradientSvd };
    TrainConfig { steps, batch_size: 16, rank: 4, variant, init: InitSpec::with_strategy(strategy), ..TrainConfig::toy() }
}

fn sparsity_after_training(base: &BaseModel, data: &crate::train::Dataset, variants: &[Variant], two_four: bool) -> Outcome {
    for &v in variants {
        let out = finetune(base, data, &config_for(v, 40))?;
        let merged = out.model.merged()?;
        for (i, (m, orig)) in merged.layers.iter().zip(&base.layers).enumerate() {
            let outside = mask_violations(m.weight.values(), &orig.weight.mask());
            let groups = if two_four { two_four_violations(m.weight.values()) } else { 0 };
            if outside + groups > 0 {
                return Ok(Err(format!("{v} layer {i}: {outside} entries outside the mask, {groups} 2:4 violations")));
            }
        }
    }
    Ok(Ok(format!("{} variants x 40 steps", variants.len())))
}

fn sparsity_unstructured(rng: &mut RngState) -> Outcome {
    let (teacher, data) = small_task(rng)?;
    let pruned = teacher.map_weights(|_, w| prune_magnitude(w.values(), 0.5))?;
    sparsity_after_training(&pruned, &data, &Variant::ALL, false)
}

fn sparsity_two_four(rng: &mut RngState) -> Outcome {
    let (teacher, data) = small_task(rng)?;
    let pruned = teacher.map_weights(|_, w| prune_two_four(w.values(), ScoreKind::Magnitude, None))?;
    sparsity_after_training(&pruned, &data, &[Variant::Lors, Variant::Sqft, Variant::SppGc], true)
}

/// `r×C` with orthonormal rows (Gram–Schmidt on Gaussian rows).
pub fn random_orthonormal_rows(r: usize, c: usize, rng: &mut RngState) -> DenseMatrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(r);
    while rows.len() < r {
        let mut v: Vec<f64> = (0..c).map(|_| rng.next_normal()).collect();
        for _ in 0..2 {
            for q in &rows {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    DenseMatrix::from_fn(r, c, |i, j| rows[i][j])
}

pub fn projection_residual(dw: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    let proj = matmul(&matmul(dw, &b.transpose())?, b)?;
    Ok(tensor::sub(dw, &proj)?.frobenius_norm())
}

/// A one-layer regression model whose first-step weight gradient is exactly
/// `dw`: with `X = I` and `T = W − (R·C/2)·dW`, the mean-squared-error
/// gradient `2/(R·C)·(W − T)` equals `dw`.
pub fn layer_with_gradient(dw: &DenseMatrix, variant: Variant, rank: usize, rng: &mut RngState) -> Result<(ToyModel, Batch)> {
    let (rows, cols) = dw.shape();
    let w = DenseMatrix::random_normal(rows, cols, rng, 0.0, 1.0);
    let base = BaseModel::new(vec![crate::train::BaseLayer { weight: SparseWeight::dense(w.clone()), bias: None }], Head::Regression)?;
    let t = tensor::sub(&w, &tensor::scale(dw, (rows * cols) as f64 / 2.0))?;
    let probe = Batch::new(DenseMatrix::identity(cols), Target::Regression(t))?;
    Ok((ToyModel::adapt(&base, variant, rank, 2.0)?, probe))
}

fn init_optimal(rng: &mut RngState) -> Outcome {
    let mut cases = 0;
    for &(rows, cols) in &[(8usize, 8usize), (16, 12)] {
        for &rank in &[1usize, 2, 4] {
            for _ in 0..4 {
                let dw = DenseMatrix::random_normal(rows, cols, rng, 0.0, 1.0);
                let (mut model, probe) = layer_with_gradient(&dw, Variant::Lors, rank, rng)?;
                let report = init_gradient_svd(&mut model, &probe, rank, &InitSpec::default())?;
                let (_, b) = model.layers()[0].adapter().factors();
                let ours = projection_residual(&dw, b)?;
                let tail = report.layers[0].tail_norm;
                if (ours - tail).abs() > 1e-8 {
                    return Ok(Err(format!("{rows}x{cols} r={rank}: residual {ours} vs tail {tail}")));
                }
                for k in 0..200 {
                    let cand = projection_residual(&dw, &random_orthonormal_rows(rank, cols, rng))?;
                    if cand < ours - 1e-10 {
                        return Ok(Err(format!("{rows}x{cols} r={rank}: candidate {k} residual {cand} < {ours}")));
                    }
                }
                cases += 1;
            }
        }
    }
    Ok(Ok(format!("{cases} gradients x 200 candidates")))
}

fn init_memory(rng: &mut RngState) -> Outcome {
    let (teacher, data) = small_task(rng)?;
    let mut model = ToyModel::adapt(&teacher, Variant::Lors, 4, 2.0)?;
    let probe = data.batch(&(0..32).collect::<Vec<_>>())?;
    let report = init_gradient_svd(&mut model, &probe, 4, &InitSpec::default())?;
    let largest = teacher.layers.iter().map(|l| l.weight.values().elements()).max().unwrap_or(0);
    Ok(if report.peak_dense_gradients == 1 && report.peak_gradient_elements == largest {
        Ok(format!("{} layers, peak {} elements", report.layers.len(), largest))
    } else {
        Err(format!("peak {} dense gradients, {} elements", report.peak_dense_gradients, report.peak_gradient_elements))
    })
}

fn first_step_checks() -> Vec<(&'static str, Check)> {
    vec![("dense base: ΔW = −lr·α²·dW·BᵀB", first_step_dense), ("sparse base, straight-through: same identity", first_step_lors_sparse)]
}

fn first_step_case(rng: &mut RngState, density: f64, variant: Variant) -> Outcome {
    for k in 0..20 {
        let (rows, cols, tokens, rank) = (2 + rng.below(7), 2 + rng.below(7), 2 + rng.below(7), 1 + rng.below(2));
        let s = Instance::with_shape(rng, rows, cols, tokens, rank, density);
        let pair = AdapterPair::new(DenseMatrix::zeros(rows, rank), random_orthonormal_rows(rank, cols, rng), s.alpha)?;
        let layer = AdaptedLayer::new(s.base.clone(), Adapter::LowRank(pair), None, variant)?;
        let probe = Batch::new(s.x.clone(), Target::Regression(s.dy.clone()))?;
        let lr = rng.next_range(1e-3, 1e-1);
        let report = first_step_update_check(&layer, &probe, lr)?;
        if !(report.residual <= 1e-8) {
            return Ok(Err(format!("instance {k}: residual {:e}", report.residual)));
        }
    }
    Ok(Ok("20 instances, residual <= 1e-8".into()))
}

fn first_step_dense(rng: &mut RngState) -> Outcome {
    first_step_case(rng, 1.0, Variant::Lors)
}

fn first_step_lors_sparse(rng: &mut RngState) -> Outcome {
    first_step_case(rng, 0.5, Variant::Lors)
}

fn spp_equivalence(rng: &mut RngState) -> Outcome {
    over_instances(rng, 100, |_, rng| {
        let rank = 1 + rng.below(4);
        let (rows, cols) = (1 + rng.below(8), rank * (1 + rng.below(4)));
        let s = Instance::with_shape(rng, rows, cols, 3, rank, 0.5);
        let b = DenseMatrix::random_uniform(1, cols, rng, -1.0, 1.0);
        let repeat = spp_repeat_weight(s.base.values(), &s.a, &b)?;
        let block = spp_block_diag_weight(s.base.values(), &s.a, &b)?;
        if let Err(e) = assert_close(&repeat, &block, 0.0, EXACT_TOL) {
            return Ok(Err(format!("weights: {e}")));
        }
        let adapter = Adapter::Spp(SppAdapter::new(s.a.clone(), b, 0.0)?);
        let y = AdaptedLayer::new(s.base.clone(), adapter, None, Variant::Spp)?.infer(&s.x)?;
        Ok(assert_close(&y, &matmul(&repeat, &s.x)?, 0.0, EXACT_TOL))
    })
}

fn determinism(rng: &mut RngState) -> Outcome {
    let (teacher, data) = small_task(rng)?;
    let pruned = teacher.map_weights(|_, w| prune_magnitude(w.values(), 0.5))?;
    let bits = |m: &BaseModel| -> Vec<u64> { m.layers.iter().flat_map(|l| l.weight.values().data().iter().map(|v| v.to_bits())).collect() };
    let before = bits(&pruned);
    for v in [Variant::Lors, Variant::Sqft, Variant::Spp] {
        let cfg = TrainConfig { spp_dropout: if v.is_spp() { 0.1 } else { 0.0 }, ..config_for(v, 20) };
        let a = finetune(&pruned, &data, &cfg)?;
        let b = finetune(&pruned, &data, &cfg)?;
        if a.trace.to_csv_string()? != b.trace.to_csv_string()? {
            return Ok(Err(format!("{v}: traces differ")));
        }
        let frozen: Vec<u64> = a.model.layers().iter().flat_map(|l| l.base().values().data().iter().map(|v| v.to_bits())).collect();
        if frozen != before || bits(&pruned) != before {
            return Ok(Err(format!("{v}: base weights changed")));
        }
    }
    Ok(Ok("3 variants x 2 runs".into()))
}

//! Toy models, synthetic tasks, optimisers and the fine-tuning loop.
//!
//! Only adapter factors (and, optionally, biases) are trained; base weights
//! stay frozen and every step runs the layer variant's own forward/backward
//! schedule.

mod data;
mod model;
mod optim;

pub use data::{gaussian_clusters, teacher_student, Batch, Dataset, Target, TeacherStudentConfig};
pub use model::{BaseLayer, BaseModel, ForwardNodes, Head, ToyModel};
pub use optim::{OptimConfig, OptimState, Optimizer};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapters::{Variant, DEFAULT_ALPHA};
use crate::error::{LorsError, Result};
use crate::graph::Tape;
use crate::init::{initialize, GradientSvdReport, InitSpec};
use crate::tensor::{DenseMatrix, RngState};

/// Everything that determines a fine-tuning run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Optimiser updates; zero returns the initialised model untouched.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub variant: Variant,
    pub rank: usize,
    pub alpha: f64,
    pub init: InitSpec,
    pub seed: u64,
    /// Also update layer biases.
    pub train_bias: bool,
    /// Dropout on the SPP adapter branch.
    pub spp_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 32,
            lr: 2e-5,
            optimizer: Optimizer::Adaptive,
            weight_decay: 0.0,
            variant: Variant::Lors,
            rank: 8,
            alpha: DEFAULT_ALPHA,
            init: InitSpec::default(),
            seed: 0,
            train_bias: false,
            spp_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    /// Defaults tuned for the desk-scale synthetic tasks (larger step size).
    pub fn toy() -> Self {
        Self { lr: 1e-2, ..Self::default() }
    }

    pub fn optim(&self) -> OptimConfig {
        let base = match self.optimizer {
            Optimizer::Sgd => OptimConfig::sgd(self.lr),
            Optimizer::Adaptive => OptimConfig::adaptive(self.lr),
        };
        OptimConfig { weight_decay: self.weight_decay, ..base }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.rank == 0 {
            return Err(LorsError::arg("batch_size and rank must be at least 1"));
        }
        self.optim().validate()
    }
}

/// Tallies for one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub macs_forward: u64,
    pub macs_backward: u64,
    pub saved_peak: u64,
}

/// One forward, backward and optimiser update on `batch`. Returns the loss
/// before the update.
pub fn train_step(model: &mut ToyModel, batch: &Batch, optim: &mut OptimState, train_bias: bool) -> Result<StepStats> {
    let mut tape = Tape::new();
    let x = tape.input(batch.x.clone(), false);
    let nodes = model.forward(&mut tape, x)?;
    let loss_id = model.loss(&mut tape, nodes.output, &batch.target)?;
    let loss = tape.value(loss_id).get(0, 0);
    if !loss.is_finite() {
        return Err(LorsError::NonFiniteLoss { step: optim.step_count() as usize + 1, value: loss });
    }
    let mut grads = tape.backward(loss_id)?;
    let mut flat = Vec::new();
    for n in &nodes.layers {
        let mut ids = vec![n.a, n.b];
        if train_bias {
            ids.extend(n.bias);
        }
        for id in ids {
            flat.push(grads.take(id).ok_or_else(|| LorsError::graph("missing parameter gradient"))?);
        }
    }
    let mut params: Vec<&mut DenseMatrix> = model.layers_mut().iter_mut().flat_map(|l| l.trainable_mut(train_bias)).collect();
    optim.update(&mut params, &flat)?;
    let c = tape.counters();
    Ok(StepStats { loss, macs_forward: c.macs_forward, macs_backward: c.macs_backward, saved_peak: tape.saved_context().peak() })
}

/// One row of the metrics trace. MAC columns are cumulative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub macs_fwd: u64,
    pub macs_bwd: u64,
    pub saved_peak: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTrace {
    pub fn push(&mut self, step: usize, stats: &StepStats) {
        let (f, b) = self.rows.last().map(|r| (r.macs_fwd, r.macs_bwd)).unwrap_or((0, 0));
        self.rows.push(MetricsRow {
            step,
            loss: stats.loss,
            macs_fwd: f + stats.macs_forward,
            macs_bwd: b + stats.macs_backward,
            saved_peak: stats.saved_peak,
        });
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// CSV with header `step,loss,macs_fwd,macs_bwd,saved_peak`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss", "macs_fwd", "macs_bwd", "saved_peak"])?;
        for r in &self.rows {
            w.serialize((r.step, r.loss, r.macs_fwd, r.macs_bwd, r.saved_peak))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| LorsError::Format(e.to_string()))
    }
}

pub struct FinetuneOutcome {
    pub model: ToyModel,
    pub trace: MetricsTrace,
    pub init: Option<GradientSvdReport>,
}

// Tags for independent random streams derived from the run seed.
const STREAM_BATCHES: u64 = 1;
const STREAM_PROBE: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

/// Wraps `base` with adapters and initialises them as `config` says.
pub fn prepare(base: &BaseModel, dataset: &Dataset, config: &TrainConfig) -> Result<(ToyModel, Option<GradientSvdReport>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(LorsError::arg("dataset is empty"));
    }
    let mut model = ToyModel::adapt(base, config.variant, config.rank, config.alpha)?;
    let root = RngState::new(config.seed);
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        layer.reseed_dropout(root.fork(STREAM_DROPOUT).fork(i as u64).next_u64());
        if let crate::adapters::Adapter::Spp(s) = layer.adapter_mut() {
            s.dropout = config.spp_dropout;
        }
    }
    let mut spec = config.init;
    spec.seed ^= root.fork(STREAM_INIT).next_u64();
    let probe = {
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        root.fork(STREAM_PROBE).shuffle(&mut idx);
        idx.truncate(spec.probe_size.clamp(1, dataset.len()));
        dataset.batch(&idx)?
    };
    let report = initialize(&mut model, &spec, Some(&probe))?;
    Ok((model, report))
}

/// Deterministic epoch-shuffled mini-batches.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    rng: RngState,
    size: usize,
}

impl Batches {
    fn new(n: usize, size: usize, rng: RngState) -> Self {
        Self { order: (0..n).collect(), pos: n, rng, size: size.min(n) }
    }

    fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let idx = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        idx
    }
}

/// Adapts, initialises and trains `base` on `dataset`.
pub fn finetune(base: &BaseModel, dataset: &Dataset, config: &TrainConfig) -> Result<FinetuneOutcome> {
    let (mut model, init) = prepare(base, dataset, config)?;
    let trace = run_steps(&mut model, dataset, config)?;
    Ok(FinetuneOutcome { model, trace, init })
}

/// Trains an already prepared model for `config.steps` steps.
pub fn run_steps(model: &mut ToyModel, dataset: &Dataset, config: &TrainConfig) -> Result<MetricsTrace> {
    let mut optim = OptimState::new(config.optim())?;
    let mut batches = Batches::new(dataset.len(), config.batch_size, RngState::new(config.seed).fork(STREAM_BATCHES));
    let mut trace = MetricsTrace::default();
    for step in 1..=config.steps {
        let batch = dataset.batch(&batches.next_indices())?;
        let stats = train_step(model, &batch, &mut optim, config.train_bias)?;
        trace.push(step, &stats);
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    /// Fraction of correct argmax predictions; `None` for regression.
    pub accuracy: Option<f64>,
}

/// Mean squared error or mean cross-entropy (plus accuracy) of `predictions`.
pub fn score(head: Head, predictions: &DenseMatrix, target: &Target) -> Result<EvalMetrics> {
    match (head, target) {
        (Head::Regression, Target::Regression(t)) => {
            if predictions.shape() != t.shape() {
                return Err(LorsError::shape("evaluate", predictions.shape(), t.shape()));
            }
            let n = t.len() as f64;
            let loss = predictions.data().iter().zip(t.data()).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n;
            Ok(EvalMetrics { loss, accuracy: None })
        }
        (Head::Classification { .. }, Target::Classes(labels)) => {
            let (k, l) = predictions.shape();
            if labels.len() != l {
                return Err(LorsError::shape("evaluate", (k, l), (1, labels.len())));
            }
            let mut loss = 0.0;
            let mut correct = 0usize;
            for (j, &label) in labels.iter().enumerate() {
                let col = predictions.column(j);
                let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + col.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                loss += lse - col[label];
                let best = (0..k).fold(0, |b, i| if col[i] > col[b] { i } else { b });
                correct += usize::from(best == label);
            }
            Ok(EvalMetrics { loss: loss / l as f64, accuracy: Some(correct as f64 / l as f64) })
        }
        _ => Err(LorsError::arg("target kind does not match the model head")),
    }
}

pub fn evaluate(model: &ToyModel, dataset: &Dataset) -> Result<EvalMetrics> {
    if dataset.is_empty() {
        return Err(LorsError::arg("dataset is empty"));
    }
    score(model.head(), &model.predict(&dataset.all().x)?, &dataset.all().target)
}

pub fn evaluate_base(model: &BaseModel, dataset: &Dataset) -> Result<EvalMetrics> {
    score(model.head, &model.predict(&dataset.all().x)?, &dataset.all().target)
}

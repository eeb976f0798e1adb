//! Benchmark harness: runs each variant's forward/backward on one layer and
//! compares the instrumented counters with the closed-form predictions.
//!
//! Wall time is informational only; MACs and saved elements must match the
//! predictions exactly.
//!
//! CSV columns (fixed): `variant,rows,cols,tokens,rank,macs_fwd_measured,
//! macs_fwd_predicted,macs_bwd_measured,macs_bwd_predicted,saved_measured,
//! saved_predicted,wall_ms_median,repeats`. Measured cells are empty when a
//! row was only predicted.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{predict_cost, Adapter, AdaptedLayer, AdapterPair, SppAdapter, Variant, DEFAULT_ALPHA};
use crate::error::{LorsError, Result};
use crate::graph::{CostCounters, Phase};
use crate::prune::prune_magnitude;
use crate::tensor::{DenseMatrix, RngState};

/// Layer shape `R×C`, token count `L` and adapter rank `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchShape {
    pub rows: usize,
    pub cols: usize,
    pub tokens: usize,
    pub rank: usize,
}

impl BenchShape {
    pub fn new(rows: usize, cols: usize, tokens: usize, rank: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || tokens == 0 || rank == 0 {
            return Err(LorsError::arg(format!("bench dimensions must be positive: {rows}x{cols}x{tokens}x{rank}")));
        }
        Ok(Self { rows, cols, tokens, rank })
    }

    /// Parses a comma-separated list such as `64x64x64x16,128x96x32x8`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let shapes = s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect::<Result<Vec<_>>>()?;
        if shapes.is_empty() {
            return Err(LorsError::arg("no shapes given"));
        }
        Ok(shapes)
    }
}

impl FromStr for BenchShape {
    type Err = LorsError;

    /// `RxCxLxr`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(['x', 'X']).collect();
        let nums = parts.iter().map(|p| p.trim().parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>();
        match nums.as_deref() {
            Ok([r, c, l, k]) => Self::new(*r, *c, *l, *k),
            _ => Err(LorsError::arg(format!("shape {s:?} is not of the form RxCxLxr"))),
        }
    }
}

impl fmt::Display for BenchShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.rows, self.cols, self.tokens, self.rank)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub shapes: Vec<BenchShape>,
    pub variants: Vec<Variant>,
    pub repeats: usize,
    pub seed: u64,
    /// Fraction of base weights pruned (by magnitude).
    pub sparsity: f64,
    /// Skip execution and report predictions only.
    pub predict_only: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            shapes: vec![BenchShape { rows: 64, cols: 64, tokens: 64, rank: 16 }],
            variants: Variant::ALL.to_vec(),
            repeats: 1,
            seed: 0,
            sparsity: 0.5,
            predict_only: false,
        }
    }
}

/// One variant on one shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: Variant,
    #[serde(flatten)]
    pub shape: BenchShape,
    pub macs_fwd_measured: Option<u64>,
    pub macs_fwd_predicted: u64,
    pub macs_bwd_measured: Option<u64>,
    pub macs_bwd_predicted: u64,
    pub saved_measured: Option<u64>,
    pub saved_predicted: u64,
    /// Median forward+backward time over the repeats, in milliseconds.
    pub wall_ms_median: Option<f64>,
    pub repeats: usize,
    /// Counter values differed between repeats.
    pub unstable: bool,
}

/// A measured cell that disagrees with its prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub variant: Variant,
    pub shape: BenchShape,
    pub column: String,
    pub measured: u64,
    pub predicted: u64,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}: measured {} predicted {}", self.variant, self.shape, self.column, self.measured, self.predicted)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

const CSV_HEADER: [&str; 13] = [
    "variant",
    "rows",
    "cols",
    "tokens",
    "rank",
    "macs_fwd_measured",
    "macs_fwd_predicted",
    "macs_bwd_measured",
    "macs_bwd_predicted",
    "saved_measured",
    "saved_predicted",
    "wall_ms_median",
    "repeats",
];

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl BenchReport {
    pub fn mismatches(&self) -> Vec<Mismatch> {
        let mut out = Vec::new();
        for row in &self.rows {
            let cells = [
                ("macs_fwd", row.macs_fwd_measured, row.macs_fwd_predicted),
                ("macs_bwd", row.macs_bwd_measured, row.macs_bwd_predicted),
                ("saved", row.saved_measured, row.saved_predicted),
            ];
            for (column, measured, predicted) in cells {
                if let Some(m) = measured.filter(|&m| m != predicted) {
                    out.push(Mismatch { variant: row.variant, shape: row.shape, column: column.into(), measured: m, predicted });
                }
            }
            if row.unstable {
                out.push(Mismatch {
                    variant: row.variant,
                    shape: row.shape,
                    column: "repeat_stability".into(),
                    measured: 1,
                    predicted: 0,
                });
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            let s = r.shape;
            w.write_record([
                r.variant.name().to_string(),
                s.rows.to_string(),
                s.cols.to_string(),
                s.tokens.to_string(),
                s.rank.to_string(),
                cell(r.macs_fwd_measured),
                r.macs_fwd_predicted.to_string(),
                cell(r.macs_bwd_measured),
                r.macs_bwd_predicted.to_string(),
                cell(r.saved_measured),
                r.saved_predicted.to_string(),
                cell(r.wall_ms_median),
                r.repeats.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| LorsError::Format(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Counter readings of one forward+backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Measurement {
    pub macs_forward: u64,
    pub macs_backward: u64,
    pub saved_elements: u64,
}

/// A pruned base with a nonzero adapter of the right kind for `variant`.
pub fn bench_layer(variant: Variant, shape: BenchShape, sparsity: f64, rng: &mut RngState) -> Result<AdaptedLayer> {
    let BenchShape { rows, cols, rank, .. } = shape;
    let base = prune_magnitude(&DenseMatrix::random_normal(rows, cols, rng, 0.0, 1.0), sparsity)?;
    let a = DenseMatrix::random_normal(rows, rank, rng, 0.0, 0.1);
    let adapter = if variant.is_spp() {
        Adapter::Spp(SppAdapter::new(a, DenseMatrix::random_normal(1, cols, rng, 0.0, 0.1), 0.0)?)
    } else {
        Adapter::LowRank(AdapterPair::new(a, DenseMatrix::random_normal(rank, cols, rng, 0.0, 0.1), DEFAULT_ALPHA)?)
    };
    AdaptedLayer::new(base, adapter, None, variant)
}

/// One instrumented forward and backward of `layer`.
pub fn measure(layer: &mut AdaptedLayer, x: &DenseMatrix, dy: &DenseMatrix) -> Result<Measurement> {
    let mut cc = CostCounters::new();
    let (_, mut ctx) = layer.forward(x, &mut cc)?;
    let saved_elements = ctx.saved_elements();
    cc.set_phase(Phase::Backward);
    ctx.backward(dy, &mut cc)?;
    Ok(Measurement { macs_forward: cc.macs_forward, macs_backward: cc.macs_backward, saved_elements })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every (shape, variant) pair sequentially on the calling thread.
pub fn run_bench(config: &BenchConfig) -> Result<BenchReport> {
    if config.repeats == 0 {
        return Err(LorsError::arg("repeats must be at least 1"));
    }
    if config.variants.is_empty() || config.shapes.is_empty() {
        return Err(LorsError::arg("need at least one shape and one variant"));
    }
    let root = RngState::new(config.seed);
    let mut report = BenchReport::default();
    for (si, &shape) in config.shapes.iter().enumerate() {
        for &variant in &config.variants {
            if variant.is_spp() && shape.cols % shape.rank != 0 {
                return Err(LorsError::arg(format!("{variant} needs r | C, but {shape} has C % r != 0")));
            }
            let p = predict_cost(variant, shape.rows, shape.cols, shape.tokens, shape.rank);
            let mut row = BenchRow {
                variant,
                shape,
                macs_fwd_measured: None,
                macs_fwd_predicted: p.macs_forward,
                macs_bwd_measured: None,
                macs_bwd_predicted: p.macs_backward,
                saved_measured: None,
                saved_predicted: p.saved_elements,
                wall_ms_median: None,
                repeats: config.repeats,
                unstable: false,
            };
            if !config.predict_only {
                // Same data for every variant of a shape.
                let mut rng = root.fork(si as u64);
                let mut layer = bench_layer(variant, shape, config.sparsity, &mut rng)?;
                let x = DenseMatrix::random_normal(shape.cols, shape.tokens, &mut rng, 0.0, 1.0);
                let dy = DenseMatrix::random_normal(shape.rows, shape.tokens, &mut rng, 0.0, 1.0);
                let mut first = None;
                let mut times = Vec::with_capacity(config.repeats);
                for _ in 0..config.repeats {
                    let start = Instant::now();
                    let m = measure(&mut layer, &x, &dy)?;
                    times.push(start.elapsed().as_secs_f64() * 1e3);
                    match first {
                        None => first = Some(m),
                        Some(f) => row.unstable |= f != m,
                    }
                }
                let m = first.expect("repeats >= 1");
                row.macs_fwd_measured = Some(m.macs_forward);
                row.macs_bwd_measured = Some(m.macs_backward);
                row.saved_measured = Some(m.saved_elements);
                row.wall_ms_median = Some(median(times));
            }
            report.rows.push(row);
        }
    }
    Ok(report)
}

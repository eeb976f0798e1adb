//! `lors`: prune, fine-tune, benchmark and verify sparse low-rank adapters.
//!
//! Exit codes: 0 success, 1 verification failure, 2 I/O, format or usage
//! error, 3 numeric failure, 4 counter mismatch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lors_core::adapters::{fault, Variant};
use lors_core::bench::{run_bench, BenchConfig, BenchShape};
use lors_core::checkpoint::Checkpoint;
use lors_core::init::{init_gradient_svd, InitSpec, InitStrategy};
use lors_core::prune::{prune_activation_scaled, prune_magnitude, prune_two_four, two_four_violations, CalibrationBatch, ScoreKind};
use lors_core::tensor::{self, DenseMatrix, RngState};
use lors_core::train::{
    evaluate, finetune, gaussian_clusters, teacher_student, BaseModel, Dataset, Head, Optimizer, TeacherStudentConfig, ToyModel,
    TrainConfig,
};
use lors_core::verify::{run_suites, Suite};
use lors_core::LorsError;

const EXIT_VERIFY: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser)]
#[command(name = "lors", version, about = "Sparsity-preserving low-rank adapters: prune, train, bench, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune every layer of a checkpoint.
    Prune(PruneArgs),
    /// Fine-tune adapters on a pruned checkpoint and write the merged result.
    Train(TrainArgs),
    /// Compare measured counters with the closed-form cost model.
    Bench(BenchArgs),
    /// Run the built-in correctness suites.
    Verify(VerifyArgs),
    /// Report the per-layer gradient-SVD statistics of a checkpoint.
    InitInspect(InspectArgs),
    /// Write a random dense teacher model together with a synthetic dataset.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PruneMethod {
    Magnitude,
    Activation,
    TwoFour,
}

#[derive(Clone, Copy, ValueEnum)]
enum Score {
    Magnitude,
    Activation,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "magnitude")]
    method: PruneMethod,
    /// Fraction of weights removed (ignored for two-four).
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    /// Scoring for two-four groups.
    #[arg(long, value_enum, default_value = "magnitude")]
    score: Score,
    /// Checkpoint holding `data.x` calibration inputs; defaults to the input's.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    TeacherStudent,
    Clusters,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// JSON training config; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    init: Option<InitStrategy>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, env = "LORS_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    optimizer: Option<Optimizer>,
    /// Dataset checkpoint (`data.x` plus `data.y` or `data.labels`).
    /// Defaults to the input checkpoint's data, or a generated task.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Task generated when no dataset is available.
    #[arg(long, value_enum, default_value = "teacher-student")]
    task: Task,
    /// Teacher for the teacher-student task; defaults to the input model.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, short)]
    out: PathBuf,
    /// Metrics CSV; defaults to the output path with a `.csv` extension.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated `RxCxLxr` shapes.
    #[arg(long, default_value = "64x64x64x16")]
    shapes: String,
    /// Comma-separated variants, or `all`.
    #[arg(long, default_value = "all")]
    variants: String,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, env = "LORS_SEED", default_value_t = 0)]
    seed: u64,
    /// Report predictions without running anything.
    #[arg(long)]
    predict_only: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Negative control: make LoRS do extra backward work.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// `all` or a comma-separated list of suites.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, env = "LORS_SEED", default_value_t = 0)]
    seed: u64,
    /// Negative control: flip the sign of the LoRS `dA`.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 32)]
    probe_size: usize,
    #[arg(long)]
    mask_gradient: bool,
}

#[derive(Args)]
struct GenerateArgs {
    /// Layer widths `in,hidden…,out`.
    #[arg(long, default_value = "64,64,64,16")]
    dims: String,
    #[arg(long, value_enum, default_value = "teacher-student")]
    task: Task,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    /// Latent dimension of teacher-student inputs (defaults to min(16, in)).
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Spread of cluster centres.
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, env = "LORS_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

/// A message and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<LorsError> for Failure {
    fn from(e: LorsError) -> Self {
        let code = match e {
            LorsError::Numeric { .. } | LorsError::NonFiniteLoss { .. } => EXIT_NUMERIC,
            _ => EXIT_IO,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(EXIT_IO, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prune(a) => prune(a),
        Command::Train(a) => train(a),
        Command::Bench(a) => bench(a),
        Command::Verify(a) => verify(a),
        Command::InitInspect(a) => init_inspect(a),
        Command::Generate(a) => generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: writing stdout: {e}");
        }
    }
}

fn print_json(v: &serde_json::Value) {
    emit(&format!("{}\n", serde_json::to_string_pretty(v).expect("JSON values always serialise")));
}

/// Input of every layer when the dense model runs on `x`.
fn layer_inputs(model: &BaseModel, x: &DenseMatrix) -> Result<Vec<DenseMatrix>, LorsError> {
    let mut h = x.clone();
    let mut out = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        out.push(h.clone());
        h = tensor::matmul(l.weight.values(), &h)?;
        if let Some(b) = &l.bias {
            h = tensor::add_column_broadcast(&h, b)?;
        }
        h = h.map(|v| v.max(0.0));
    }
    Ok(out)
}

fn prune(a: PruneArgs) -> CmdResult {
    let input = load(&a.input)?;
    let model = input.to_model()?;
    let needs_calib = matches!(a.method, PruneMethod::Activation) || matches!((a.method, a.score), (PruneMethod::TwoFour, Score::Activation));
    let calib = if needs_calib {
        let source = match &a.calib {
            Some(p) => load(p)?,
            None => input.clone(),
        };
        let x = source.require("data.x").map_err(|_| Failure::new(EXIT_IO, "activation scoring needs calibration data (data.x)"))?;
        Some(layer_inputs(&model, x)?)
    } else {
        None
    };
    let pruned = model.map_weights(|i, w| {
        let batch = calib.as_ref().map(|c| CalibrationBatch::new(c[i].clone())).transpose()?;
        match a.method {
            PruneMethod::Magnitude => prune_magnitude(w.values(), a.ratio),
            PruneMethod::Activation => prune_activation_scaled(w.values(), batch.as_ref().expect("calibrated"), a.ratio),
            PruneMethod::TwoFour => {
                let score = match a.score {
                    Score::Magnitude => ScoreKind::Magnitude,
                    Score::Activation => ScoreKind::ActivationScaled,
                };
                prune_two_four(w.values(), score, batch.as_ref())
            }
        }
    })?;

    let mut out = Checkpoint::from_model(&pruned);
    if let Ok(data) = input.to_dataset() {
        out.insert_dataset(&data);
    }
    out.save(&a.out)?;

    let layers: Vec<_> = pruned
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let w = l.weight.values();
            json!({
                "layer": i,
                "rows": w.rows(),
                "cols": w.cols(),
                "nonzero": w.count_nonzero(),
                "density": l.weight.nonzero_fraction(),
                "two_four_violations": two_four_violations(w),
            })
        })
        .collect();
    let (nnz, total) = pruned.layers.iter().fold((0, 0), |(n, t), l| (n + l.weight.values().count_nonzero(), t + l.weight.values().len()));
    print_json(&json!({ "output": a.out, "layers": layers, "density": nnz as f64 / total as f64 }));
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::toy(),
    };
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(s) = a.init {
        cfg.init.strategy = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(r) = a.rank {
        cfg.rank = r;
    }
    if let Some(al) = a.alpha {
        cfg.alpha = al;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(o) = a.optimizer {
        cfg.optimizer = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_data(a: &TrainArgs, input: &Checkpoint, model: &BaseModel, seed: u64) -> Result<Dataset, Failure> {
    if let Some(p) = &a.data {
        return Ok(load(p)?.to_dataset()?);
    }
    if let Ok(d) = input.to_dataset() {
        return Ok(d);
    }
    let mut rng = RngState::new(seed).fork(0x7a5c);
    Ok(match (a.task, model.head) {
        (Task::TeacherStudent, Head::Regression) => {
            let teacher = match &a.teacher {
                Some(p) => load(p)?.to_model()?,
                None => model.clone(),
            };
            let latent = teacher.input_dim().min(16);
            teacher_student(&teacher, &TeacherStudentConfig { samples: a.samples, latent_dim: latent, noise: 0.0 }, &mut rng)?
        }
        (Task::Clusters, Head::Classification { classes }) => gaussian_clusters(model.input_dim(), a.samples, classes, 3.0, &mut rng)?,
        _ => return Err(Failure::new(EXIT_IO, "task does not match the model head (teacher-student is regression, clusters is classification)")),
    })
}

fn train(a: TrainArgs) -> CmdResult {
    let cfg = train_config(&a)?;
    let input = load(&a.input)?;
    let base = input.to_model()?;
    let data = train_data(&a, &input, &base, cfg.seed)?;
    let start = evaluate(&ToyModel::adapt(&base, cfg.variant, cfg.rank, cfg.alpha)?, &data)?;
    let outcome = finetune(&base, &data, &cfg)?;
    let end = evaluate(&outcome.model, &data)?;

    let mut out = Checkpoint::from_adapted(&outcome.model)?;
    out.insert_dataset(&data);
    out.save(&a.out)?;
    let metrics = a.metrics.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    outcome.trace.write_csv(fs::File::create(&metrics)?)?;

    print_json(&json!({
        "variant": cfg.variant,
        "steps": cfg.steps,
        "seed": cfg.seed,
        "output": a.out,
        "metrics": metrics,
        "initial": start,
        "final": end,
        "final_batch_loss": outcome.trace.rows.last().map(|r| r.loss),
    }));
    Ok(())
}

fn parse_variants(s: &str) -> Result<Vec<Variant>, LorsError> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(Variant::ALL.to_vec());
    }
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
}

fn bench(a: BenchArgs) -> CmdResult {
    let cfg = BenchConfig {
        shapes: BenchShape::parse_list(&a.shapes)?,
        variants: parse_variants(&a.variants)?,
        repeats: a.repeats,
        seed: a.seed,
        predict_only: a.predict_only,
        ..BenchConfig::default()
    };
    fault::set_lors_explicit_dw(a.inject_fault);
    let report = run_bench(&cfg);
    fault::set_lors_explicit_dw(false);
    let report = report?;

    if let Some(p) = &a.csv {
        report.write_csv(fs::File::create(p)?)?;
    }
    if let Some(p) = &a.json {
        fs::write(p, report.to_json()?)?;
    }
    if a.csv.is_none() && a.json.is_none() {
        emit(&report.to_csv_string()?);
    }
    let mismatches = report.mismatches();
    if mismatches.is_empty() {
        return Ok(());
    }
    for m in &mismatches {
        eprintln!("mismatch: {m}");
    }
    Err(Failure::new(EXIT_MISMATCH, format!("{} counter cells differ from the cost model", mismatches.len())))
}

fn verify(a: VerifyArgs) -> CmdResult {
    let suites = Suite::parse_selector(&a.suite)?;
    fault::set_lors_sign_flip(a.inject_fault);
    let report = run_suites(&suites, a.seed);
    fault::set_lors_sign_flip(false);
    emit(&report.render_table());
    if report.passed() {
        return Ok(());
    }
    for c in report.failures() {
        eprintln!("failed: {}/{}: {}", c.suite, c.case, c.detail);
    }
    Err(Failure::new(EXIT_VERIFY, "verification failed"))
}

fn init_inspect(a: InspectArgs) -> CmdResult {
    let input = load(&a.input)?;
    let base = input.to_model()?;
    let data = match &a.data {
        Some(p) => load(p)?.to_dataset()?,
        None => input.to_dataset().map_err(|_| Failure::new(EXIT_IO, "no dataset: pass --data or use a checkpoint with data.*"))?,
    };
    let n = a.probe_size.clamp(1, data.len());
    let probe = data.batch(&(0..n).collect::<Vec<_>>())?;
    let mut model = ToyModel::adapt(&base, Variant::Lors, a.rank, lors_core::adapters::DEFAULT_ALPHA)?;
    let spec = InitSpec { mask_gradient: a.mask_gradient, probe_size: n, ..InitSpec::default() };
    let report = init_gradient_svd(&mut model, &probe, a.rank, &spec)?;
    print_json(&serde_json::to_value(&report).map_err(LorsError::from)?);
    Ok(())
}

fn generate(a: GenerateArgs) -> CmdResult {
    let dims: Vec<usize> = a
        .dims
        .split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|e| Failure::new(EXIT_IO, format!("bad width {d:?}: {e}"))))
        .collect::<Result<_, _>>()?;
    let out_dim = *dims.last().unwrap_or(&0);
    let head = match a.task {
        Task::TeacherStudent => Head::Regression,
        Task::Clusters => Head::Classification { classes: out_dim },
    };
    let mut rng = RngState::new(a.seed);
    let model = BaseModel::random(&dims, head, &mut rng)?;
    let data = match a.task {
        Task::TeacherStudent => {
            let latent = a.latent.unwrap_or(model.input_dim().min(16));
            teacher_student(&model, &TeacherStudentConfig { samples: a.samples, latent_dim: latent, noise: a.noise }, &mut rng)?
        }
        Task::Clusters => gaussian_clusters(model.input_dim(), a.samples, out_dim, a.separation, &mut rng)?,
    };
    let mut ck = Checkpoint::from_model(&model);
    ck.insert_dataset(&data);
    ck.save(&a.out)?;
    print_json(&json!({ "output": a.out, "dims": dims, "samples": data.len() }));
    Ok(())
}

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use spangrad::attention::GradMethod;
use spangrad::audit::{
    decompose, gradcheck, model_gradcheck, verify, AuditReport, DecomposeParams, GradcheckParams,
    Suite, ValueSource, VerifyParams, DEFAULT_STEP,
};
use spangrad::experiment::{
    run_experiment, CorpusSpec, ExperimentOutcome, ExperimentSpec, RunOutcome, RunSpec,
};
use spangrad::grad::{BlockGradMode, ScaleConfig, SimplestScales};
use spangrad::model::ModelConfig;
use spangrad::train::{MetricRecord, Split, TrainConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Span decomposition of attention gradients: audits, gradient checks and experiments.
#[derive(Parser)]
#[command(name = "spangrad", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run invariant suites and write an audit report.
    Verify(VerifyArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the eight score blocks, their norms and the inner-product table.
    Decompose(DecomposeArgs),
    /// Run every method in an experiment spec on shared data and initialization.
    Experiment(ExperimentArgs),
    /// Train a single configuration (an experiment with one run).
    Train(Box<TrainArgs>),
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite name, comma list, or `all`.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long = "T", default_value_t = 16)]
    seq_len: usize,
    #[arg(long = "d", default_value_t = 4)]
    head_dim: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Replaces every default tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Seeded instances per suite.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value = "spangrad-verify.json")]
    report: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Standard,
    Unidirectional,
    Simplest,
    Reductionistic,
    Score,
    /// Whole single-layer model, standard backward.
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Routed,
    Perblock,
}

impl From<Mode> for BlockGradMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Routed => BlockGradMode::Routed,
            Mode::Perblock => BlockGradMode::PerBlockSoftmax,
        }
    }
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "score")]
    method: Method,
    /// α0..α3 for score and reductionistic methods.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.0, 0.0, 0.0])]
    scales: Vec<f64>,
    /// α∥,α⊥ for simplest and unidirectional methods.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0])]
    simplest: Vec<f64>,
    #[arg(long, value_enum, default_value = "routed")]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "T", default_value_t = 8)]
    seq_len: usize,
    /// Head dimension; model width for `--method model`.
    #[arg(long = "d", default_value_t = 2)]
    head_dim: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value = "spangrad-gradcheck.json")]
    report: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Values {
    Random,
    /// Use the keys as values.
    Keys,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "T", default_value_t = 16)]
    seq_len: usize,
    #[arg(long = "d", default_value_t = 4)]
    head_dim: usize,
    #[arg(long, value_enum, default_value = "random")]
    values: Values,
    #[arg(long)]
    zero_queries: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Print every training record instead of validation records only.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "run")]
    label: String,
    #[arg(long, default_value = "standard")]
    method: String,
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    simplest: Option<Vec<f64>>,
    /// QKV modulation such as QKV001.
    #[arg(long)]
    modulation: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long = "T", default_value_t = 64)]
    seq_len: usize,
    /// Model width.
    #[arg(long = "d", default_value_t = 32)]
    model_dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    accumulation: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Byte corpus; a synthetic corpus is generated when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 1 << 20)]
    synthetic_bytes: usize,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    #[arg(long)]
    save_checkpoint: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Train(a) => cmd_train(*a),
    }
}

fn finish(report: &AuditReport, path: &Path) -> Result<bool> {
    report
        .write_json(path)
        .with_context(|| format!("writing {}", path.display()))?;
    // A closed pipe (e.g. `| head`) must not turn a pass into a panic.
    let mut out = io::stdout().lock();
    let _ = write!(out, "{report}");
    let _ = writeln!(out, "report: {}", path.display());
    Ok(report.overall)
}

fn cmd_verify(a: VerifyArgs) -> Result<bool> {
    let suites = Suite::parse_selector(&a.suite)?;
    let params = VerifyParams {
        instances: a.instances,
        tol: a.tol,
        step: a.step,
        ..VerifyParams::new(a.seed, a.seq_len, a.head_dim)
    };
    let report = verify(&suites, &params)?;
    finish(&report, &a.report)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let method = match a.method {
        Method::Model => {
            let report = model_gradcheck(a.seed, a.seq_len, a.head_dim, a.step, a.tol)?;
            return finish(&report, &a.report);
        }
        Method::Standard => GradMethod::Standard,
        Method::Unidirectional => GradMethod::Unidirectional,
        Method::Simplest => GradMethod::Simplest,
        Method::Reductionistic => GradMethod::Reductionistic,
        Method::Score => GradMethod::ScoreDecomposition,
    };
    let [a0, a1, a2, a3] = values::<4>(a.scales)?;
    let [par, perp] = values::<2>(a.simplest)?;
    let params = GradcheckParams {
        scales: ScaleConfig::new([a0, a1, a2, a3])?,
        simplest: SimplestScales::new(par, perp)?,
        mode: a.mode.into(),
        step: a.step,
        tol: a.tol,
        ..GradcheckParams::new(method, a.seed, a.seq_len, a.head_dim)
    };
    let report = gradcheck(&params)?;
    finish(&report, &a.report)
}

fn cmd_decompose(a: DecomposeArgs) -> Result<bool> {
    let params = DecomposeParams {
        seed: a.seed,
        seq_len: a.seq_len,
        head_dim: a.head_dim,
        values: match a.values {
            Values::Random => ValueSource::Random,
            Values::Keys => ValueSource::Keys,
        },
        zero_queries: a.zero_queries,
    };
    let d = decompose(&params)?;
    d.write(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let s = d.summary();
    println!("block  frobenius");
    for (i, n) in d.norms.iter().enumerate() {
        println!("S{}     {n:.6e}", i + 1);
    }
    println!("score frobenius^2          {:.6e}", s.score_frobenius_sq);
    println!(
        "sum of block frobenius^2   {:.6e}",
        s.block_frobenius_sq_sum
    );
    println!("exception cross terms      {:.6e}", s.exception_cross_sum);
    println!(
        "block sum relative error   {:.3e}",
        s.block_sum_relative_error
    );
    println!("written to {}", a.out.display());
    Ok(true)
}

fn progress(verbose: bool) -> impl FnMut(&str, &MetricRecord) {
    move |label, r| {
        if verbose || r.split == Split::Validation {
            eprintln!(
                "[{label}] step {:>6} epoch {:>3} {:<10} loss {:.5} ({:.1}s)",
                r.step,
                r.epoch,
                r.split.as_str(),
                r.loss,
                r.wall_ms / 1e3
            );
        }
    }
}

fn report_outcome(out: &ExperimentOutcome, dir: &Path) -> bool {
    println!(
        "{:<16} {:<24} {:<16} {:>12} {:>10}",
        "label", "method", "scales", "min_val", "delta_%"
    );
    for r in &out.summary {
        let num = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        println!(
            "{:<16} {:<24} {:<16} {:>12} {:>10}",
            r.label,
            r.method,
            r.scales,
            num(r.min_val_loss, 5),
            num(r.delta_pct_vs_standard, 3)
        );
    }
    for r in &out.runs {
        match &r.outcome {
            RunOutcome::Completed => {}
            RunOutcome::Diverged { step, loss } => {
                eprintln!("[{}] diverged at step {step} (loss {loss})", r.label)
            }
            RunOutcome::Failed { message } => eprintln!("[{}] failed: {message}", r.label),
        }
    }
    println!("results: {}", dir.display());
    out.all_completed()
}

fn cmd_experiment(a: ExperimentArgs) -> Result<bool> {
    let spec = ExperimentSpec::from_json_file(&a.spec)
        .with_context(|| format!("reading {}", a.spec.display()))?;
    let base = a.spec.parent().map(Path::to_path_buf);
    let out = run_experiment(&spec, &a.out, base.as_deref(), progress(a.verbose))?;
    Ok(report_outcome(&out, &a.out))
}

fn values<const N: usize>(v: Vec<f64>) -> Result<[f64; N]> {
    let n = v.len();
    <[f64; N]>::try_from(v).map_err(|_| anyhow!("expected {N} comma-separated values, got {n}"))
}

fn cmd_train(a: TrainArgs) -> Result<bool> {
    let mut model = ModelConfig::new(a.seq_len, a.model_dim, a.heads, a.layers);
    if let Some(p) = a.dropout {
        model.dropout_rate = p;
    }
    let d = TrainConfig::default();
    let train = TrainConfig {
        micro_batch: a.micro_batch.unwrap_or(d.micro_batch),
        accumulation_steps: a.accumulation.unwrap_or(d.accumulation_steps),
        epochs: a.epochs.unwrap_or(d.epochs),
        learning_rate: a.lr.unwrap_or(d.learning_rate),
        seed: a.seed.unwrap_or(d.seed),
        eval_every: a.eval_every.unwrap_or(d.eval_every),
        max_steps: a.max_steps.or(d.max_steps),
        ..d
    };
    let method: GradMethod = a.method.parse()?;
    let run = RunSpec {
        label: a.label.clone(),
        method,
        scales: a.scales.map(values::<4>).transpose()?,
        simplest: a.simplest.map(values::<2>).transpose()?,
        modulation: a.modulation,
        mode: a.mode.map(Into::into),
    };
    if run.scales.is_some()
        && !matches!(
            method,
            GradMethod::ScoreDecomposition | GradMethod::Reductionistic
        )
    {
        bail!("--scales applies to score and reductionistic methods");
    }
    let spec = ExperimentSpec {
        label: a.label,
        model,
        train,
        corpus: match a.corpus {
            Some(p) => CorpusSpec::Path(p),
            None => CorpusSpec::Synthetic {
                bytes: a.synthetic_bytes,
                seed: 1,
            },
        },
        validation_fraction: a.validation_fraction,
        init_seed: a.init_seed,
        baseline: None,
        save_checkpoints: a.save_checkpoint,
        runs: vec![run],
    };
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(
        a.out.join("spec.json"),
        serde_json::to_string_pretty(&spec)?,
    )?;
    let out = run_experiment(&spec, &a.out, None, progress(false))?;
    Ok(report_outcome(&out, &a.out))
}

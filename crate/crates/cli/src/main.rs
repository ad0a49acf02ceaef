//! `ladabert`: plan, apply and analyse hybrid compression of toy transformer bundles.

mod files;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ladabert::analysis::{
    bias_matrix, compare_curves, compress_matrix, default_split, read_curve, write_comparison, AnalysisError,
    BiasHistogram, BiasMode, DEFAULT_BINS,
};
use ladabert::budget::{plan_check, random_search, solve_budget, BudgetError, BundleLayout, CompressionPlan};
use ladabert::compress::{compress_bundle, CompressError};
use ladabert::distill::DistillConfig;
use ladabert::factorize::FactorizeError;
use ladabert::model::{Model, ModelConfig};
use ladabert::pipeline::{run_pipeline, write_curve, PipelineConfig, PipelineError};
use ladabert::svd::SvdError;
use ladabert::task::{generate_task, SyntheticTask, TaskConfig};
use ladabert::train::{accuracy, train_supervised, AdamConfig, TrainConfig, DEFAULT_LEARNING_RATE};
use ladabert::{Group, ParamBundle};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXIT_INFEASIBLE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "ladabert", version, about = "Hybrid SVD + pruning compression with distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a compression plan for a bundle.
    Plan(PlanArgs),
    /// Apply a plan to a bundle.
    Compress(CompressArgs),
    /// Report target against achieved fractions for a plan.
    Check(CheckArgs),
    /// Iteratively compress a teacher with distillation on the synthetic task.
    Distill(DistillArgs),
    /// Train a teacher on the synthetic task.
    TrainTeacher(TrainTeacherArgs),
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Overall retained fraction P.
    #[arg(long)]
    target: f64,
    #[arg(long, requires = "p_svd", conflicts_with = "search")]
    p_embd: Option<f64>,
    #[arg(long, requires = "p_embd", conflicts_with = "search")]
    p_svd: Option<f64>,
    /// Random-search trials over (p_embd, p_svd), scored by one-shot reconstruction error.
    #[arg(long)]
    search: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-iteration retention for the iterative schedule.
    #[arg(long)]
    delta: Option<f64>,
    /// Plan file to write; printed when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompressArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// Compress straight to the plan's targets. Iterative compression needs a
    /// teacher and a task; use `distill` for that.
    #[arg(long)]
    one_shot: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    plan: PathBuf,
}

#[derive(Debug, Args)]
struct DistillArgs {
    /// Teacher bundle; needs a `.config` sidecar.
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    task_seed: u64,
    /// Output directory for `student.bundle` and `curve.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the plan's delta.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    epochs_per_iteration: usize,
    #[arg(long)]
    max_steps_per_iteration: Option<usize>,
    #[arg(long, default_value_t = 0)]
    final_steps: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    eval_every: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Divide teacher logits by the temperature as well.
    #[arg(long)]
    symmetric_temperature: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainTeacherArgs {
    #[arg(long)]
    task_seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Initialisation seed; defaults to the task seed plus 100.
    #[arg(long)]
    init_seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Histogram of compressed-minus-original values for one matrix.
    Bias(BiasArgs),
    /// Steps-to-threshold and final values of two learning curves.
    Curves(CurvesArgs),
}

#[derive(Debug, Args)]
struct BiasArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Entry to analyse; defaults to the largest encoder matrix.
    #[arg(long)]
    entry: Option<String>,
    /// One of prune, svd, hybrid.
    #[arg(long)]
    mode: BiasMode,
    #[arg(long)]
    retain: f64,
    /// Hybrid split as `svd,prune`; defaults to (min(1, 2r), r / svd).
    #[arg(long, value_parser = parse_pair)]
    split: Option<(f64, f64)>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CurvesArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value = "validation_accuracy")]
    metric: String,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.8, 0.9])]
    thresholds: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated numbers")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(a)?, num(b)?))
}

/// A check that ran but found the plan unattainable.
#[derive(Debug)]
struct Infeasible(String);

impl std::fmt::Display for Infeasible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Infeasible {}

fn read_plan(path: &Path) -> Result<CompressionPlan> {
    let text = fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
    text.parse().with_context(|| format!("parsing plan {}", path.display()))
}

fn relative_error(original: &ParamBundle, masks: &ladabert::model::MaskSet, plan: &CompressionPlan) -> f64 {
    let Ok(c) = compress_bundle(original, masks, plan.fractions()) else {
        return f64::INFINITY;
    };
    let (mut err, mut norm) = (0.0, 0.0);
    for (name, e) in original.iter() {
        let approx = match (c.bundle.matrix(name), c.bundle.matrix(&format!("{name}::a"))) {
            (Some(m), _) => m.clone(),
            (None, Some(a)) => a.matmul_nt(c.bundle.matrix(&format!("{name}::b")).expect("factor pair")).expect("shapes"),
            _ => continue,
        };
        err += e.matrix.sub(&approx).expect("shapes").frobenius_norm().powi(2);
        norm += e.matrix.frobenius_norm().powi(2);
    }
    (err / norm.max(f64::MIN_POSITIVE)).sqrt()
}

fn plan(args: PlanArgs) -> Result<()> {
    let (bundle, masks) = files::read_bundle(&args.bundle)?;
    let layout = BundleLayout::from(&bundle);
    let mut plan = match (args.search, args.p_embd, args.p_svd) {
        (Some(trials), _, _) => {
            random_search(&layout, args.target, trials, args.seed, |p| -relative_error(&bundle, &masks, p))?
        }
        (None, Some(embd), Some(svd)) => solve_budget(&layout, args.target, embd, svd)?,
        _ => bail!("give either --p-embd and --p-svd, or --search"),
    };
    if let Some(d) = args.delta {
        plan = plan.with_delta(d);
    }
    plan.validate()?;
    let report = plan_check(&layout, &plan);
    eprintln!("{report}");
    files::write_text(args.out.as_deref(), &plan.to_text())?;
    if !report.passed() {
        return Err(Infeasible(report.violations.join("; ")).into());
    }
    Ok(())
}

fn check(args: CheckArgs) -> Result<()> {
    let (bundle, _) = files::read_bundle(&args.bundle)?;
    let plan = read_plan(&args.plan)?;
    let report = plan_check(&BundleLayout::from(&bundle), &plan);
    println!("{report}");
    if !report.passed() {
        return Err(Infeasible(report.violations.join("; ")).into());
    }
    Ok(())
}

fn compress(args: CompressArgs) -> Result<()> {
    if !args.one_shot {
        bail!("only --one-shot compression works on a bare bundle; use `distill` for the iterative schedule");
    }
    let (bundle, masks) = files::read_bundle(&args.bundle)?;
    let plan = read_plan(&args.plan)?;
    let layout = BundleLayout::from(&bundle);
    let report = plan_check(&layout, &plan);
    if !report.passed() {
        return Err(Infeasible(report.violations.join("; ")).into());
    }
    let out = compress_bundle(&bundle, &masks, plan.fractions())?;
    files::write_bundle(&args.out, &out.bundle, &out.masks)?;
    let config = files::sidecar(&args.bundle, "config");
    if config.exists() {
        fs::copy(&config, files::sidecar(&args.out, "config")).context("copying model config")?;
    }
    println!(
        "retained {} of {} parameters ({:.4})",
        out.retained_params(),
        layout.counts().total,
        out.retained_params() as f64 / layout.counts().total as f64
    );
    Ok(())
}

fn task_for(config: &ModelConfig, seed: u64) -> Result<SyntheticTask> {
    let defaults = TaskConfig::default();
    Ok(generate_task(TaskConfig {
        seed,
        num_classes: config.num_classes,
        vocab_size: config.vocab_size,
        min_len: defaults.min_len.min(config.max_seq_len),
        max_len: defaults.max_len.min(config.max_seq_len),
        ..defaults
    })?)
}

fn distill(args: DistillArgs) -> Result<()> {
    let teacher = files::read_model(&args.teacher)?;
    let mut plan = read_plan(&args.plan)?;
    if let Some(d) = args.delta {
        plan = plan.with_delta(d);
    }
    let task = task_for(&teacher.config, args.task_seed)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let config = PipelineConfig {
        distill: DistillConfig {
            temperature: args.temperature,
            symmetric_temperature: args.symmetric_temperature,
            ..DistillConfig::default()
        },
        adam: AdamConfig { learning_rate: args.lr, ..AdamConfig::default() },
        batch_size: args.batch_size,
        epochs_per_iteration: args.epochs_per_iteration,
        max_steps_per_iteration: args.max_steps_per_iteration,
        final_steps: args.final_steps,
        eval_every: args.eval_every,
        seed: args.seed,
        dump_dir: Some(args.out.clone()),
        ..PipelineConfig::default()
    };
    let result = run_pipeline(&teacher, &plan, &task, &config)?;
    let student_path = args.out.join("student.bundle");
    files::write_model(&student_path, &result.student)?;
    let curve_path = args.out.join("curve.csv");
    let file = fs::File::create(&curve_path).with_context(|| format!("creating {}", curve_path.display()))?;
    write_curve(file, &result.records)?;
    for s in &result.schedule {
        println!("iteration {}: budget {:.4}, retained {:.4}", s.iteration, s.budget, s.retained_fraction);
    }
    println!(
        "teacher accuracy {:.4}, student accuracy {:.4} after {} steps",
        result.teacher_accuracy,
        result.final_accuracy().unwrap_or(f64::NAN),
        result.steps()
    );
    Ok(())
}

fn train_teacher(args: TrainTeacherArgs) -> Result<()> {
    let config = ModelConfig { num_classes: args.classes, ..ModelConfig::default() };
    let task = task_for(&config, args.task_seed)?;
    let init_seed = args.init_seed.unwrap_or(args.task_seed + 100);
    let mut model = Model::init(config, &mut ChaCha8Rng::seed_from_u64(init_seed))?;
    let train = TrainConfig {
        adam: AdamConfig { learning_rate: args.lr, ..AdamConfig::default() },
        epochs: args.epochs,
        seed: args.task_seed,
        ..TrainConfig::default()
    };
    let losses = train_supervised(&mut model, &task.train, &train)?;
    files::write_model(&args.out, &model)?;
    println!(
        "final epoch loss {:.4}, validation accuracy {:.4}",
        losses.last().copied().unwrap_or(f64::NAN),
        accuracy(&model, &task.validation)?
    );
    Ok(())
}

fn bias(args: BiasArgs) -> Result<()> {
    let (bundle, _) = files::read_bundle(&args.bundle)?;
    let name = match args.entry {
        Some(n) => n,
        None => bundle
            .iter()
            .filter(|(_, e)| e.group == Group::Encoder && e.matrix.rows() > 1)
            .max_by_key(|(_, e)| e.matrix.len())
            .map(|(n, _)| n.to_string())
            .ok_or_else(|| anyhow!("bundle has no encoder matrix; pass --entry"))?,
    };
    let w = bundle.matrix(&name).ok_or_else(|| anyhow!("bundle has no entry {name:?}"))?;
    let split = args.split.unwrap_or_else(|| default_split(args.retain));
    let compressed = compress_matrix(w, args.mode, args.retain, split)?;
    let hist = BiasHistogram::new(args.mode, &bias_matrix(w, &compressed)?, args.bins)?;
    eprintln!("{name}: mean {:.6e}, std {:.6e}, exact zeros {}", hist.mean, hist.std, hist.exact_zeros);
    files::write_text(args.out.as_deref(), &hist.to_csv())
}

fn curves(args: CurvesArgs) -> Result<()> {
    let open = |p: &Path| fs::File::open(p).with_context(|| format!("opening {}", p.display()));
    let a = read_curve(open(&args.a)?, &args.metric).with_context(|| format!("reading {}", args.a.display()))?;
    let b = read_curve(open(&args.b)?, &args.metric).with_context(|| format!("reading {}", args.b.display()))?;
    let (sa, sb) = compare_curves(&a, &b, &args.thresholds);
    let mut buf = Vec::new();
    write_comparison(&mut buf, &[("a", &sa), ("b", &sb)])?;
    files::write_text(args.out.as_deref(), &String::from_utf8(buf)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plan(a) => plan(a),
        Command::Compress(a) => compress(a),
        Command::Check(a) => check(a),
        Command::Distill(a) => distill(a),
        Command::TrainTeacher(a) => train_teacher(a),
        Command::Analyze(AnalyzeCommand::Bias(a)) => bias(a),
        Command::Analyze(AnalyzeCommand::Curves(a)) => curves(a),
    }
}

fn is_numeric(e: &(dyn std::error::Error + 'static)) -> bool {
    matches!(e.downcast_ref::<SvdError>(), Some(SvdError::NoConvergence { .. }))
        || matches!(e.downcast_ref::<FactorizeError>(), Some(FactorizeError::Svd(SvdError::NoConvergence { .. })))
        || matches!(
            e.downcast_ref::<CompressError>(),
            Some(CompressError::Factorize { source: FactorizeError::Svd(SvdError::NoConvergence { .. }), .. })
        )
        || matches!(e.downcast_ref::<PipelineError>(), Some(PipelineError::Diverged { .. }))
}

fn is_infeasible(e: &(dyn std::error::Error + 'static)) -> bool {
    e.is::<Infeasible>()
        || matches!(
            e.downcast_ref::<BudgetError>(),
            Some(BudgetError::Infeasible { .. } | BudgetError::NoFeasiblePlan { .. })
        )
        || matches!(e.downcast_ref::<PipelineError>(), Some(PipelineError::InfeasiblePlan(_)))
        || matches!(e.downcast_ref::<AnalysisError>(), Some(AnalysisError::InfeasibleSplit { .. }))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(is_numeric) {
        EXIT_NUMERIC
    } else if err.chain().any(is_infeasible) {
        EXIT_INFEASIBLE
    } else {
        EXIT_IO
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors count as format errors; help and version are successes.
            return if e.use_stderr() { ExitCode::from(EXIT_IO) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

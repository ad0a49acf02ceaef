//! End-to-end acceptance checks. Runs as a plain binary (`harness = false`) so
//! every criterion prints exactly one PASS/FAIL line even without `--nocapture`.

use std::f64::consts::LN_2;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use ladabert::analysis::{bias_trials, gaussian_matrix};
use ladabert::budget::{plan_check, solve_budget, BundleLayout};
use ladabert::distill::{
    distill_loss_and_grads, mse_loss, prediction_loss, teacher_signals, total_distill_loss, DistillConfig,
    DistillSignals,
};
use ladabert::factorize::{factor_ratio, rank_for_ratio};
use ladabert::hybrid::{compress_layer, hybrid_ratio};
use ladabert::model::{Model, ModelConfig, TraceGrads, Weight};
use ladabert::pipeline::{pure_kd_baseline, run_pipeline, run_pipeline_with_signals, PipelineConfig, PipelineResult};
use ladabert::svd::svd;
use ladabert::task::{generate_task, TaskConfig};
use ladabert::train::{accuracy, train_supervised, AdamConfig, TrainConfig};
use ladabert::DenseMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<Duration, String> {
    let elapsed = start.elapsed();
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))?;
    Ok(elapsed)
}

fn frobenius(m: &DenseMatrix) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

// ---------------------------------------------------------------------------
// 1. SVD correctness

const SVD_MATRICES: usize = 200;
const SVD_RANDOM_COMPETITORS: usize = 100;
const SVD_TOL: f64 = 1e-8;

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_orth, mut worst_recon, mut worst_trunc) = (0.0f64, 0.0f64, 0.0f64);
    let mut smallest_margin = f64::INFINITY;
    for k in 0..SVD_MATRICES {
        let (m, n) = (rng.random_range(1..=64), rng.random_range(1..=48));
        let w = gaussian_matrix(m, n, 10_000 + k as u64);
        let s = svd(&w).map_err(|e| e.to_string())?;
        let p = s.rank_capacity();
        let eye = DenseMatrix::identity(p);
        worst_orth = worst_orth
            .max(max_abs_diff(&s.u.transpose().matmul(&s.u).unwrap(), &eye))
            .max(max_abs_diff(&s.v.transpose().matmul(&s.v).unwrap(), &eye));
        worst_recon = worst_recon.max(max_abs_diff(&s.reconstruct(), &w));

        let r = rng.random_range(1..=p);
        let truncated = s.truncate(r).unwrap().reconstruct();
        let actual = frobenius(&w.sub(&truncated).unwrap());
        let predicted: f64 = s.singular_values[r..].iter().map(|x| x * x).sum::<f64>().sqrt();
        worst_trunc = worst_trunc.max((actual - predicted).abs()).max((s.truncation_error(r).unwrap() - predicted).abs());

        // Random rank-r competitors, each with its optimal scalar scale.
        for _ in 0..SVD_RANDOM_COMPETITORS {
            let c = normal_matrix(m, r, &mut rng).matmul_nt(&normal_matrix(n, r, &mut rng)).unwrap();
            let cc: f64 = c.data().iter().map(|v| v * v).sum();
            let wc: f64 = w.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
            let alpha = if cc > 0.0 { wc / cc } else { 0.0 };
            let err = frobenius(&w.sub(&c.scale(alpha)).unwrap());
            smallest_margin = smallest_margin.min(err - actual);
            ensure(err > actual, || format!("matrix {k} ({m}x{n}, r={r}): random factorization error {err} <= svd {actual}"))?;
        }
    }
    ensure(worst_orth < SVD_TOL, || format!("orthogonality residual {worst_orth:e}"))?;
    ensure(worst_recon < SVD_TOL, || format!("reconstruction residual {worst_recon:e}"))?;
    ensure(worst_trunc < SVD_TOL, || format!("truncation error mismatch {worst_trunc:e}"))?;
    let t = within_time(start, Duration::from_secs(30))?;
    Ok(format!(
        "{SVD_MATRICES} matrices: orth {worst_orth:.1e}, recon {worst_recon:.1e}, trunc {worst_trunc:.1e} (tol {SVD_TOL:e}); \
         beat {SVD_RANDOM_COMPETITORS} random factorizations each (min margin {smallest_margin:.3}); {t:.1?}"
    ))
}

// ---------------------------------------------------------------------------
// 2. Ratio algebra

fn criterion_2() -> Outcome {
    let rank = rank_for_ratio(768, 768, 0.5).map_err(|e| e.to_string())?;
    ensure(rank == 192, || format!("rank_for_ratio(768, 768, 0.5) = {rank}, expected 192"))?;
    let factor = format!("{:.4}", factor_ratio(768, 768, rank).map_err(|e| e.to_string())?);
    ensure(factor == "0.5000", || format!("factor_ratio = {factor}, expected 0.5000"))?;
    let hybrid = format!("{:.4}", hybrid_ratio(768, 768, rank, 1.0 / 1.56).map_err(|e| e.to_string())?);
    ensure(hybrid == "0.3205", || format!("hybrid_ratio = {hybrid}, expected 0.3205"))?;
    Ok(format!("rank 192, factor ratio {factor}, hybrid ratio {hybrid}"))
}

// ---------------------------------------------------------------------------
// 3. Compression-ratio table on the BERT-Base layout

/// (overall, embedding, factorization, pruning) compression factors.
const RATIO_TABLE: [(f64, f64, f64, f64); 4] =
    [(2.5, 1.43, 2.0, 1.56), (5.0, 2.05, 2.0, 3.41), (7.5, 5.0, 2.0, 4.33), (10.0, 5.0, 2.5, 5.45)];
const RATIO_TABLE_TOL: f64 = 0.05;

fn criterion_3() -> Outcome {
    let layout = BundleLayout::bert_base();
    let mut parts = Vec::new();
    for (overall, embd, svd_f, prune) in RATIO_TABLE {
        let target = 1.0 / overall;
        let plan = solve_budget(&layout, target, 1.0 / embd, 1.0 / svd_f).map_err(|e| e.to_string())?;
        let report = plan_check(&layout, &plan);
        let achieved = report.achieved();
        let dev = (achieved - target).abs() / target;
        ensure(report.passed(), || format!("x{overall}: plan_check violations {:?}", report.violations))?;
        ensure(dev <= RATIO_TABLE_TOL, || format!("x{overall}: achieved x{:.3} ({:.2}% off)", 1.0 / achieved, 100.0 * dev))?;
        parts.push(format!("x{overall}: achieved x{:.3}, pruning x{:.2} (listed x{prune})", 1.0 / achieved, 1.0 / plan.p_weight));
    }
    Ok(format!("{} (tol {:.0}%)", parts.join("; "), 100.0 * RATIO_TABLE_TOL))
}

// ---------------------------------------------------------------------------
// 4. Gradient fidelity

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_SAMPLES: usize = 20;
/// Denominator floor: gradients below it (e.g. key biases, which softmax
/// cancels exactly) are held to an absolute error of `FD_REL_TOL * FD_FLOOR`,
/// well above the ~1e-10 rounding noise of a central difference at `FD_STEP`.
const FD_FLOOR: f64 = 1e-5;

fn grad_config() -> ModelConfig {
    ModelConfig { vocab_size: 12, embed_dim: 16, num_layers: 2, num_heads: 2, ffn_dim: 24, max_seq_len: 8, num_classes: 3 }
}

fn parameter_class(name: &str) -> &'static str {
    let base = name.split("::").next().unwrap_or(name);
    if base.starts_with("embeddings.token") {
        "token embedding"
    } else if base.starts_with("embeddings.position") {
        "position embedding"
    } else if base.contains(".ln.") {
        "layer norm"
    } else if base.starts_with("classifier") {
        "classifier"
    } else if base.contains(".attn.") {
        if base.ends_with(".bias") { "attention bias" } else { "attention weight" }
    } else if base.ends_with(".bias") {
        "ffn bias"
    } else {
        "ffn weight"
    }
}

/// Checks `FD_SAMPLES` random unmasked entries per parameter class of `model`
/// against `objective`, whose analytic gradient is `grads`.
fn fd_check(
    model: &Model,
    mut grads: Model,
    objective: &dyn Fn(&Model) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, f64), String> {
    let names = model.slot_names();
    let mut pools: IndexMap<&'static str, Vec<(usize, usize)>> = IndexMap::new();
    {
        let mut probe = model.clone();
        for (k, slot) in probe.slots_mut().into_iter().enumerate() {
            for i in 0..slot.values.len() {
                if slot.mask.is_none_or(|m| m.bits()[i]) {
                    pools.entry(parameter_class(&names[k])).or_default().push((k, i));
                }
            }
        }
    }
    let analytic: Vec<Vec<f64>> = grads.slots_mut().into_iter().map(|s| s.values.to_vec()).collect();
    let (mut checked, mut worst) = (0, 0.0f64);
    for (class, entries) in &pools {
        ensure(entries.len() >= FD_SAMPLES, || format!("class {class} has only {} entries", entries.len()))?;
        for pick in sample(rng, entries.len(), FD_SAMPLES) {
            let (k, i) = entries[pick];
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.slots_mut()[k].values[i] += delta;
                objective(&m)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
            ensure(rel < FD_REL_TOL, || {
                format!("{class} ({} entry {i}): analytic {a:e}, numeric {numeric:e}, rel {rel:e}", names[k])
            })?;
            checked += 1;
        }
    }
    Ok((checked, worst))
}

fn random_probe(model: &Model, tokens: &[usize], rng: &mut ChaCha8Rng) -> TraceGrads {
    let t = model.forward(tokens).unwrap();
    let mut like = |m: &DenseMatrix| normal_matrix(m.rows(), m.cols(), rng);
    TraceGrads {
        embedding: Some(like(&t.embedding_out)),
        attention: t.attention.iter().map(|h| h.iter().map(|a| Some(like(a))).collect()).collect(),
        hidden: t.hidden.iter().map(|h| Some(like(h))).collect(),
        logits: Some(t.logits.iter().map(|_| rng.random_range(-1.0..1.0)).collect()),
    }
}

fn probe_value(model: &Model, tokens: &[usize], c: &TraceGrads) -> f64 {
    let t = model.forward(tokens).unwrap();
    let dot = |a: &DenseMatrix, b: &Option<DenseMatrix>| -> f64 {
        a.data().iter().zip(b.as_ref().unwrap().data()).map(|(x, y)| x * y).sum()
    };
    let mut total = dot(&t.embedding_out, &c.embedding);
    for (heads, cs) in t.attention.iter().zip(&c.attention) {
        total += heads.iter().zip(cs).map(|(a, ca)| dot(a, ca)).sum::<f64>();
    }
    total += t.hidden.iter().zip(&c.hidden).map(|(h, ch)| dot(h, ch)).sum::<f64>();
    total + t.logits.iter().zip(c.logits.as_ref().unwrap()).map(|(x, y)| x * y).sum::<f64>()
}

fn hybrid_student(seed: u64) -> Model {
    let mut m = Model::init(grad_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let hybrid = |w: &Weight, p_svd, p_weight| Weight::Factored(compress_layer(&w.effective(), p_svd, p_weight).unwrap());
    m.token_embedding = hybrid(&m.token_embedding, 0.6, 1.0);
    for layer in &mut m.layers {
        for l in [&mut layer.query, &mut layer.key, &mut layer.value, &mut layer.output, &mut layer.ffn_inner, &mut layer.ffn_outer] {
            l.weight = hybrid(&l.weight, 0.6, 0.7);
        }
    }
    m
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tokens = [3, 0, 7, 7, 11, 2];
    let dense = Model::init(grad_config(), &mut ChaCha8Rng::seed_from_u64(40)).unwrap();
    let hybrid = hybrid_student(41);
    let mut summary = Vec::new();

    for (label, model) in [("dense", &dense), ("hybrid", &hybrid)] {
        let c = random_probe(model, &tokens, &mut rng);
        let grads = model.backward(&model.forward(&tokens).unwrap(), &c);
        let (n, worst) = fd_check(model, grads, &|m| probe_value(m, &tokens, &c), &mut rng)?;
        summary.push(format!("{label} outputs {n} entries (max rel {worst:.1e})"));
    }

    let teacher = Model::init(grad_config(), &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let signals = DistillSignals::from(&teacher.forward(&tokens).unwrap());
    let cfg = DistillConfig { attention_weight: 3.0, temperature: 2.0, ..DistillConfig::default() };
    for (label, model) in [("dense", &dense), ("hybrid", &hybrid)] {
        let trace = model.forward(&tokens).unwrap();
        let (_, upstream) = distill_loss_and_grads(&signals, &trace, &cfg, None).map_err(|e| e.to_string())?;
        let grads = model.backward(&trace, &upstream);
        let objective = |m: &Model| total_distill_loss(&signals, &m.forward(&tokens).unwrap(), &cfg).unwrap().total;
        let (n, worst) = fd_check(model, grads, &objective, &mut rng)?;
        summary.push(format!("{label} distill loss {n} entries (max rel {worst:.1e})"));
    }
    let t = within_time(start, Duration::from_secs(60))?;
    Ok(format!("{}; h={FD_STEP:e}, tol {FD_REL_TOL:e}, {FD_SAMPLES} per class; {t:.1?}", summary.join(", ")))
}

// ---------------------------------------------------------------------------
// 5. Distillation loss values

const LN2_TOL: f64 = 1e-9;
const SHIFT_TOL: f64 = 1e-12;

fn criterion_5() -> Outcome {
    let uniform = prediction_loss(&[0.0, 0.0], &[0.0, 0.0], 1.0).map_err(|e| e.to_string())?;
    ensure((uniform - LN_2).abs() <= LN2_TOL, || format!("uniform prediction loss {uniform}"))?;

    let model = Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let trace = model.forward(&[4, 8, 15, 16, 23, 42]).unwrap();
    let own = DistillSignals::from(&trace);
    let loss = total_distill_loss(&own, &trace, &DistillConfig::default()).map_err(|e| e.to_string())?;
    ensure(loss.embedding == 0.0 && loss.attention == 0.0 && loss.hidden == 0.0, || format!("self-distillation {loss:?}"))?;
    let direct = mse_loss(&trace.hidden[0], &trace.hidden[0]).map_err(|e| e.to_string())?;
    ensure(direct == 0.0, || format!("mse of identical matrices {direct}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
        let s: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
        let temperature = rng.random_range(0.5..4.0);
        let base = prediction_loss(&t, &s, temperature).unwrap();
        let (ct, cs) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let t2: Vec<f64> = t.iter().map(|v| v + ct).collect();
        let s2: Vec<f64> = s.iter().map(|v| v + cs).collect();
        worst = worst.max((prediction_loss(&t2, &s2, temperature).unwrap() - base).abs());
    }
    ensure(worst <= SHIFT_TOL, || format!("shift changed the loss by {worst:e}"))?;
    Ok(format!(
        "uniform loss {uniform:.12} (ln 2 ± {LN2_TOL:e}); self-distillation terms exactly 0; \
         max shift deviation {worst:.1e} (tol {SHIFT_TOL:e})"
    ))
}

// ---------------------------------------------------------------------------
// 6. Iterative compression against pure distillation

const PAIRED_SEEDS: u64 = 5;
const REQUIRED_WINS: usize = 4;
const TARGET_RETAIN: f64 = 0.4;
const THRESHOLD_OF_TEACHER: f64 = 0.9;

fn trained_teacher(task_seed: u64, epochs: usize) -> (Model, ladabert::task::SyntheticTask) {
    let task = generate_task(TaskConfig { seed: task_seed, ..TaskConfig::default() }).unwrap();
    let mut teacher = Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(task_seed + 100)).unwrap();
    let cfg = TrainConfig {
        adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
        epochs,
        seed: task_seed,
        ..TrainConfig::default()
    };
    train_supervised(&mut teacher, &task.train, &cfg).unwrap();
    (teacher, task)
}

fn first_reaching(res: &PipelineResult, threshold: f64, from_iteration: usize) -> Option<usize> {
    res.records
        .iter()
        .filter(|r| r.iteration >= from_iteration)
        .find(|r| r.validation_accuracy.is_some_and(|a| a >= threshold))
        .map(|r| r.step)
}

/// Strictly fewer steps; never reaching counts as infinitely many.
fn faster(a: Option<usize>, b: Option<usize>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a < b,
        (Some(_), None) => true,
        _ => false,
    }
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let (mut speed_wins, mut acc_wins, mut any_size_wins) = (0, 0, 0);
    let mut rows = Vec::new();
    for seed in 0..PAIRED_SEEDS {
        let (teacher, task) = trained_teacher(seed, 4);
        let teacher_acc = accuracy(&teacher, &task.validation).unwrap();
        let signals = teacher_signals(&teacher, &task.train).unwrap();
        let plan = solve_budget(&teacher.config.layout(), TARGET_RETAIN, 0.5, 0.6).map_err(|e| e.to_string())?.with_delta(0.8);
        let cfg = PipelineConfig {
            adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
            max_steps_per_iteration: Some(15),
            final_steps: 90,
            eval_every: 5,
            seed,
            ..PipelineConfig::default()
        };
        let lada = run_pipeline_with_signals(&teacher, &plan, &task, &signals, &cfg).map_err(|e| e.to_string())?;
        let kd = pure_kd_baseline(&lada.student, &teacher, &task, &signals, &cfg, lada.steps(), seed + 1000)
            .map_err(|e| e.to_string())?;

        let threshold = THRESHOLD_OF_TEACHER * teacher_acc;
        let last = lada.schedule.len() - 1;
        let (lada_at_p, kd_steps) = (first_reaching(&lada, threshold, last), first_reaching(&kd, threshold, 0));
        let lada_any = first_reaching(&lada, threshold, 0);
        let (lada_final, kd_final) = (lada.final_accuracy().unwrap(), kd.final_accuracy().unwrap());
        speed_wins += usize::from(faster(lada_at_p, kd_steps));
        any_size_wins += usize::from(faster(lada_any, kd_steps));
        acc_wins += usize::from(lada_final >= kd_final);
        rows.push(format!(
            "seed {seed}: steps {} vs {}, acc {lada_final:.3} vs {kd_final:.3}",
            lada_at_p.map_or("never".into(), |s| s.to_string()),
            kd_steps.map_or("never".into(), |s| s.to_string()),
        ));
    }
    let detail = format!(
        "faster at target size {speed_wins}/{PAIRED_SEEDS} (any size {any_size_wins}/{PAIRED_SEEDS}), \
         final accuracy >= {acc_wins}/{PAIRED_SEEDS} [{}]",
        rows.join("; ")
    );
    ensure(speed_wins >= REQUIRED_WINS && acc_wins >= REQUIRED_WINS, || detail.clone())?;
    let t = within_time(start, Duration::from_secs(600))?;
    Ok(format!("{detail}; {t:.1?}"))
}

// ---------------------------------------------------------------------------
// 7. Pruning-bias spread

const BIAS_TRIALS: usize = 20;
const BIAS_MIN_WIN_RATE: f64 = 0.9;

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let summary = bias_trials(BIAS_TRIALS, (64, 64), 0.2, (0.4, 0.5), 7).map_err(|e| e.to_string())?;
    let rate = summary.win_rate();
    ensure(rate >= BIAS_MIN_WIN_RATE, || format!("hybrid narrower in {}/{BIAS_TRIALS}", summary.hybrid_wins))?;
    let t = within_time(start, Duration::from_secs(60))?;
    Ok(format!(
        "hybrid bias std below pure SVD in {}/{BIAS_TRIALS} trials (need {:.0}%); {t:.1?}",
        summary.hybrid_wins,
        100.0 * BIAS_MIN_WIN_RATE
    ))
}

// ---------------------------------------------------------------------------
// 8. Pipeline accounting and determinism

const ACCOUNTING_TOL: f64 = 0.01;

fn criterion_8() -> Outcome {
    let (teacher, task) = trained_teacher(8, 1);
    let untouched = teacher.clone();
    let plan = solve_budget(&teacher.config.layout(), TARGET_RETAIN, 0.5, 0.6).map_err(|e| e.to_string())?.with_delta(0.8);
    let cfg = PipelineConfig {
        adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
        max_steps_per_iteration: Some(5),
        seed: 8,
        ..PipelineConfig::default()
    };
    let first = run_pipeline(&teacher, &plan, &task, &cfg).map_err(|e| e.to_string())?;
    let achieved = first.schedule.last().unwrap().retained_fraction;
    ensure((achieved - TARGET_RETAIN).abs() <= ACCOUNTING_TOL * TARGET_RETAIN, || format!("achieved {achieved}"))?;
    let fractions: Vec<f64> = first.schedule.iter().map(|s| s.retained_fraction).collect();
    ensure(fractions.windows(2).all(|w| w[1] <= w[0]), || format!("retained fractions {fractions:?}"))?;
    ensure(first.student.classifier == teacher.classifier, || "classifier changed".into())?;
    ensure(teacher == untouched, || "teacher was modified".into())?;
    let second = run_pipeline(&teacher, &plan, &task, &cfg).map_err(|e| e.to_string())?;
    ensure(second.student == first.student && second.records == first.records, || "rerun differs".into())?;
    let trail: Vec<String> = fractions.iter().map(|f| format!("{f:.4}")).collect();
    Ok(format!(
        "{} iterations, retained {} -> {achieved:.4} (tol {:.0}%); classifier bit-identical; rerun bit-identical",
        fractions.len(),
        trail.join(" "),
        100.0 * ACCOUNTING_TOL
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("svd correctness", criterion_1),
        ("ratio algebra", criterion_2),
        ("bert-base ratio table", criterion_3),
        ("gradient fidelity", criterion_4),
        ("distillation loss values", criterion_5),
        ("iterative compression vs pure distillation", criterion_6),
        ("pruning-bias spread", criterion_7),
        ("pipeline accounting", criterion_8),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.ends_with(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        match std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into())) {
            Ok(detail) => println!("{id} PASS [{name}]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL [{name}]: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! The iterative loop: shrink the student's budget by Δ through hybrid
//! compression, fine-tune it against the teacher by distillation, repeat until
//! the target fraction is reached.

use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::budget::{plan_check, BudgetError, CompressionPlan, StageFractions};
use crate::bundle_io::save_bundle;
use crate::compress::{compress_model, masks_to_bundle, retained_fraction, CompressError};
use crate::distill::{distill_step, teacher_signals, DistillConfig, DistillError, DistillSignals, LossBreakdown};
use crate::factorize::factorize_with_rank;
use crate::hybrid::FactoredLayer;
use crate::model::{Model, ModelError, Weight};
use crate::prune::apply_mask;
use crate::task::{Example, SyntheticTask};
use crate::train::{accuracy, epoch_batches, Adam, AdamConfig, DEFAULT_BATCH_SIZE};
use crate::tensor::Group;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("infeasible plan: {0}")]
    InfeasiblePlan(String),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss diverged at step {step} (iteration {iteration}): {loss} against iteration minimum {minimum}{}",
        dump.as_ref().map_or(String::new(), |p| format!("; state written to {}", p.display())))]
    Diverged {
        step: usize,
        iteration: usize,
        loss: f64,
        minimum: f64,
        dump: Option<PathBuf>,
    },
    #[error("writing curve: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub distill: DistillConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Fine-tuning epochs after each compression event.
    pub epochs_per_iteration: usize,
    /// Optional cap on fine-tuning steps per iteration.
    pub max_steps_per_iteration: Option<usize>,
    /// Extra fine-tuning steps at the target size after the last compression event.
    pub final_steps: usize,
    /// Validation accuracy is measured every this many steps and at the end of
    /// every iteration.
    pub eval_every: usize,
    pub seed: u64,
    /// Keep the classifier group bit-identical to the teacher.
    pub freeze_classifier: bool,
    /// Abort when the loss exceeds this multiple of its iteration minimum ...
    pub divergence_factor: f64,
    /// ... and this absolute level.
    pub divergence_floor: f64,
    /// Where to write the student when the divergence guard fires.
    pub dump_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            distill: DistillConfig::default(),
            adam: AdamConfig::default(),
            batch_size: DEFAULT_BATCH_SIZE,
            epochs_per_iteration: 2,
            max_steps_per_iteration: None,
            final_steps: 0,
            eval_every: 10,
            seed: 0,
            freeze_classifier: true,
            divergence_factor: 10.0,
            divergence_floor: 1e-2,
            dump_dir: None,
        }
    }
}

impl PipelineConfig {
    fn steps_per_iteration(&self, train_len: usize) -> usize {
        let per_epoch = train_len.div_ceil(self.batch_size.max(1));
        let steps = per_epoch * self.epochs_per_iteration;
        self.max_steps_per_iteration.map_or(steps, |cap| steps.min(cap))
    }
}

/// One fine-tuning step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingRecord {
    pub step: usize,
    pub iteration: usize,
    pub retained_fraction: f64,
    pub loss: LossBreakdown,
    pub validation_accuracy: Option<f64>,
}

/// State after one compression event.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    pub iteration: usize,
    pub budget: f64,
    pub fractions: StageFractions,
    pub retained_fraction: f64,
    /// Global step count when the event happened.
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub student: Model,
    pub schedule: Vec<ScheduleState>,
    pub records: Vec<TrainingRecord>,
    pub teacher_accuracy: f64,
}

impl PipelineResult {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.validation_accuracy)
    }

    pub fn steps(&self) -> usize {
        self.records.last().map_or(0, |r| r.step)
    }
}

/// Single hybrid compression to the plan's full target fractions.
pub fn one_shot_compress(teacher: &Model, plan: &CompressionPlan) -> Result<Model, PipelineError> {
    plan.validate()?;
    Ok(compress_model(teacher, plan.fractions())?)
}

struct FineTuner<'a> {
    config: &'a PipelineConfig,
    train: &'a [Example],
    validation: &'a [Example],
    signals: &'a [DistillSignals],
    optimizer: Adam,
    rng: ChaCha8Rng,
    step: usize,
    records: Vec<TrainingRecord>,
}

impl<'a> FineTuner<'a> {
    fn new(config: &'a PipelineConfig, task: &'a SyntheticTask, signals: &'a [DistillSignals], freeze: bool) -> Self {
        let mut optimizer = Adam::new(config.adam);
        if freeze {
            optimizer = optimizer.freeze(Group::Classifier);
        }
        Self {
            config,
            train: &task.train,
            validation: &task.validation,
            signals,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
            records: Vec::new(),
        }
    }

    fn run(&mut self, student: &mut Model, steps: usize, iteration: usize) -> Result<(), PipelineError> {
        let retained = retained_fraction(student);
        let mut minimum = f64::INFINITY;
        let mut batches = Vec::new().into_iter();
        for done in 1..=steps {
            let idx = match batches.next() {
                Some(b) => b,
                None => {
                    batches = epoch_batches(self.train.len(), self.config.batch_size, &mut self.rng).into_iter();
                    batches.next().expect("non-empty training set")
                }
            };
            let batch: Vec<(&Example, &DistillSignals)> =
                idx.iter().map(|&i| (&self.train[i], &self.signals[i])).collect();
            let loss = distill_step(student, &mut self.optimizer, &batch, &self.config.distill)?;
            self.step += 1;
            let diverged = !loss.is_finite()
                || (loss.total > self.config.divergence_factor * minimum && loss.total > self.config.divergence_floor);
            if diverged {
                return Err(self.abort(student, iteration, loss.total, minimum));
            }
            minimum = minimum.min(loss.total);
            let evaluate = done == steps || self.step.is_multiple_of(self.config.eval_every.max(1));
            let validation_accuracy = if evaluate { Some(accuracy(student, self.validation)?) } else { None };
            self.records.push(TrainingRecord {
                step: self.step,
                iteration,
                retained_fraction: retained,
                loss,
                validation_accuracy,
            });
        }
        Ok(())
    }

    fn abort(&self, student: &Model, iteration: usize, loss: f64, minimum: f64) -> PipelineError {
        let mut dump = None;
        if let Some(dir) = &self.config.dump_dir {
            let path = dir.join(format!("diverged-step{}.bundle", self.step));
            let (bundle, masks) = student.to_bundle_with_masks();
            let written = save_bundle(&bundle, &path).and_then(|_| {
                let masks = masks_to_bundle(&masks, &bundle).expect("masks match bundle");
                save_bundle(&masks, path.with_extension("masks"))
            });
            match written {
                Ok(()) => dump = Some(path),
                Err(e) => log::error!("could not write state dump: {e}"),
            }
        }
        log::error!("divergence guard fired at step {} with loss {loss}", self.step);
        PipelineError::Diverged { step: self.step, iteration, loss, minimum, dump }
    }
}

/// Runs the full schedule. The student starts as a copy of the teacher; the
/// teacher is only read.
pub fn run_pipeline(
    teacher: &Model,
    plan: &CompressionPlan,
    task: &SyntheticTask,
    config: &PipelineConfig,
) -> Result<PipelineResult, PipelineError> {
    let signals = teacher_signals(teacher, &task.train)?;
    run_pipeline_with_signals(teacher, plan, task, &signals, config)
}

/// [`run_pipeline`] with precomputed teacher signals for `task.train`.
pub fn run_pipeline_with_signals(
    teacher: &Model,
    plan: &CompressionPlan,
    task: &SyntheticTask,
    signals: &[DistillSignals],
    config: &PipelineConfig,
) -> Result<PipelineResult, PipelineError> {
    config.distill.validate()?;
    let layout = teacher.config.layout();
    let report = plan_check(&layout, plan);
    if !report.passed() {
        return Err(PipelineError::InfeasiblePlan(report.violations.join("; ")));
    }
    let teacher_accuracy = accuracy(teacher, &task.validation)?;
    let mut student = teacher.clone();
    let mut tuner = FineTuner::new(config, task, signals, config.freeze_classifier);
    let mut schedule = Vec::new();
    let steps = config.steps_per_iteration(task.train.len());

    let budgets = plan.budget_schedule();
    let last = budgets.len().saturating_sub(1);
    for (iteration, budget) in budgets.into_iter().enumerate() {
        let fractions = plan.stage_fractions(&layout, budget)?;
        student = compress_model(&student, fractions)?;
        tuner.optimizer.reset();
        let retained = retained_fraction(&student);
        log::info!("iteration {iteration}: budget {budget:.4}, retained {retained:.4}, {fractions:?}");
        if let Some(prev) = schedule.last().map(|s: &ScheduleState| s.retained_fraction) {
            if retained > prev {
                log::warn!("retained fraction rose from {prev} to {retained}");
            }
        }
        schedule.push(ScheduleState { iteration, budget, fractions, retained_fraction: retained, step: tuner.step });
        let extra = if iteration == last { config.final_steps } else { 0 };
        tuner.run(&mut student, steps + extra, iteration)?;
    }
    Ok(PipelineResult { student, schedule, records: tuner.records, teacher_accuracy })
}

/// A randomly initialised model with exactly the storage structure of `like`:
/// same factor ranks and the same masks.
pub fn reinit_like(like: &Model, seed: u64) -> Result<Model, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fresh = Model::init(like.config, &mut rng)?;
    let shape_like = |w: &Weight, template: &Weight| -> Result<Weight, PipelineError> {
        Ok(match template {
            Weight::Dense { mask: None, .. } => w.clone(),
            Weight::Dense { mask: Some(mask), .. } => Weight::Dense {
                matrix: apply_mask(&w.effective(), mask).expect("same shape"),
                mask: Some(mask.clone()),
            },
            Weight::Factored(f) => {
                let pair = factorize_with_rank(&w.effective(), f.rank())
                    .map_err(|source| CompressError::Factorize { name: "reinit".into(), source })?;
                Weight::Factored(FactoredLayer::new(pair, f.mask_a.clone(), f.mask_b.clone()))
            }
        })
    };
    fresh.token_embedding = shape_like(&fresh.token_embedding, &like.token_embedding)?;
    fresh.position_embedding = shape_like(&fresh.position_embedding, &like.position_embedding)?;
    for (dst, src) in fresh.layers.iter_mut().zip(&like.layers) {
        for (d, s) in [
            (&mut dst.query, &src.query),
            (&mut dst.key, &src.key),
            (&mut dst.value, &src.value),
            (&mut dst.output, &src.output),
            (&mut dst.ffn_inner, &src.ffn_inner),
            (&mut dst.ffn_outer, &src.ffn_outer),
        ] {
            d.weight = shape_like(&d.weight, &s.weight)?;
        }
    }
    fresh.classifier.weight = shape_like(&fresh.classifier.weight, &like.classifier.weight)?;
    Ok(fresh)
}

/// Distils a fixed-size student for `steps` steps with no compression events,
/// training every group.
pub fn distill_fixed(
    student: Model,
    teacher: &Model,
    task: &SyntheticTask,
    signals: &[DistillSignals],
    config: &PipelineConfig,
    steps: usize,
) -> Result<PipelineResult, PipelineError> {
    config.distill.validate()?;
    let teacher_accuracy = accuracy(teacher, &task.validation)?;
    let mut student = student;
    let mut tuner = FineTuner::new(config, task, signals, false);
    let schedule = vec![ScheduleState {
        iteration: 0,
        budget: retained_fraction(&student),
        fractions: StageFractions::IDENTITY,
        retained_fraction: retained_fraction(&student),
        step: 0,
    }];
    tuner.run(&mut student, steps, 0)?;
    Ok(PipelineResult { student, schedule, records: tuner.records, teacher_accuracy })
}

/// Pure knowledge distillation into a random re-initialisation of `like`.
pub fn pure_kd_baseline(
    like: &Model,
    teacher: &Model,
    task: &SyntheticTask,
    signals: &[DistillSignals],
    config: &PipelineConfig,
    steps: usize,
    init_seed: u64,
) -> Result<PipelineResult, PipelineError> {
    distill_fixed(reinit_like(like, init_seed)?, teacher, task, signals, config, steps)
}

pub const CURVE_COLUMNS: [&str; 9] = [
    "step",
    "iteration",
    "retained_fraction",
    "total",
    "embedding",
    "attention",
    "hidden",
    "prediction",
    "validation_accuracy",
];

/// Writes one CSV row per record, columns as in [`CURVE_COLUMNS`].
pub fn write_curve<W: Write>(out: W, records: &[TrainingRecord]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_COLUMNS)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.iteration.to_string(),
            r.retained_fraction.to_string(),
            r.loss.total.to_string(),
            r.loss.embedding.to_string(),
            r.loss.attention.to_string(),
            r.loss.hidden.to_string(),
            r.loss.prediction.to_string(),
            r.validation_accuracy.map_or(String::new(), |a| a.to_string()),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn record_curve(records: &[TrainingRecord]) -> String {
    let mut out = Vec::new();
    write_curve(&mut out, records).expect("writing to memory");
    String::from_utf8(out).expect("CSV is UTF-8")
}

//! Knowledge-distillation losses at the embedding, attention, hidden and
//! prediction levels, and one fine-tuning step on their weighted sum.

use std::io::Write;
use std::ops::AddAssign;

use thiserror::Error;

use crate::model::{ForwardTrace, Model, ModelError, TraceGrads};
use crate::task::Example;
use crate::tensor::DenseMatrix;
use crate::train::{cross_entropy, log_softmax, softmax, Adam};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("{what}: teacher shape {teacher:?} differs from student shape {student:?}")]
    Shape {
        what: String,
        teacher: (usize, usize),
        student: (usize, usize),
    },
    #[error("logit lengths differ: teacher {teacher}, student {student}")]
    LengthMismatch { teacher: usize, student: usize },
    #[error("cannot map {level}: teacher has {teacher}, student has {student}")]
    LayerMismatch {
        level: &'static str,
        teacher: usize,
        student: usize,
    },
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing loss records: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub embedding_weight: f64,
    pub attention_weight: f64,
    pub hidden_weight: f64,
    pub prediction_weight: f64,
    pub temperature: f64,
    /// Also divide the teacher logits by the temperature.
    pub symmetric_temperature: bool,
    /// Weight of an extra hard-label cross-entropy term.
    pub hard_label_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            embedding_weight: 1.0,
            attention_weight: 1.0,
            hidden_weight: 1.0,
            prediction_weight: 1.0,
            temperature: 1.0,
            symmetric_temperature: false,
            hard_label_weight: 0.0,
        }
    }
}

impl DistillConfig {
    pub fn prediction_only() -> Self {
        Self { embedding_weight: 0.0, attention_weight: 0.0, hidden_weight: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        let weights = [
            ("embedding_weight", self.embedding_weight),
            ("attention_weight", self.attention_weight),
            ("hidden_weight", self.hidden_weight),
            ("prediction_weight", self.prediction_weight),
            ("hard_label_weight", self.hard_label_weight),
        ];
        if let Some((name, w)) = weights.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(DistillError::Config(format!("{name} = {w} must be a non-negative number")));
        }
        if weights.iter().all(|(_, w)| *w == 0.0) {
            return Err(DistillError::Config("every loss weight is zero".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(DistillError::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Mean of squared elementwise differences.
pub fn mse_loss(student: &DenseMatrix, teacher: &DenseMatrix) -> Result<f64, DistillError> {
    check_shape("mse operands", teacher, student)?;
    if student.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = student.data().iter().zip(teacher.data()).map(|(s, t)| (s - t) * (s - t)).sum();
    Ok(sum / student.len() as f64)
}

fn check_shape(what: &str, teacher: &DenseMatrix, student: &DenseMatrix) -> Result<(), DistillError> {
    if teacher.shape() != student.shape() {
        return Err(DistillError::Shape {
            what: what.to_string(),
            teacher: teacher.shape(),
            student: student.shape(),
        });
    }
    Ok(())
}

fn mse_grad(student: &DenseMatrix, teacher: &DenseMatrix, weight: f64) -> DenseMatrix {
    let scale = 2.0 * weight / student.len().max(1) as f64;
    let data = student.data().iter().zip(teacher.data()).map(|(s, t)| scale * (s - t)).collect();
    DenseMatrix::new(student.rows(), student.cols(), data).expect("shape checked")
}

/// Soft cross-entropy `−softmax(teacher)·log softmax(student / t)`.
pub fn prediction_loss(teacher_logits: &[f64], student_logits: &[f64], temperature: f64) -> Result<f64, DistillError> {
    Ok(prediction_terms(teacher_logits, student_logits, temperature, false)?.0)
}

/// Like [`prediction_loss`] with the teacher logits also divided by `t`.
pub fn symmetric_prediction_loss(
    teacher_logits: &[f64],
    student_logits: &[f64],
    temperature: f64,
) -> Result<f64, DistillError> {
    Ok(prediction_terms(teacher_logits, student_logits, temperature, true)?.0)
}

/// Loss and gradient with respect to the student logits.
fn prediction_terms(
    teacher: &[f64],
    student: &[f64],
    t: f64,
    symmetric: bool,
) -> Result<(f64, Vec<f64>), DistillError> {
    if teacher.len() != student.len() {
        return Err(DistillError::LengthMismatch { teacher: teacher.len(), student: student.len() });
    }
    if !(t.is_finite() && t > 0.0) {
        return Err(DistillError::Config(format!("temperature {t} must be positive")));
    }
    let target = if symmetric {
        softmax(&teacher.iter().map(|v| v / t).collect::<Vec<_>>())
    } else {
        softmax(teacher)
    };
    let scaled: Vec<f64> = student.iter().map(|v| v / t).collect();
    let log_q = log_softmax(&scaled);
    let loss = -target.iter().zip(&log_q).map(|(p, lq)| p * lq).sum::<f64>();
    let q = softmax(&scaled);
    let grad = q.iter().zip(&target).map(|(q, p)| (q - p) / t).collect();
    Ok((loss, grad))
}

/// Teacher outputs needed as distillation targets, without backward caches.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSignals {
    pub embedding: DenseMatrix,
    pub attention: Vec<Vec<DenseMatrix>>,
    pub hidden: Vec<DenseMatrix>,
    pub logits: Vec<f64>,
}

impl From<&ForwardTrace> for DistillSignals {
    fn from(t: &ForwardTrace) -> Self {
        Self {
            embedding: t.embedding_out.clone(),
            attention: t.attention.clone(),
            hidden: t.hidden.clone(),
            logits: t.logits.clone(),
        }
    }
}

/// Runs the teacher once over `examples`.
pub fn teacher_signals(teacher: &Model, examples: &[Example]) -> Result<Vec<DistillSignals>, ModelError> {
    examples.iter().map(|e| Ok(DistillSignals::from(&teacher.forward(&e.tokens)?))).collect()
}

/// Unweighted loss terms plus their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub embedding: f64,
    pub attention: f64,
    pub hidden: f64,
    pub prediction: f64,
    pub hard_label: f64,
}

impl LossBreakdown {
    pub fn scaled(self, s: f64) -> Self {
        Self {
            total: self.total * s,
            embedding: self.embedding * s,
            attention: self.attention * s,
            hidden: self.hidden * s,
            prediction: self.prediction * s,
            hard_label: self.hard_label * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.embedding, self.attention, self.hidden, self.prediction, self.hard_label]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.embedding += o.embedding;
        self.attention += o.attention;
        self.hidden += o.hidden;
        self.prediction += o.prediction;
        self.hard_label += o.hard_label;
    }
}

fn check_layers(teacher: &DistillSignals, student: &ForwardTrace) -> Result<(), DistillError> {
    if teacher.hidden.len() != student.hidden.len() {
        return Err(DistillError::LayerMismatch {
            level: "hidden layers",
            teacher: teacher.hidden.len(),
            student: student.hidden.len(),
        });
    }
    for (t, s) in teacher.attention.iter().zip(&student.attention) {
        if t.len() != s.len() {
            return Err(DistillError::LayerMismatch { level: "attention heads", teacher: t.len(), student: s.len() });
        }
    }
    Ok(())
}

/// Weighted sum of the four distillation terms for one input. Attention and
/// hidden terms sum the per-layer MSEs (each averaged over heads and entries).
pub fn total_distill_loss(
    teacher: &DistillSignals,
    student: &ForwardTrace,
    config: &DistillConfig,
) -> Result<LossBreakdown, DistillError> {
    Ok(distill_loss_and_grads(teacher, student, config, None)?.0)
}

/// Loss breakdown and the upstream gradients it induces on the student trace.
/// `label` feeds the optional hard-label term.
pub fn distill_loss_and_grads(
    teacher: &DistillSignals,
    student: &ForwardTrace,
    config: &DistillConfig,
    label: Option<usize>,
) -> Result<(LossBreakdown, TraceGrads), DistillError> {
    config.validate()?;
    check_layers(teacher, student)?;
    let mut loss = LossBreakdown::default();
    let mut grads = TraceGrads::default();

    check_shape("embedding output", &teacher.embedding, &student.embedding_out)?;
    loss.embedding = mse_loss(&student.embedding_out, &teacher.embedding)?;
    if config.embedding_weight > 0.0 {
        grads.embedding = Some(mse_grad(&student.embedding_out, &teacher.embedding, config.embedding_weight));
    }

    for (l, (t_heads, s_heads)) in teacher.attention.iter().zip(&student.attention).enumerate() {
        let mut layer_loss = 0.0;
        let mut layer_grads = Vec::with_capacity(s_heads.len());
        let entries: usize = s_heads.iter().map(DenseMatrix::len).sum();
        for (t, s) in t_heads.iter().zip(s_heads) {
            check_shape(&format!("attention layer {l}"), t, s)?;
            layer_loss += mse_loss(s, t)? * s.len() as f64 / entries as f64;
            layer_grads.push((config.attention_weight > 0.0).then(|| {
                // per-head gradient of the layer mean over all heads
                mse_grad(s, t, config.attention_weight * s.len() as f64 / entries as f64)
            }));
        }
        loss.attention += layer_loss;
        grads.attention.push(layer_grads);
    }

    for (l, (t, s)) in teacher.hidden.iter().zip(&student.hidden).enumerate() {
        check_shape(&format!("hidden layer {l}"), t, s)?;
        loss.hidden += mse_loss(s, t)?;
        grads.hidden.push((config.hidden_weight > 0.0).then(|| mse_grad(s, t, config.hidden_weight)));
    }

    let (prediction, mut d_logits) = prediction_terms(
        &teacher.logits,
        &student.logits,
        config.temperature,
        config.symmetric_temperature,
    )?;
    loss.prediction = prediction;
    d_logits.iter_mut().for_each(|g| *g *= config.prediction_weight);
    if let (Some(label), true) = (label, config.hard_label_weight > 0.0) {
        let (ce, g) = cross_entropy(&student.logits, label);
        loss.hard_label = ce;
        d_logits.iter_mut().zip(&g).for_each(|(a, b)| *a += config.hard_label_weight * b);
    }
    grads.logits = Some(d_logits);

    loss.total = config.embedding_weight * loss.embedding
        + config.attention_weight * loss.attention
        + config.hidden_weight * loss.hidden
        + config.prediction_weight * loss.prediction
        + config.hard_label_weight * loss.hard_label;
    Ok((loss, grads))
}

/// One optimiser step on the batch-mean distillation loss. Masked entries stay
/// zero and frozen groups are left untouched by the optimiser.
pub fn distill_step(
    student: &mut Model,
    optimizer: &mut Adam,
    batch: &[(&Example, &DistillSignals)],
    config: &DistillConfig,
) -> Result<LossBreakdown, DistillError> {
    let mut grads = student.zeros_like();
    let mut mean = LossBreakdown::default();
    let scale = 1.0 / batch.len().max(1) as f64;
    for (example, signals) in batch {
        let trace = student.forward(&example.tokens)?;
        let (loss, mut upstream) = distill_loss_and_grads(signals, &trace, config, Some(example.label))?;
        scale_trace_grads(&mut upstream, scale);
        student.backward_into(&trace, &upstream, &mut grads);
        mean += loss.scaled(scale);
    }
    optimizer.step(student, &mut grads);
    Ok(mean)
}

fn scale_trace_grads(g: &mut TraceGrads, s: f64) {
    let scale = |m: &mut DenseMatrix| *m = m.scale(s);
    if let Some(m) = g.embedding.as_mut() {
        scale(m);
    }
    g.attention.iter_mut().flatten().flatten().for_each(scale);
    g.hidden.iter_mut().flatten().for_each(scale);
    if let Some(l) = g.logits.as_mut() {
        l.iter_mut().for_each(|v| *v *= s);
    }
}

/// One row of a fine-tuning log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub validation_accuracy: Option<f64>,
}

pub const LOSS_COLUMNS: [&str; 7] =
    ["step", "total", "embedding", "attention", "hidden", "prediction", "validation_accuracy"];

/// Streams records as CSV; unevaluated accuracies are left empty.
pub fn write_loss_records<W: Write>(out: W, records: &[LossRecord]) -> Result<(), DistillError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOSS_COLUMNS)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
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

//! Compression-error histograms and learning-curve summaries.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::budget::StageFractions;
use crate::compress::{compress_weight, CompressError};
use crate::model::Weight;
use crate::tensor::{DenseMatrix, Group, TensorError};

pub const DEFAULT_BINS: usize = 101;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error("split {svd} × {prune} = {product} does not equal retain {retain}")]
    InfeasibleSplit {
        svd: f64,
        prune: f64,
        product: f64,
        retain: f64,
    },
    #[error("fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("bin count must be positive")]
    NoBins,
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error("curve has no column {0:?}")]
    MissingColumn(String),
    #[error("curve row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// `compressed − original`, elementwise.
pub fn bias_matrix(original: &DenseMatrix, compressed: &DenseMatrix) -> Result<DenseMatrix, AnalysisError> {
    Ok(compressed.sub(original)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasMode {
    Prune,
    Svd,
    Hybrid,
}

impl BiasMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BiasMode::Prune => "prune",
            BiasMode::Svd => "svd",
            BiasMode::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for BiasMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prune" => Ok(BiasMode::Prune),
            "svd" => Ok(BiasMode::Svd),
            "hybrid" => Ok(BiasMode::Hybrid),
            other => Err(format!("unknown mode {other:?}; expected prune, svd or hybrid")),
        }
    }
}

/// Uniform histogram over `[-R, R]`, `R = max |bias|`, with summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasHistogram {
    pub mode: BiasMode,
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    /// Entries whose bias is exactly zero.
    pub exact_zeros: usize,
}

impl BiasHistogram {
    pub fn new(mode: BiasMode, bias: &DenseMatrix, bins: usize) -> Result<Self, AnalysisError> {
        if bins == 0 {
            return Err(AnalysisError::NoBins);
        }
        let values = bias.data();
        let n = values.len() as f64;
        let reach = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let reach = if reach > 0.0 { reach } else { 1.0 };
        let width = 2.0 * reach / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| -reach + i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let idx = (((v + reach) / width).floor() as usize).min(bins - 1);
            counts[idx] += 1;
        }
        let mean = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / n };
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Self {
            mode,
            edges,
            counts,
            mean,
            std,
            exact_zeros: values.iter().filter(|v| **v == 0.0).count(),
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Index of the bin containing 0.
    pub fn zero_bin(&self) -> usize {
        self.edges.windows(2).position(|e| e[0] <= 0.0 && 0.0 < e[1]).unwrap_or(self.counts.len() / 2)
    }

    /// Rows `bin_left,bin_right,count`, then `stats,<mean>,<std>`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_left", "bin_right", "count"])?;
        for (e, c) in self.edges.windows(2).zip(&self.counts) {
            w.write_record([e[0].to_string(), e[1].to_string(), c.to_string()])?;
        }
        w.write_record(["stats".to_string(), self.mean.to_string(), self.std.to_string()])?;
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("CSV is UTF-8")
    }
}

fn check_fraction(p: f64) -> Result<(), AnalysisError> {
    if p.is_finite() && p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(AnalysisError::Fraction(p))
    }
}

/// The split used when only a retain fraction is given: factorization keeps
/// `min(1, 2·retain)` and pruning supplies the rest.
pub fn default_split(retain: f64) -> (f64, f64) {
    let svd = (2.0 * retain).min(1.0);
    (svd, retain / svd)
}

/// One-shot compression of a single matrix under `mode`; fractions of exactly 1
/// disable the corresponding mechanism.
pub fn compress_matrix(
    w: &DenseMatrix,
    mode: BiasMode,
    retain: f64,
    split: (f64, f64),
) -> Result<DenseMatrix, AnalysisError> {
    check_fraction(retain)?;
    let (group, fractions) = match mode {
        BiasMode::Prune => (Group::Encoder, StageFractions { p_embd: 1.0, p_svd: 1.0, p_weight: retain }),
        BiasMode::Svd => (Group::Embedding, StageFractions { p_embd: retain, p_svd: 1.0, p_weight: 1.0 }),
        BiasMode::Hybrid => {
            let (svd, prune) = split;
            check_fraction(svd)?;
            check_fraction(prune)?;
            if (svd * prune - retain).abs() > 1e-9 {
                return Err(AnalysisError::InfeasibleSplit { svd, prune, product: svd * prune, retain });
            }
            (Group::Encoder, StageFractions { p_embd: 1.0, p_svd: svd, p_weight: prune })
        }
    };
    Ok(compress_weight("matrix", group, &Weight::dense(w.clone()), fractions)?.effective())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasStudy {
    pub prune: BiasHistogram,
    pub svd: BiasHistogram,
    pub hybrid: BiasHistogram,
}

/// Bias histograms of pure pruning and pure SVD at `retain`, and of hybrid
/// compression at `split = (svd fraction, prune fraction)`.
pub fn bias_study(w: &DenseMatrix, retain: f64, split: (f64, f64), bins: usize) -> Result<BiasStudy, AnalysisError> {
    let hist = |mode| -> Result<BiasHistogram, AnalysisError> {
        let compressed = compress_matrix(w, mode, retain, split)?;
        BiasHistogram::new(mode, &bias_matrix(w, &compressed)?, bins)
    };
    let hybrid = hist(BiasMode::Hybrid)?;
    Ok(BiasStudy { prune: hist(BiasMode::Prune)?, svd: hist(BiasMode::Svd)?, hybrid })
}

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    DenseMatrix::new(rows, cols, data).expect("length matches")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialSummary {
    pub trials: usize,
    /// Trials where the hybrid bias deviation was below the pure-SVD one.
    pub hybrid_wins: usize,
}

impl TrialSummary {
    pub fn win_rate(&self) -> f64 {
        self.hybrid_wins as f64 / self.trials.max(1) as f64
    }
}

/// Repeats [`bias_study`] on seeded standard-normal matrices.
pub fn bias_trials(
    trials: usize,
    shape: (usize, usize),
    retain: f64,
    split: (f64, f64),
    seed: u64,
) -> Result<TrialSummary, AnalysisError> {
    let mut hybrid_wins = 0;
    for t in 0..trials {
        let w = gaussian_matrix(shape.0, shape.1, seed.wrapping_add(t as u64));
        let study = bias_study(&w, retain, split, DEFAULT_BINS)?;
        if study.hybrid.std < study.svd.std {
            hybrid_wins += 1;
        }
    }
    Ok(TrialSummary { trials, hybrid_wins })
}

/// One metric column of a learning curve, rows without a value skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub steps: Vec<usize>,
    pub values: Vec<f64>,
}

/// Reads `metric` against the `step` column of a curve CSV.
pub fn read_curve<R: Read>(input: R, metric: &str) -> Result<Curve, AnalysisError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| AnalysisError::MissingColumn(name.to_string()))
    };
    let (step_col, metric_col) = (column("step")?, column(metric)?);
    let mut curve = Curve { steps: Vec::new(), values: Vec::new() };
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let bad = |reason: String| AnalysisError::BadRow { row: i + 1, reason };
        let value = row.get(metric_col).unwrap_or("").trim();
        if value.is_empty() {
            continue;
        }
        let step = row.get(step_col).unwrap_or("").trim();
        curve.steps.push(step.parse().map_err(|_| bad(format!("invalid step {step:?}")))?);
        curve.values.push(value.parse().map_err(|_| bad(format!("invalid {metric} {value:?}")))?);
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSummary {
    /// `(threshold, first step whose value reaches it)`.
    pub first_reaching: Vec<(f64, Option<usize>)>,
    pub final_value: Option<f64>,
}

pub fn summarize_curve(curve: &Curve, thresholds: &[f64]) -> CurveSummary {
    let first_reaching = thresholds
        .iter()
        .map(|&t| {
            let step = curve.steps.iter().zip(&curve.values).find(|(_, v)| **v >= t).map(|(s, _)| *s);
            (t, step)
        })
        .collect();
    CurveSummary { first_reaching, final_value: curve.values.last().copied() }
}

pub fn compare_curves(a: &Curve, b: &Curve, thresholds: &[f64]) -> (CurveSummary, CurveSummary) {
    (summarize_curve(a, thresholds), summarize_curve(b, thresholds))
}

/// Rows `curve,threshold,first_step,final_value`; an empty `first_step` means never reached.
pub fn write_comparison<W: Write>(out: W, summaries: &[(&str, &CurveSummary)]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["curve", "threshold", "first_step", "final_value"])?;
    for (name, s) in summaries {
        let last = s.final_value.map_or(String::new(), |v| v.to_string());
        for (t, step) in &s.first_reaching {
            w.write_record([name.to_string(), t.to_string(), step.map_or(String::new(), |s| s.to_string()), last.clone()])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

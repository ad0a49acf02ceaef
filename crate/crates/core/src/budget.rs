//! Global parameter-budget planning across embedding, encoder and classifier groups.
//!
//! The overall retained fraction `P` must satisfy
//!
//! ```text
//! P·|θ| = P_embd·|θ_embd| + P_svd·P_weight·|θ_encd| + |θ_cls|
//! ```
//!
//! [`nominal_weight_fraction`] solves that identity for `P_weight` from group
//! counts alone. [`solve_budget`] does the same on a concrete layout but uses the
//! storage each matrix actually gets after rank flooring, and treats matrices
//! that cannot be factored (vectors, classifier) as fixed, so that
//! [`plan_check`] lands on `P` up to mask rounding.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::factorize::{expansion_warning, rank_for_ratio};
use crate::prune::retained_count;
use crate::tensor::{Group, ParamBundle};

/// Default per-iteration retained fraction Δ.
pub const DEFAULT_DELTA: f64 = 0.9;
/// Random-search range for the embedding fraction.
pub const EMBEDDING_SEARCH_RANGE: (f64, f64) = (0.15, 1.0);
/// Random-search range for the factorization fraction.
pub const SVD_SEARCH_RANGE: (f64, f64) = (0.3, 0.6);
/// Relative tolerance between achieved and target overall fraction.
pub const PLAN_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("{name} = {value} outside {range}")]
    FractionOutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("infeasible budget: {available:.1} parameters remain for the encoder after embedding and fixed parameters (slack {slack:.1})")]
    Infeasible { available: f64, slack: f64 },
    #[error("no feasible plan among {trials} sampled trials")]
    NoFeasiblePlan { trials: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("plan file line {line}: {reason}")]
    PlanParse { line: usize, reason: String },
}

fn check_unit(name: &'static str, value: f64) -> Result<(), BudgetError> {
    if value.is_finite() && value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(BudgetError::FractionOutOfRange { name, value, range: "(0, 1]" })
    }
}

fn check_delta(value: f64) -> Result<(), BudgetError> {
    if value.is_finite() && value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(BudgetError::FractionOutOfRange { name: "delta", value, range: "(0, 1)" })
    }
}

/// Shape of one parameter matrix, without its values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub group: Group,
    pub rows: usize,
    pub cols: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embedding and encoder matrices with both dimensions ≥ 2 are factored;
    /// vectors and the classifier are carried over unchanged.
    pub fn is_compressible(&self) -> bool {
        self.group != Group::Classifier && self.rows.min(self.cols) >= 2
    }
}

/// Shapes and groups of every parameter in a model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BundleLayout {
    pub entries: Vec<LayoutEntry>,
}

impl From<&ParamBundle> for BundleLayout {
    fn from(bundle: &ParamBundle) -> Self {
        Self {
            entries: bundle
                .iter()
                .map(|(name, e)| LayoutEntry {
                    name: name.to_string(),
                    group: e.group,
                    rows: e.matrix.rows(),
                    cols: e.matrix.cols(),
                })
                .collect(),
        }
    }
}

impl BundleLayout {
    pub fn push(&mut self, name: impl Into<String>, group: Group, rows: usize, cols: usize) {
        self.entries.push(LayoutEntry { name: name.into(), group, rows, cols });
    }

    pub fn counts(&self) -> GroupCounts {
        let mut c = GroupCounts::default();
        for e in &self.entries {
            c.total += e.len();
            match e.group {
                Group::Embedding => c.embedding += e.len(),
                Group::Encoder => c.encoder += e.len(),
                Group::Classifier => c.classifier += e.len(),
            }
        }
        c
    }

    /// BERT-Base shape constants: vocabulary 30522, hidden 768, 12 layers,
    /// intermediate 3072, 512 positions, 2 token types, a 768×768 pooler and a
    /// binary classification head.
    pub fn bert_base() -> Self {
        const VOCAB: usize = 30522;
        const HIDDEN: usize = 768;
        const LAYERS: usize = 12;
        const INTERMEDIATE: usize = 3072;
        const POSITIONS: usize = 512;
        const TOKEN_TYPES: usize = 2;
        const LABELS: usize = 2;

        let mut l = BundleLayout::default();
        l.push("embeddings.word", Group::Embedding, VOCAB, HIDDEN);
        l.push("embeddings.position", Group::Embedding, POSITIONS, HIDDEN);
        l.push("embeddings.token_type", Group::Embedding, TOKEN_TYPES, HIDDEN);
        l.push("embeddings.ln.gamma", Group::Embedding, 1, HIDDEN);
        l.push("embeddings.ln.beta", Group::Embedding, 1, HIDDEN);
        for i in 0..LAYERS {
            for proj in ["query", "key", "value", "output"] {
                l.push(format!("layers.{i}.attn.{proj}.weight"), Group::Encoder, HIDDEN, HIDDEN);
                l.push(format!("layers.{i}.attn.{proj}.bias"), Group::Encoder, 1, HIDDEN);
            }
            l.push(format!("layers.{i}.attn.ln.gamma"), Group::Encoder, 1, HIDDEN);
            l.push(format!("layers.{i}.attn.ln.beta"), Group::Encoder, 1, HIDDEN);
            l.push(format!("layers.{i}.ffn.inner.weight"), Group::Encoder, HIDDEN, INTERMEDIATE);
            l.push(format!("layers.{i}.ffn.inner.bias"), Group::Encoder, 1, INTERMEDIATE);
            l.push(format!("layers.{i}.ffn.outer.weight"), Group::Encoder, INTERMEDIATE, HIDDEN);
            l.push(format!("layers.{i}.ffn.outer.bias"), Group::Encoder, 1, HIDDEN);
            l.push(format!("layers.{i}.ffn.ln.gamma"), Group::Encoder, 1, HIDDEN);
            l.push(format!("layers.{i}.ffn.ln.beta"), Group::Encoder, 1, HIDDEN);
        }
        l.push("pooler.weight", Group::Classifier, HIDDEN, HIDDEN);
        l.push("pooler.bias", Group::Classifier, 1, HIDDEN);
        l.push("classifier.weight", Group::Classifier, HIDDEN, LABELS);
        l.push("classifier.bias", Group::Classifier, 1, LABELS);
        l
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupCounts {
    pub total: usize,
    pub embedding: usize,
    pub encoder: usize,
    pub classifier: usize,
}

/// Direct rearrangement of the budget identity for `P_weight`, on counts alone.
pub fn nominal_weight_fraction(
    counts: GroupCounts,
    p_overall: f64,
    p_embd: f64,
    p_svd: f64,
) -> Result<f64, BudgetError> {
    check_unit("p_overall", p_overall)?;
    check_unit("p_embd", p_embd)?;
    check_unit("p_svd", p_svd)?;
    let available = p_overall * counts.total as f64
        - p_embd * counts.embedding as f64
        - counts.classifier as f64;
    if available <= 0.0 || counts.encoder == 0 {
        return Err(BudgetError::Infeasible { available, slack: available });
    }
    Ok(available / (p_svd * counts.encoder as f64))
}

/// The three fine-grained fractions applied in one compression step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageFractions {
    pub p_embd: f64,
    pub p_svd: f64,
    pub p_weight: f64,
}

impl StageFractions {
    pub const IDENTITY: StageFractions = StageFractions { p_embd: 1.0, p_svd: 1.0, p_weight: 1.0 };
}

/// Per-entry outcome of simulating a compression step.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryAccounting {
    pub name: String,
    pub group: Group,
    pub original: usize,
    pub retained: usize,
    pub rank: Option<usize>,
}

/// How one layout entry is stored under a set of fractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryTreatment {
    /// Copied unchanged.
    Keep,
    /// Replaced by an unpruned rank-`r` factor pair (embedding matrices).
    Factor(usize),
    /// Pruned in place without factorization (`P_svd = 1`).
    Prune,
    /// Factored at rank `r` and both factors pruned.
    Hybrid(usize),
}

impl EntryTreatment {
    pub fn rank(self) -> Option<usize> {
        match self {
            EntryTreatment::Factor(r) | EntryTreatment::Hybrid(r) => Some(r),
            _ => None,
        }
    }
}

/// Decides the treatment of an entry. A fraction of exactly 1 disables the
/// corresponding mechanism, so the identity plan leaves every matrix dense.
pub fn treatment(entry: &LayoutEntry, fractions: StageFractions) -> EntryTreatment {
    if !entry.is_compressible() {
        return EntryTreatment::Keep;
    }
    match entry.group {
        Group::Embedding if fractions.p_embd >= 1.0 => EntryTreatment::Keep,
        Group::Embedding => EntryTreatment::Factor(
            rank_for_ratio(entry.rows, entry.cols, fractions.p_embd).expect("fraction checked"),
        ),
        Group::Encoder if fractions.p_svd >= 1.0 && fractions.p_weight >= 1.0 => EntryTreatment::Keep,
        Group::Encoder if fractions.p_svd >= 1.0 => EntryTreatment::Prune,
        Group::Encoder => EntryTreatment::Hybrid(
            rank_for_ratio(entry.rows, entry.cols, fractions.p_svd).expect("fraction checked"),
        ),
        Group::Classifier => EntryTreatment::Keep,
    }
}

/// Predicts the retained parameter count of every entry under `fractions`,
/// reproducing rank flooring and mask rounding exactly.
pub fn simulate(layout: &BundleLayout, fractions: StageFractions) -> Result<Vec<EntryAccounting>, BudgetError> {
    check_unit("p_embd", fractions.p_embd)?;
    check_unit("p_svd", fractions.p_svd)?;
    check_unit("p_weight", fractions.p_weight)?;
    let p = fractions.p_weight;
    Ok(layout
        .entries
        .iter()
        .map(|e| {
            let t = treatment(e, fractions);
            let retained = match t {
                EntryTreatment::Keep => e.len(),
                EntryTreatment::Factor(r) => (e.rows + e.cols) * r,
                EntryTreatment::Prune => retained_count(e.len(), p),
                EntryTreatment::Hybrid(r) => {
                    retained_count(e.rows * r, p) + retained_count(e.cols * r, p)
                }
            };
            EntryAccounting {
                name: e.name.clone(),
                group: e.group,
                original: e.len(),
                retained,
                rank: t.rank(),
            }
        })
        .collect())
}

/// Solved weight fraction plus any budget left unused because it was clamped to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSolution {
    pub p_weight: f64,
    /// Fraction of |θ| the plan could not spend (0 unless clamped).
    pub unmet: f64,
}

/// Solves `P_weight` for an overall budget on a concrete layout.
pub fn solve_weight_fraction(
    layout: &BundleLayout,
    budget: f64,
    p_embd: f64,
    p_svd: f64,
) -> Result<WeightSolution, BudgetError> {
    check_unit("p_overall", budget)?;
    check_unit("p_embd", p_embd)?;
    check_unit("p_svd", p_svd)?;
    let total = layout.counts().total as f64;
    let mut committed = 0.0;
    let mut prunable = 0.0;
    // p_weight = 0.5 only selects the branch; storage below does not depend on it
    let probe = StageFractions { p_embd, p_svd, p_weight: 0.5 };
    for e in &layout.entries {
        match treatment(e, probe) {
            EntryTreatment::Keep => committed += e.len() as f64,
            EntryTreatment::Factor(r) => committed += ((e.rows + e.cols) * r) as f64,
            EntryTreatment::Prune => prunable += e.len() as f64,
            EntryTreatment::Hybrid(r) => prunable += ((e.rows + e.cols) * r) as f64,
        }
    }
    let available = budget * total - committed;
    if available <= 0.0 {
        return Err(BudgetError::Infeasible { available, slack: available });
    }
    if prunable == 0.0 {
        return Ok(WeightSolution { p_weight: 1.0, unmet: available / total });
    }
    let raw = available / prunable;
    if raw > 1.0 {
        Ok(WeightSolution {
            p_weight: 1.0,
            unmet: (available - prunable) / total,
        })
    } else {
        Ok(WeightSolution { p_weight: raw, unmet: 0.0 })
    }
}

/// Target fractions for a compression run.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionPlan {
    pub p_overall: f64,
    pub p_embd: f64,
    pub p_svd: f64,
    pub p_weight: f64,
    pub delta: f64,
    pub seed: Option<u64>,
    pub unmet: f64,
}

impl CompressionPlan {
    /// A plan that leaves every parameter in place.
    pub fn identity() -> Self {
        Self {
            p_overall: 1.0,
            p_embd: 1.0,
            p_svd: 1.0,
            p_weight: 1.0,
            delta: DEFAULT_DELTA,
            seed: None,
            unmet: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), BudgetError> {
        check_unit("p_overall", self.p_overall)?;
        check_unit("p_embd", self.p_embd)?;
        check_unit("p_svd", self.p_svd)?;
        check_unit("p_weight", self.p_weight)?;
        check_delta(self.delta)
    }

    pub fn fractions(&self) -> StageFractions {
        StageFractions {
            p_embd: self.p_embd,
            p_svd: self.p_svd,
            p_weight: self.p_weight,
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    /// Budget after each compression event: `Δ, Δ², …`, with the last clipped to `P`.
    pub fn budget_schedule(&self) -> Vec<f64> {
        budget_schedule(self.p_overall, self.delta)
    }

    pub fn iterations(&self) -> usize {
        self.budget_schedule().len()
    }

    /// Fractions for an intermediate budget: `P_embd` and `P_svd` move geometrically
    /// from 1 toward their targets (`x^s`, `s = ln b / ln P`) and `P_weight` is re-solved
    /// so the step lands on budget `b`.
    pub fn stage_fractions(&self, layout: &BundleLayout, budget: f64) -> Result<StageFractions, BudgetError> {
        if self.p_overall >= 1.0 || budget >= 1.0 {
            return Ok(StageFractions::IDENTITY);
        }
        let progress = (budget.ln() / self.p_overall.ln()).clamp(0.0, 1.0);
        let p_embd = self.p_embd.powf(progress);
        let p_svd = self.p_svd.powf(progress);
        let p_weight = solve_weight_fraction(layout, budget, p_embd, p_svd)?.p_weight;
        Ok(StageFractions { p_embd, p_svd, p_weight })
    }

    pub fn to_text(&self) -> String {
        let seed = self.seed.map_or("none".to_string(), |s| s.to_string());
        format!(
            "p_overall = {}\np_embd = {}\np_svd = {}\np_weight = {}\ndelta = {}\nseed = {}\nunmet = {}\n",
            self.p_overall, self.p_embd, self.p_svd, self.p_weight, self.delta, seed, self.unmet
        )
    }
}

impl fmt::Display for CompressionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl FromStr for CompressionPlan {
    type Err = BudgetError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut plan = CompressionPlan::identity();
        let mut seen = [false; 4];
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| BudgetError::PlanParse { line: line_no, reason };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let number = || value.parse::<f64>().map_err(|_| err(format!("invalid number {value:?} for {key}")));
            match key {
                "p_overall" => (plan.p_overall, seen[0]) = (number()?, true),
                "p_embd" => (plan.p_embd, seen[1]) = (number()?, true),
                "p_svd" => (plan.p_svd, seen[2]) = (number()?, true),
                "p_weight" => (plan.p_weight, seen[3]) = (number()?, true),
                "delta" => plan.delta = number()?,
                "unmet" => plan.unmet = number()?,
                "seed" => {
                    plan.seed = match value {
                        "none" => None,
                        v => Some(v.parse().map_err(|_| err(format!("invalid seed {v:?}")))?),
                    }
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        let names = ["p_overall", "p_embd", "p_svd", "p_weight"];
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(BudgetError::PlanParse {
                line: 0,
                reason: format!("missing key {}", names[missing]),
            });
        }
        plan.validate()?;
        Ok(plan)
    }
}

pub fn budget_schedule(p_overall: f64, delta: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if p_overall >= 1.0 {
        return out;
    }
    let mut budget = 1.0;
    loop {
        budget *= delta;
        if budget <= p_overall * (1.0 + 1e-12) {
            out.push(p_overall);
            return out;
        }
        out.push(budget);
    }
}

/// Builds a plan for `p_overall` with `P_weight` solved from the other two fractions.
pub fn solve_budget(
    layout: &BundleLayout,
    p_overall: f64,
    p_embd: f64,
    p_svd: f64,
) -> Result<CompressionPlan, BudgetError> {
    let solution = solve_weight_fraction(layout, p_overall, p_embd, p_svd)?;
    if solution.unmet > 0.0 {
        log::warn!(
            "budget {p_overall} not reachable by pruning; {:.4} of the parameters stay unspent",
            solution.unmet
        );
    }
    Ok(CompressionPlan {
        p_overall,
        p_embd,
        p_svd,
        p_weight: solution.p_weight,
        delta: DEFAULT_DELTA,
        seed: None,
        unmet: solution.unmet,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: Group,
    pub original: usize,
    pub retained: usize,
    pub target_fraction: f64,
}

impl GroupReport {
    pub fn achieved_fraction(&self) -> f64 {
        if self.original == 0 {
            1.0
        } else {
            self.retained as f64 / self.original as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanReport {
    pub target: f64,
    pub original: usize,
    pub retained: usize,
    pub groups: Vec<GroupReport>,
    pub entries: Vec<EntryAccounting>,
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl PlanReport {
    pub fn achieved(&self) -> f64 {
        self.retained as f64 / self.original as f64
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for PlanReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "group        original   retained   target   achieved")?;
        for g in &self.groups {
            writeln!(
                f,
                "{:<10} {:>10} {:>10} {:>8.4} {:>10.4}",
                g.group.as_str(),
                g.original,
                g.retained,
                g.target_fraction,
                g.achieved_fraction()
            )?;
        }
        writeln!(
            f,
            "overall    {:>10} {:>10} {:>8.4} {:>10.4}",
            self.original,
            self.retained,
            self.target,
            self.achieved()
        )?;
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        write!(f, "status: {}", if self.passed() { "ok" } else { "violated" })
    }
}

/// Simulates the plan on every matrix and compares achieved against target fractions.
pub fn plan_check(layout: &BundleLayout, plan: &CompressionPlan) -> PlanReport {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    if let Err(e) = plan.validate() {
        violations.push(e.to_string());
        return PlanReport {
            target: plan.p_overall,
            original: layout.counts().total,
            retained: layout.counts().total,
            groups: Vec::new(),
            entries: Vec::new(),
            violations,
            warnings,
        };
    }
    let entries = simulate(layout, plan.fractions()).expect("plan validated");
    for (e, acc) in layout.entries.iter().zip(&entries) {
        if let Some(rank) = acc.rank {
            if let Some(w) = expansion_warning(e.rows, e.cols, rank) {
                warnings.push(format!("{}: {w}", e.name));
            }
        }
    }
    if plan.unmet > 0.0 {
        warnings.push(format!("pruning clamped at 1; {:.4} of the budget is unspent", plan.unmet));
    }
    let groups: Vec<GroupReport> = Group::ALL
        .iter()
        .map(|&group| {
            let (original, retained) = entries
                .iter()
                .filter(|a| a.group == group)
                .fold((0, 0), |(o, r), a| (o + a.original, r + a.retained));
            let target_fraction = match group {
                Group::Embedding => plan.p_embd,
                Group::Encoder => plan.p_svd * plan.p_weight,
                Group::Classifier => 1.0,
            };
            GroupReport { group, original, retained, target_fraction }
        })
        .collect();
    let original: usize = entries.iter().map(|a| a.original).sum();
    let retained: usize = entries.iter().map(|a| a.retained).sum();
    let achieved = retained as f64 / original.max(1) as f64;
    let deviation = (achieved - plan.p_overall).abs();
    if deviation > PLAN_TOLERANCE * plan.p_overall + plan.unmet {
        violations.push(format!(
            "achieved overall fraction {achieved:.6} deviates from target {:.6} by {:.2}%",
            plan.p_overall,
            100.0 * deviation / plan.p_overall
        ));
    }
    PlanReport {
        target: plan.p_overall,
        original,
        retained,
        groups,
        entries,
        violations,
        warnings,
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        return lo;
    }
    rng.random_range(lo.ln()..hi.ln()).exp().clamp(lo, hi)
}

/// Samples `(P_embd, P_svd)` log-uniformly, solves `P_weight`, and keeps the
/// highest-scoring plan that meets the budget exactly. Earlier trials win ties.
pub fn random_search(
    layout: &BundleLayout,
    p_overall: f64,
    trials: usize,
    seed: u64,
    mut evaluator: impl FnMut(&CompressionPlan) -> f64,
) -> Result<CompressionPlan, BudgetError> {
    if trials == 0 {
        return Err(BudgetError::Precondition("random search needs at least one trial".into()));
    }
    check_unit("p_overall", p_overall)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, CompressionPlan)> = None;
    for _ in 0..trials {
        let p_embd = log_uniform(&mut rng, EMBEDDING_SEARCH_RANGE);
        let p_svd = log_uniform(&mut rng, SVD_SEARCH_RANGE);
        // Samples whose pruning would clamp at 1 miss the budget and are skipped.
        let Ok(WeightSolution { p_weight, unmet }) = solve_weight_fraction(layout, p_overall, p_embd, p_svd) else {
            continue;
        };
        if unmet > 0.0 {
            continue;
        }
        let plan = CompressionPlan { p_overall, p_embd, p_svd, p_weight, seed: Some(seed), ..CompressionPlan::identity() };
        let score = evaluator(&plan);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, plan));
        }
    }
    best.map(|(_, p)| p).ok_or(BudgetError::NoFeasiblePlan { trials })
}

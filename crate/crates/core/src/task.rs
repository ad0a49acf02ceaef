//! Seeded synthetic classification tasks for training and distilling toy models.
//!
//! The rule is "majority marker": tokens `0..K` are markers, one per class, and
//! every other vocabulary entry is filler. An example of class `y` contains
//! strictly more copies of marker `y` than of any other marker.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("invalid task config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub validation_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 3,
            vocab_size: 64,
            min_len: 8,
            max_len: 16,
            train_size: 2000,
            validation_size: 500,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        let err = |m: String| Err(TaskError::Config(m));
        if self.num_classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.vocab_size <= self.num_classes {
            return err(format!(
                "vocabulary of {} leaves no filler tokens after {} markers",
                self.vocab_size, self.num_classes
            ));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return err(format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        if self.train_size == 0 {
            return err("train_size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub rule: String,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
}

impl SyntheticTask {
    pub fn label_histogram(examples: &[Example], num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for e in examples {
            h[e.label] += 1;
        }
        h
    }
}

/// The class an example belongs to under the majority-marker rule, if any marker
/// strictly dominates.
pub fn majority_label(tokens: &[usize], num_classes: usize) -> Option<usize> {
    let mut counts = vec![0usize; num_classes];
    for &t in tokens {
        if t < num_classes {
            counts[t] += 1;
        }
    }
    let best = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, c)| **c == best);
    let (label, _) = winners.next()?;
    if best == 0 || winners.next().is_some() {
        None
    } else {
        Some(label)
    }
}

fn sample(rng: &mut ChaCha8Rng, cfg: &TaskConfig, label: usize) -> Example {
    let k = cfg.num_classes;
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    // the winning marker takes 2..=len/2 slots; every rival strictly fewer
    let top = rng.random_range(2..=(len / 2).max(2));
    let mut tokens = vec![label; top];
    for other in (0..k).filter(|&c| c != label) {
        let room = len - tokens.len();
        let count = rng.random_range(0..top).min(room);
        tokens.extend(std::iter::repeat_n(other, count));
    }
    while tokens.len() < len {
        tokens.push(rng.random_range(k..cfg.vocab_size));
    }
    tokens.shuffle(rng);
    Example { tokens, label }
}

fn examples(rng: &mut ChaCha8Rng, cfg: &TaskConfig, count: usize) -> Vec<Example> {
    let mut out: Vec<Example> = (0..count).map(|i| sample(rng, cfg, i % cfg.num_classes)).collect();
    out.shuffle(rng);
    out
}

pub fn generate_task(config: TaskConfig) -> Result<SyntheticTask, TaskError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let train = examples(&mut rng, &config, config.train_size);
    let validation = examples(&mut rng, &config, config.validation_size);
    Ok(SyntheticTask {
        config,
        rule: format!(
            "majority marker: tokens 0..{} mark classes; the most frequent marker is the label",
            config.num_classes
        ),
        train,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let cfg = TaskConfig { train_size: 300, validation_size: 50, ..TaskConfig::default() };
        assert_eq!(generate_task(cfg).unwrap(), generate_task(cfg).unwrap());
        let other = generate_task(TaskConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(other.train, generate_task(cfg).unwrap().train);
    }

    #[test]
    fn three_classes_are_balanced() {
        let task = generate_task(TaskConfig::default()).unwrap();
        for split in [&task.train, &task.validation] {
            let h = SyntheticTask::label_histogram(split, 3);
            let expected = split.len() as f64 / 3.0;
            for c in h {
                assert!((c as f64 - expected).abs() / expected <= 0.05);
            }
        }
    }

    #[test]
    fn labels_follow_the_rule() {
        let task = generate_task(TaskConfig { num_classes: 4, ..TaskConfig::default() }).unwrap();
        for e in task.train.iter().chain(&task.validation) {
            assert!(e.tokens.len() >= 8 && e.tokens.len() <= 16);
            assert!(e.tokens.iter().all(|&t| t < 64));
            assert_eq!(majority_label(&e.tokens, 4), Some(e.label));
        }
    }

    #[test]
    fn majority_label_edge_cases() {
        assert_eq!(majority_label(&[0, 1, 5, 5], 2), None);
        assert_eq!(majority_label(&[5, 6], 2), None);
        assert_eq!(majority_label(&[1, 1, 0, 9], 2), Some(1));
    }

    #[test]
    fn invalid_configs() {
        let base = TaskConfig::default();
        assert!(generate_task(TaskConfig { num_classes: 1, ..base }).is_err());
        assert!(generate_task(TaskConfig { vocab_size: 3, ..base }).is_err());
        assert!(generate_task(TaskConfig { min_len: 20, ..base }).is_err());
        assert!(generate_task(TaskConfig { train_size: 0, ..base }).is_err());
    }
}

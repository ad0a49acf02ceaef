//! Adam optimisation and supervised training of toy models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{argmax, Model, ModelError, ModelGrads, TraceGrads};
use crate::task::Example;
use crate::tensor::Group;

/// Adam step size used for fine-tuning when nothing else is configured.
pub const DEFAULT_LEARNING_RATE: f64 = 2e-5;
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: DEFAULT_LEARNING_RATE, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias correction. Masked entries and frozen groups are never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub frozen: Vec<Group>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, frozen: Vec::new(), first: Vec::new(), second: Vec::new(), steps: 0 }
    }

    pub fn freeze(mut self, group: Group) -> Self {
        if !self.frozen.contains(&group) {
            self.frozen.push(group);
        }
        self
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Forgets moment estimates, e.g. after the parameter shapes changed.
    pub fn reset(&mut self) {
        self.first.clear();
        self.second.clear();
        self.steps = 0;
    }

    pub fn step(&mut self, model: &mut Model, grads: &mut ModelGrads) {
        let AdamConfig { learning_rate: lr, beta1, beta2, epsilon } = self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut params = model.slots_mut();
        let grads = grads.slots_mut();
        assert_eq!(params.len(), grads.len(), "gradient buffer does not match model");
        if self.first.len() != params.len() || self.first.iter().zip(&params).any(|(m, p)| m.len() != p.values.len()) {
            self.first = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
            self.second = self.first.clone();
        }
        for (k, (param, grad)) in params.iter_mut().zip(&grads).enumerate() {
            if self.frozen.contains(&param.group) {
                continue;
            }
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..param.values.len() {
                if param.mask.is_some_and(|mask| !mask.bits()[i]) {
                    continue;
                }
                let g = grad.values[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
                param.values[i] -= update;
            }
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Hard-label cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let loss = -log_softmax(logits)[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (loss, grad)
}

pub fn accuracy(model: &Model, examples: &[Example]) -> Result<f64, ModelError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for e in examples {
        if argmax(&model.forward(&e.tokens)?.logits) == e.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Shuffled mini-batches of indices for one epoch.
pub fn epoch_batches(len: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), batch_size: DEFAULT_BATCH_SIZE, epochs: 1, seed: 0 }
    }
}

/// One supervised step on a batch; returns the mean cross-entropy.
pub fn supervised_step(model: &mut Model, optimizer: &mut Adam, batch: &[&Example]) -> Result<f64, ModelError> {
    let mut grads = model.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for e in batch {
        let trace = model.forward(&e.tokens)?;
        let (loss, mut g) = cross_entropy(&trace.logits, e.label);
        total += loss;
        g.iter_mut().for_each(|v| *v *= scale);
        model.backward_into(&trace, &TraceGrads::logits_only(g), &mut grads);
    }
    optimizer.step(model, &mut grads);
    Ok(total * scale)
}

/// Supervised training on hard labels; returns the mean loss of each epoch.
pub fn train_supervised(model: &mut Model, train: &[Example], config: &TrainConfig) -> Result<Vec<f64>, ModelError> {
    let mut optimizer = Adam::new(config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(train.len(), config.batch_size, &mut rng);
        for idx in &batches {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            sum += supervised_step(model, &mut optimizer, &batch)?;
        }
        history.push(sum / batches.len().max(1) as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::prune::PruneMask;
    use crate::model::Weight;

    fn tiny() -> Model {
        let cfg = ModelConfig {
            vocab_size: 6,
            embed_dim: 4,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 4,
            max_seq_len: 4,
            num_classes: 2,
        };
        Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn softmax_helpers() {
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let l = log_softmax(&[0.0, 0.0]);
        assert!((l[0] + std::f64::consts::LN_2).abs() < 1e-15);
        let (loss, g) = cross_entropy(&[0.0, 0.0], 1);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, vec![0.5, -0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut m = tiny();
        let before = m.clone();
        let mut grads = m.zeros_like();
        grads.classifier.bias = vec![0.3, -2.0];
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..AdamConfig::default() });
        opt.step(&mut m, &mut grads);
        assert!((m.classifier.bias[0] - (before.classifier.bias[0] - 0.1)).abs() < 1e-6);
        assert!((m.classifier.bias[1] - (before.classifier.bias[1] + 0.1)).abs() < 1e-6);
        assert_eq!(m.layers, before.layers);
    }

    #[test]
    fn frozen_groups_and_masked_entries_stay_put() {
        let mut m = tiny();
        let w = m.layers[0].query.weight.effective();
        let mut bits = vec![true; w.len()];
        bits[0] = false;
        m.layers[0].query.weight = Weight::Dense { matrix: w, mask: Some(PruneMask::new(4, 4, bits)) };
        m.apply_masks();
        let before = m.clone();
        let mut grads = m.zeros_like();
        for s in grads.slots_mut() {
            s.values.iter_mut().for_each(|v| *v = 1.0);
        }
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.01, ..AdamConfig::default() }).freeze(Group::Classifier);
        opt.step(&mut m, &mut grads);
        assert_eq!(m.classifier, before.classifier);
        assert_eq!(m.layers[0].query.weight.effective().data()[0], 0.0);
        assert_ne!(m.layers[0].key, before.layers[0].key);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut m = tiny();
        let before = m.clone();
        let data = vec![Example { tokens: vec![0, 1, 2], label: 1 }; 4];
        let cfg = TrainConfig { adam: AdamConfig { learning_rate: 0.0, ..AdamConfig::default() }, ..TrainConfig::default() };
        train_supervised(&mut m, &data, &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn training_reduces_loss() {
        let mut m = tiny();
        let data: Vec<Example> = (0..16)
            .map(|i| Example { tokens: vec![i % 2, 3, 4], label: i % 2 })
            .collect();
        let cfg = TrainConfig {
            adam: AdamConfig { learning_rate: 0.01, ..AdamConfig::default() },
            batch_size: 8,
            epochs: 30,
            seed: 1,
        };
        let history = train_supervised(&mut m, &data, &cfg).unwrap();
        assert!(history.last().unwrap() < &(history[0] * 0.5));
        assert_eq!(accuracy(&m, &data).unwrap(), 1.0);
    }
}

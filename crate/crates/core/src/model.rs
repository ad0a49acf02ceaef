//! A small post-LN transformer encoder classifier with hand-derived gradients.
//!
//! Every weight matrix can be stored densely (optionally with a pruning mask) or
//! as a masked low-rank pair. Factored weights run in factored form: a linear
//! layer computes `(x·A)·Bᵀ` and an embedding lookup computes `A[t]·Bᵀ`.
//!
//! Architecture, per input of `n` tokens:
//!
//! ```text
//! e   = LN(token[t] + position[i])                       embedding output
//! per layer:
//!   q, k, v = e·Wq + bq, e·Wk + bk, e·Wv + bv
//!   a_h = softmax(q_h k_hᵀ / sqrt(d_h))                  attention maps
//!   x1  = LN(e + concat_h(a_h v_h)·Wo + bo)
//!   x2  = LN(x1 + gelu(x1·W1 + b1)·W2 + b2)              hidden output
//! logits = mean_rows(x_L)·Wc + bc
//! ```

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::budget::BundleLayout;
use crate::factorize::LowRankPair;
use crate::hybrid::FactoredLayer;
use crate::prune::PruneMask;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, DenseMatrix, Group, ParamBundle};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Suffixes of the two factor entries that replace a factored matrix in a bundle.
pub const FACTOR_A_SUFFIX: &str = "::a";
pub const FACTOR_B_SUFFIX: &str = "::b";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfVocab {
        token: usize,
        position: usize,
        vocab: usize,
    },
    #[error("sequence length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("bundle has no entry for {0:?}")]
    MissingEntry(String),
    #[error("entry {name:?} has shape {found:?}, expected {expected:?}")]
    EntryShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("config file line {line}: {reason}")]
    ConfigParse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 64,
            max_seq_len: 16,
            num_classes: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Dense shapes of every parameter, in bundle order.
    pub fn layout(&self) -> BundleLayout {
        let (d, f) = (self.embed_dim, self.ffn_dim);
        let mut l = BundleLayout::default();
        l.push("embeddings.token", Group::Embedding, self.vocab_size, d);
        l.push("embeddings.position", Group::Embedding, self.max_seq_len, d);
        l.push("embeddings.ln.gamma", Group::Embedding, 1, d);
        l.push("embeddings.ln.beta", Group::Embedding, 1, d);
        for i in 0..self.num_layers {
            for proj in ATTENTION_PROJECTIONS {
                l.push(format!("layers.{i}.attn.{proj}.weight"), Group::Encoder, d, d);
                l.push(format!("layers.{i}.attn.{proj}.bias"), Group::Encoder, 1, d);
            }
            l.push(format!("layers.{i}.attn.ln.gamma"), Group::Encoder, 1, d);
            l.push(format!("layers.{i}.attn.ln.beta"), Group::Encoder, 1, d);
            l.push(format!("layers.{i}.ffn.inner.weight"), Group::Encoder, d, f);
            l.push(format!("layers.{i}.ffn.inner.bias"), Group::Encoder, 1, f);
            l.push(format!("layers.{i}.ffn.outer.weight"), Group::Encoder, f, d);
            l.push(format!("layers.{i}.ffn.outer.bias"), Group::Encoder, 1, d);
            l.push(format!("layers.{i}.ffn.ln.gamma"), Group::Encoder, 1, d);
            l.push(format!("layers.{i}.ffn.ln.beta"), Group::Encoder, 1, d);
        }
        l.push("classifier.weight", Group::Classifier, d, self.num_classes);
        l.push("classifier.bias", Group::Classifier, 1, self.num_classes);
        l
    }

    pub fn to_text(&self) -> String {
        format!(
            "vocab_size = {}\nembed_dim = {}\nnum_layers = {}\nnum_heads = {}\nffn_dim = {}\nmax_seq_len = {}\nnum_classes = {}\n",
            self.vocab_size,
            self.embed_dim,
            self.num_layers,
            self.num_heads,
            self.ffn_dim,
            self.max_seq_len,
            self.num_classes
        )
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl FromStr for ModelConfig {
    type Err = ModelError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut cfg = ModelConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| ModelError::ConfigParse { line: i + 1, reason };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found {line:?}")))?;
            let value: usize = value
                .trim()
                .parse()
                .map_err(|_| err(format!("invalid integer {:?}", value.trim())))?;
            let slot = match key.trim() {
                "vocab_size" => &mut cfg.vocab_size,
                "embed_dim" => &mut cfg.embed_dim,
                "num_layers" => &mut cfg.num_layers,
                "num_heads" => &mut cfg.num_heads,
                "ffn_dim" => &mut cfg.ffn_dim,
                "max_seq_len" => &mut cfg.max_seq_len,
                "num_classes" => &mut cfg.num_classes,
                other => return Err(err(format!("unknown key {other:?}"))),
            };
            *slot = value;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

const ATTENTION_PROJECTIONS: [&str; 4] = ["query", "key", "value", "output"];

/// A weight matrix `W` (rows = inputs, cols = outputs) in dense or factored storage.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Dense {
        matrix: DenseMatrix,
        mask: Option<PruneMask>,
    },
    Factored(FactoredLayer),
}

impl Weight {
    pub fn dense(matrix: DenseMatrix) -> Self {
        Weight::Dense { matrix, mask: None }
    }

    /// Dense shape `W` stands for.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Weight::Dense { matrix, .. } => matrix.shape(),
            Weight::Factored(f) => f.original_shape(),
        }
    }

    pub fn effective(&self) -> DenseMatrix {
        match self {
            Weight::Dense { matrix, .. } => matrix.clone(),
            Weight::Factored(f) => f.effective_weight(),
        }
    }

    pub fn stored_params(&self) -> usize {
        match self {
            Weight::Dense { matrix, .. } => matrix.len(),
            Weight::Factored(f) => f.pair.stored_params(),
        }
    }

    pub fn retained_params(&self) -> usize {
        match self {
            Weight::Dense { matrix, mask } => mask.as_ref().map_or(matrix.len(), PruneMask::ones_count),
            Weight::Factored(f) => f.retained_count(),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            Weight::Dense { matrix, mask } => Weight::Dense {
                matrix: DenseMatrix::zeros(matrix.rows(), matrix.cols()),
                mask: mask.clone(),
            },
            Weight::Factored(f) => Weight::Factored(FactoredLayer {
                pair: LowRankPair {
                    a: DenseMatrix::zeros(f.pair.a.rows(), f.pair.a.cols()),
                    b: DenseMatrix::zeros(f.pair.b.rows(), f.pair.b.cols()),
                },
                mask_a: f.mask_a.clone(),
                mask_b: f.mask_b.clone(),
            }),
        }
    }

    fn slots_mut<'a>(&'a mut self, group: Group, out: &mut Vec<ParamSlot<'a>>) {
        match self {
            Weight::Dense { matrix, mask } => out.push(ParamSlot {
                group,
                values: matrix.data_mut(),
                mask: mask.as_ref(),
            }),
            Weight::Factored(FactoredLayer { pair, mask_a, mask_b }) => {
                out.push(ParamSlot { group, values: pair.a.data_mut(), mask: Some(mask_a) });
                out.push(ParamSlot { group, values: pair.b.data_mut(), mask: Some(mask_b) });
            }
        }
    }

    fn apply_masks(&mut self) {
        match self {
            Weight::Dense { matrix, mask: Some(mask) } => mask.zero_masked(matrix.data_mut()),
            Weight::Dense { mask: None, .. } => {}
            Weight::Factored(FactoredLayer { pair, mask_a, mask_b }) => {
                mask_a.zero_masked(pair.a.data_mut());
                mask_b.zero_masked(pair.b.data_mut());
            }
        }
    }

    /// Row `index` of the dense weight.
    fn lookup(&self, index: usize, out: &mut [f64]) {
        match self {
            Weight::Dense { matrix, .. } => out.copy_from_slice(matrix.row(index)),
            Weight::Factored(f) => {
                let a_row = f.pair.a.row(index);
                let b = &f.pair.b;
                for (j, o) in out.iter_mut().enumerate() {
                    *o = a_row.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                }
            }
        }
    }

    fn lookup_backward(&self, grad: &mut Weight, index: usize, upstream: &[f64]) {
        match (self, grad) {
            (Weight::Dense { .. }, Weight::Dense { matrix, .. }) => {
                let cols = matrix.cols();
                let row = &mut matrix.data_mut()[index * cols..(index + 1) * cols];
                row.iter_mut().zip(upstream).for_each(|(g, u)| *g += u);
            }
            (Weight::Factored(f), Weight::Factored(g)) => {
                let r = f.rank();
                let a_row = f.pair.a.row(index);
                let b = f.pair.b.data();
                let ga = &mut g.pair.a.data_mut()[index * r..(index + 1) * r];
                // dA[t] += u·B, dB += uᵀ A[t]
                for (j, &u) in upstream.iter().enumerate() {
                    if u == 0.0 {
                        continue;
                    }
                    for c in 0..r {
                        ga[c] += u * b[j * r + c];
                    }
                }
                let gb = g.pair.b.data_mut();
                for (j, &u) in upstream.iter().enumerate() {
                    for c in 0..r {
                        gb[j * r + c] += u * a_row[c];
                    }
                }
            }
            _ => unreachable!("gradient storage mirrors the model"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Weight,
    pub bias: Vec<f64>,
}

impl Linear {
    /// `y = x·W + b` for `n` rows; returns `y` and, for factored weights, `x·A`.
    fn forward(&self, x: &[f64], n: usize) -> (Vec<f64>, Option<Vec<f64>>) {
        let (inp, out) = self.weight.shape();
        let mut y = vec![0.0; n * out];
        let mid = match &self.weight {
            Weight::Dense { matrix, .. } => {
                gemm_nn(x, matrix.data(), &mut y, n, inp, out);
                None
            }
            Weight::Factored(f) => {
                let r = f.rank();
                let mut t = vec![0.0; n * r];
                gemm_nn(x, f.pair.a.data(), &mut t, n, inp, r);
                gemm_nt(&t, f.pair.b.data(), &mut y, n, r, out);
                Some(t)
            }
        };
        for row in y.chunks_mut(out) {
            row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        (y, mid)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, grad: &mut Linear, x: &[f64], mid: Option<&[f64]>, dy: &[f64], n: usize) -> Vec<f64> {
        let (inp, out) = self.weight.shape();
        for row in dy.chunks(out) {
            grad.bias.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
        let mut dx = vec![0.0; n * inp];
        match (&self.weight, &mut grad.weight) {
            (Weight::Dense { matrix, .. }, Weight::Dense { matrix: g, .. }) => {
                gemm_tn(x, dy, g.data_mut(), n, inp, out);
                gemm_nt(dy, matrix.data(), &mut dx, n, out, inp);
            }
            (Weight::Factored(f), Weight::Factored(g)) => {
                let r = f.rank();
                let t = mid.expect("factored forward caches x·A");
                gemm_tn(dy, t, g.pair.b.data_mut(), n, out, r);
                let mut dt = vec![0.0; n * r];
                gemm_nn(dy, f.pair.b.data(), &mut dt, n, out, r);
                gemm_tn(x, &dt, g.pair.a.data_mut(), n, inp, r);
                gemm_nt(&dt, f.pair.a.data(), &mut dx, n, r, inp);
            }
            _ => unreachable!("gradient storage mirrors the model"),
        }
        dx
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        Self { gamma: vec![1.0; d], beta: vec![0.0; d] }
    }

    fn forward(&self, x: &[f64], n: usize) -> (Vec<f64>, NormCache) {
        let d = self.gamma.len();
        let mut y = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                y[i * d + j] = self.gamma[j] * h + self.beta[j];
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    fn backward(&self, grad: &mut LayerNorm, cache: &NormCache, dy: &[f64], n: usize) -> Vec<f64> {
        let d = self.gamma.len();
        let mut dx = vec![0.0; n * d];
        let mut dxhat = vec![0.0; d];
        for i in 0..n {
            let xh = &cache.xhat[i * d..(i + 1) * d];
            let dyr = &dy[i * d..(i + 1) * d];
            for j in 0..d {
                grad.gamma[j] += dyr[j] * xh[j];
                grad.beta[j] += dyr[j];
                dxhat[j] = dyr[j] * self.gamma[j];
            }
            let sum: f64 = dxhat.iter().sum();
            let dot: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
            let scale = cache.inv_std[i] / d as f64;
            for j in 0..d {
                dx[i * d + j] = scale * (d as f64 * dxhat[j] - sum - xh[j] * dot);
            }
        }
        dx
    }

    fn zeros_like(&self) -> Self {
        Self { gamma: vec![0.0; self.gamma.len()], beta: vec![0.0; self.beta.len()] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: LayerNorm,
    pub ffn_inner: Linear,
    pub ffn_outer: Linear,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            output: self.output.zeros_like(),
            attn_norm: self.attn_norm.zeros_like(),
            ffn_inner: self.ffn_inner.zeros_like(),
            ffn_outer: self.ffn_outer.zeros_like(),
            ffn_norm: self.ffn_norm.zeros_like(),
        }
    }

    fn projections(&self) -> [(&'static str, &Linear); 4] {
        [
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("output", &self.output),
        ]
    }
}

/// One trainable buffer, in a fixed order shared by a model and its gradient.
pub struct ParamSlot<'a> {
    pub group: Group,
    pub values: &'a mut [f64],
    pub mask: Option<&'a PruneMask>,
}

pub use crate::prune::MaskSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub token_embedding: Weight,
    pub position_embedding: Weight,
    pub embedding_norm: LayerNorm,
    pub layers: Vec<EncoderLayer>,
    pub classifier: Linear,
}

/// Gradients share the model's structure, including factor shapes and masks.
pub type ModelGrads = Model;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Model {
    /// Random initialisation: weights `N(0, 1/fan_in)`, embeddings `N(0, 1)`,
    /// zero biases and identity layer norms.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let (d, f) = (config.embed_dim, config.ffn_dim);
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            DenseMatrix::from_raw(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
        };
        let mut linear = |inp: usize, out: usize| Linear {
            weight: Weight::dense(normal(inp, out, 1.0 / (inp as f64).sqrt())),
            bias: vec![0.0; out],
        };
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer {
                query: linear(d, d),
                key: linear(d, d),
                value: linear(d, d),
                output: linear(d, d),
                attn_norm: LayerNorm::identity(d),
                ffn_inner: linear(d, f),
                ffn_outer: linear(f, d),
                ffn_norm: LayerNorm::identity(d),
            })
            .collect();
        let classifier = linear(d, config.num_classes);
        Ok(Self {
            config,
            token_embedding: Weight::dense(normal(config.vocab_size, d, 1.0)),
            position_embedding: Weight::dense(normal(config.max_seq_len, d, 1.0)),
            embedding_norm: LayerNorm::identity(d),
            layers,
            classifier,
        })
    }

    pub fn zeros_like(&self) -> ModelGrads {
        Model {
            config: self.config,
            token_embedding: self.token_embedding.zeros_like(),
            position_embedding: self.position_embedding.zeros_like(),
            embedding_norm: self.embedding_norm.zeros_like(),
            layers: self.layers.iter().map(EncoderLayer::zeros_like).collect(),
            classifier: self.classifier.zeros_like(),
        }
    }

    /// Every trainable buffer in a fixed order.
    pub fn slots_mut(&mut self) -> Vec<ParamSlot<'_>> {
        fn norm<'a>(n: &'a mut LayerNorm, group: Group, out: &mut Vec<ParamSlot<'a>>) {
            out.push(ParamSlot { group, values: &mut n.gamma, mask: None });
            out.push(ParamSlot { group, values: &mut n.beta, mask: None });
        }
        fn linear<'a>(l: &'a mut Linear, group: Group, out: &mut Vec<ParamSlot<'a>>) {
            l.weight.slots_mut(group, out);
            out.push(ParamSlot { group, values: &mut l.bias, mask: None });
        }
        let mut out = Vec::new();
        self.token_embedding.slots_mut(Group::Embedding, &mut out);
        self.position_embedding.slots_mut(Group::Embedding, &mut out);
        norm(&mut self.embedding_norm, Group::Embedding, &mut out);
        for layer in &mut self.layers {
            linear(&mut layer.query, Group::Encoder, &mut out);
            linear(&mut layer.key, Group::Encoder, &mut out);
            linear(&mut layer.value, Group::Encoder, &mut out);
            linear(&mut layer.output, Group::Encoder, &mut out);
            norm(&mut layer.attn_norm, Group::Encoder, &mut out);
            linear(&mut layer.ffn_inner, Group::Encoder, &mut out);
            linear(&mut layer.ffn_outer, Group::Encoder, &mut out);
            norm(&mut layer.ffn_norm, Group::Encoder, &mut out);
        }
        linear(&mut self.classifier, Group::Classifier, &mut out);
        out
    }

    /// Names of the buffers yielded by [`Model::slots_mut`], in the same order.
    /// Factor buffers carry the `::a` / `::b` suffixes.
    pub fn slot_names(&self) -> Vec<String> {
        fn weight(w: &Weight, name: &str, out: &mut Vec<String>) {
            match w {
                Weight::Dense { .. } => out.push(name.to_string()),
                Weight::Factored(_) => {
                    out.push(format!("{name}{FACTOR_A_SUFFIX}"));
                    out.push(format!("{name}{FACTOR_B_SUFFIX}"));
                }
            }
        }
        fn linear(l: &Linear, prefix: &str, out: &mut Vec<String>) {
            weight(&l.weight, &format!("{prefix}.weight"), out);
            out.push(format!("{prefix}.bias"));
        }
        let norm = |prefix: &str, out: &mut Vec<String>| {
            out.push(format!("{prefix}.gamma"));
            out.push(format!("{prefix}.beta"));
        };
        let mut out = Vec::new();
        weight(&self.token_embedding, "embeddings.token", &mut out);
        weight(&self.position_embedding, "embeddings.position", &mut out);
        norm("embeddings.ln", &mut out);
        for (i, layer) in self.layers.iter().enumerate() {
            for (proj, l) in layer.projections() {
                linear(l, &format!("layers.{i}.attn.{proj}"), &mut out);
            }
            norm(&format!("layers.{i}.attn.ln"), &mut out);
            linear(&layer.ffn_inner, &format!("layers.{i}.ffn.inner"), &mut out);
            linear(&layer.ffn_outer, &format!("layers.{i}.ffn.outer"), &mut out);
            norm(&format!("layers.{i}.ffn.ln"), &mut out);
        }
        linear(&self.classifier, "classifier", &mut out);
        out
    }

    /// Zeroes every masked entry.
    pub fn apply_masks(&mut self) {
        self.token_embedding.apply_masks();
        self.position_embedding.apply_masks();
        for layer in &mut self.layers {
            for l in [
                &mut layer.query,
                &mut layer.key,
                &mut layer.value,
                &mut layer.output,
                &mut layer.ffn_inner,
                &mut layer.ffn_outer,
            ] {
                l.weight.apply_masks();
            }
        }
        self.classifier.weight.apply_masks();
    }

    /// Weight matrices by dense bundle name, with their groups.
    pub fn weights(&self) -> Vec<(String, Group, &Weight)> {
        let mut out = vec![
            ("embeddings.token".to_string(), Group::Embedding, &self.token_embedding),
            ("embeddings.position".to_string(), Group::Embedding, &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (proj, l) in layer.projections() {
                out.push((format!("layers.{i}.attn.{proj}.weight"), Group::Encoder, &l.weight));
            }
            out.push((format!("layers.{i}.ffn.inner.weight"), Group::Encoder, &layer.ffn_inner.weight));
            out.push((format!("layers.{i}.ffn.outer.weight"), Group::Encoder, &layer.ffn_outer.weight));
        }
        out.push(("classifier.weight".to_string(), Group::Classifier, &self.classifier.weight));
        out
    }

    /// Parameters that survive compression: mask ones for pruned storage, every
    /// stored entry otherwise.
    pub fn retained_params(&self) -> usize {
        let weights: usize = self.weights().iter().map(|(_, _, w)| w.retained_params()).sum();
        let d = self.config.embed_dim;
        let vectors = 2 * d
            + self.layers.len() * (4 * d + 2 * d + self.config.ffn_dim + d + 2 * d)
            + self.config.num_classes;
        weights + vectors
    }

    pub fn dense_param_count(&self) -> usize {
        self.config.layout().counts().total
    }

    /// Serialises to a bundle; factored weights become `name::a` / `name::b`.
    pub fn to_bundle(&self) -> ParamBundle {
        self.to_bundle_with_masks().0
    }

    /// Bundle plus the explicit masks of every pruned entry.
    pub fn to_bundle_with_masks(&self) -> (ParamBundle, MaskSet) {
        let mut b = ParamBundle::new();
        let mut masks = MaskSet::new();
        let row = |v: &[f64]| DenseMatrix::from_raw(1, v.len(), v.to_vec());
        let mut put_weight = |b: &mut ParamBundle, name: String, group: Group, w: &Weight| match w {
            Weight::Dense { matrix, mask } => {
                if let Some(m) = mask {
                    masks.insert(name.clone(), m.clone());
                }
                b.insert(name, group, matrix.clone()).expect("unique names");
            }
            Weight::Factored(f) => {
                let a = format!("{name}{FACTOR_A_SUFFIX}");
                let bn = format!("{name}{FACTOR_B_SUFFIX}");
                masks.insert(a.clone(), f.mask_a.clone());
                masks.insert(bn.clone(), f.mask_b.clone());
                b.insert(a, group, f.pair.a.clone()).expect("unique names");
                b.insert(bn, group, f.pair.b.clone()).expect("unique names");
            }
        };
        let put_norm = |b: &mut ParamBundle, prefix: &str, group: Group, n: &LayerNorm| {
            b.insert(format!("{prefix}.gamma"), group, row(&n.gamma)).expect("unique names");
            b.insert(format!("{prefix}.beta"), group, row(&n.beta)).expect("unique names");
        };
        put_weight(&mut b, "embeddings.token".into(), Group::Embedding, &self.token_embedding);
        put_weight(&mut b, "embeddings.position".into(), Group::Embedding, &self.position_embedding);
        put_norm(&mut b, "embeddings.ln", Group::Embedding, &self.embedding_norm);
        for (i, layer) in self.layers.iter().enumerate() {
            for (proj, l) in layer.projections() {
                put_weight(&mut b, format!("layers.{i}.attn.{proj}.weight"), Group::Encoder, &l.weight);
                b.insert(format!("layers.{i}.attn.{proj}.bias"), Group::Encoder, row(&l.bias))
                    .expect("unique names");
            }
            put_norm(&mut b, &format!("layers.{i}.attn.ln"), Group::Encoder, &layer.attn_norm);
            for (part, l) in [("inner", &layer.ffn_inner), ("outer", &layer.ffn_outer)] {
                put_weight(&mut b, format!("layers.{i}.ffn.{part}.weight"), Group::Encoder, &l.weight);
                b.insert(format!("layers.{i}.ffn.{part}.bias"), Group::Encoder, row(&l.bias))
                    .expect("unique names");
            }
            put_norm(&mut b, &format!("layers.{i}.ffn.ln"), Group::Encoder, &layer.ffn_norm);
        }
        put_weight(&mut b, "classifier.weight".into(), Group::Classifier, &self.classifier.weight);
        b.insert("classifier.bias", Group::Classifier, row(&self.classifier.bias))
            .expect("unique names");
        (b, masks)
    }

    /// Loads a model, inferring factor masks from the nonzero pattern of each factor.
    pub fn from_bundle(config: ModelConfig, bundle: &ParamBundle) -> Result<Self, ModelError> {
        Self::from_bundle_with_masks(config, bundle, None)
    }

    /// Loads a model. Entries listed in `masks` get those masks; factors without an
    /// explicit mask use their nonzero pattern; dense entries without one are unmasked.
    pub fn from_bundle_with_masks(
        config: ModelConfig,
        bundle: &ParamBundle,
        masks: Option<&MaskSet>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let (d, f) = (config.embed_dim, config.ffn_dim);
        let fetch = |name: &str, shape: (usize, usize)| -> Result<DenseMatrix, ModelError> {
            let m = bundle.matrix(name).ok_or_else(|| ModelError::MissingEntry(name.to_string()))?;
            if m.shape() != shape {
                return Err(ModelError::EntryShape {
                    name: name.to_string(),
                    expected: shape,
                    found: m.shape(),
                });
            }
            Ok(m.clone())
        };
        let vector = |name: String, len: usize| -> Result<Vec<f64>, ModelError> {
            Ok(fetch(&name, (1, len))?.into_data())
        };
        let weight = |name: String, rows: usize, cols: usize| -> Result<Weight, ModelError> {
            if bundle.contains(&name) {
                let matrix = fetch(&name, (rows, cols))?;
                let mask = masks.and_then(|m| m.get(&name)).cloned();
                return Ok(Weight::Dense { matrix, mask });
            }
            let a_name = format!("{name}{FACTOR_A_SUFFIX}");
            let b_name = format!("{name}{FACTOR_B_SUFFIX}");
            let a = bundle.matrix(&a_name).ok_or_else(|| ModelError::MissingEntry(name.clone()))?;
            let rank = a.cols();
            let a = fetch(&a_name, (rows, rank))?;
            let b = fetch(&b_name, (cols, rank))?;
            let mask_for = |n: &str, m: &DenseMatrix| {
                masks
                    .and_then(|ms| ms.get(n))
                    .cloned()
                    .unwrap_or_else(|| PruneMask::from_nonzero(m))
            };
            let mask_a = mask_for(&a_name, &a);
            let mask_b = mask_for(&b_name, &b);
            Ok(Weight::Factored(FactoredLayer::new(LowRankPair { a, b }, mask_a, mask_b)))
        };
        let norm = |prefix: &str| -> Result<LayerNorm, ModelError> {
            Ok(LayerNorm {
                gamma: vector(format!("{prefix}.gamma"), d)?,
                beta: vector(format!("{prefix}.beta"), d)?,
            })
        };
        let linear = |prefix: String, inp: usize, out: usize| -> Result<Linear, ModelError> {
            Ok(Linear {
                weight: weight(format!("{prefix}.weight"), inp, out)?,
                bias: vector(format!("{prefix}.bias"), out)?,
            })
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            layers.push(EncoderLayer {
                query: linear(format!("layers.{i}.attn.query"), d, d)?,
                key: linear(format!("layers.{i}.attn.key"), d, d)?,
                value: linear(format!("layers.{i}.attn.value"), d, d)?,
                output: linear(format!("layers.{i}.attn.output"), d, d)?,
                attn_norm: norm(&format!("layers.{i}.attn.ln"))?,
                ffn_inner: linear(format!("layers.{i}.ffn.inner"), d, f)?,
                ffn_outer: linear(format!("layers.{i}.ffn.outer"), f, d)?,
                ffn_norm: norm(&format!("layers.{i}.ffn.ln"))?,
            });
        }
        Ok(Self {
            config,
            token_embedding: weight("embeddings.token".into(), config.vocab_size, d)?,
            position_embedding: weight("embeddings.position".into(), config.max_seq_len, d)?,
            embedding_norm: norm("embeddings.ln")?,
            layers,
            classifier: linear("classifier".into(), d, config.num_classes)?,
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: tokens.len(), max: self.config.max_seq_len });
        }
        if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, t)| **t >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfVocab { token, position, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardTrace, ModelError> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x0 = vec![0.0; n * d];
        let mut pos_row = vec![0.0; d];
        for (i, &t) in tokens.iter().enumerate() {
            let row = &mut x0[i * d..(i + 1) * d];
            self.token_embedding.lookup(t, row);
            self.position_embedding.lookup(i, &mut pos_row);
            row.iter_mut().zip(&pos_row).for_each(|(a, b)| *a += b);
        }
        let (mut x, emb_norm) = self.embedding_norm.forward(&x0, n);
        let embedding_out = DenseMatrix::from_raw(n, d, x.clone());

        let mut layer_caches = Vec::with_capacity(self.layers.len());
        let mut attention = Vec::with_capacity(self.layers.len());
        let mut hidden = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (q, q_mid) = layer.query.forward(&x, n);
            let (k, k_mid) = layer.key.forward(&x, n);
            let (v, v_mid) = layer.value.forward(&x, n);
            let mut probs = Vec::with_capacity(heads);
            let mut context = vec![0.0; n * d];
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; n * n];
                for i in 0..n {
                    let qi = &q[i * d + off..i * d + off + dh];
                    let row = &mut p[i * n..(i + 1) * n];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &k[j * d + off..j * d + off + dh];
                        *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= total);
                    let ctx = &mut context[i * d + off..i * d + off + dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &v[j * d + off..j * d + off + dh];
                        ctx.iter_mut().zip(vj).for_each(|(c, vv)| *c += pij * vv);
                    }
                }
                probs.push(DenseMatrix::from_raw(n, n, p));
            }
            let (o, o_mid) = layer.output.forward(&context, n);
            let r1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let (x1, norm1) = layer.attn_norm.forward(&r1, n);
            let (h_pre, inner_mid) = layer.ffn_inner.forward(&x1, n);
            let g: Vec<f64> = h_pre.iter().map(|&v| gelu(v)).collect();
            let (fo, outer_mid) = layer.ffn_outer.forward(&g, n);
            let r2: Vec<f64> = x1.iter().zip(&fo).map(|(a, b)| a + b).collect();
            let (x2, norm2) = layer.ffn_norm.forward(&r2, n);

            hidden.push(DenseMatrix::from_raw(n, d, x2.clone()));
            attention.push(probs);
            layer_caches.push(LayerCache {
                input: std::mem::replace(&mut x, x2),
                q,
                k,
                v,
                q_mid,
                k_mid,
                v_mid,
                context,
                o_mid,
                norm1,
                x1,
                h_pre,
                inner_mid,
                g,
                outer_mid,
                norm2,
            });
        }

        let mut pooled = vec![0.0; d];
        for row in x.chunks(d) {
            pooled.iter_mut().zip(row).for_each(|(p, v)| *p += v / n as f64);
        }
        let (logits, _) = self.classifier.forward(&pooled, 1);

        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            embedding_out,
            attention,
            hidden,
            logits,
            cache: TraceCache { emb_norm, layers: layer_caches, pooled },
        })
    }

    pub fn forward_batch(&self, batch: &[Vec<usize>]) -> Result<Vec<ForwardTrace>, ModelError> {
        batch.iter().map(|t| self.forward(t)).collect()
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<usize, ModelError> {
        Ok(argmax(&self.forward(tokens)?.logits))
    }

    /// Back-propagates upstream gradients on any subset of trace outputs and
    /// accumulates parameter gradients into `grads`. Masked entries receive zero.
    pub fn backward_into(&self, trace: &ForwardTrace, upstream: &TraceGrads, grads: &mut ModelGrads) {
        let n = trace.tokens.len();
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let cache = &trace.cache;

        let mut dx = vec![0.0; n * d];
        if let Some(dl) = &upstream.logits {
            let dpooled = self.classifier.backward(&mut grads.classifier, &cache.pooled, None, dl, 1);
            for row in dx.chunks_mut(d) {
                row.iter_mut().zip(&dpooled).for_each(|(a, b)| *a += b / n as f64);
            }
        }

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let lc = &cache.layers[l];
            let g = &mut grads.layers[l];
            if let Some(Some(dh_ext)) = upstream.hidden.get(l) {
                dx.iter_mut().zip(dh_ext.data()).for_each(|(a, b)| *a += b);
            }
            // ffn block
            let dr2 = layer.ffn_norm.backward(&mut g.ffn_norm, &lc.norm2, &dx, n);
            let dgelu = layer.ffn_outer.backward(&mut g.ffn_outer, &lc.g, lc.outer_mid.as_deref(), &dr2, n);
            let dh_pre: Vec<f64> = dgelu.iter().zip(&lc.h_pre).map(|(a, &h)| a * gelu_grad(h)).collect();
            let mut dx1 = layer.ffn_inner.backward(&mut g.ffn_inner, &lc.x1, lc.inner_mid.as_deref(), &dh_pre, n);
            dx1.iter_mut().zip(&dr2).for_each(|(a, b)| *a += b);
            // attention block
            let dr1 = layer.attn_norm.backward(&mut g.attn_norm, &lc.norm1, &dx1, n);
            let dcontext = layer.output.backward(&mut g.output, &lc.context, lc.o_mid.as_deref(), &dr1, n);
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut dp = vec![0.0; n];
            for h in 0..heads {
                let off = h * dh;
                let p = trace.attention[l][h].data();
                let ext = upstream
                    .attention
                    .get(l)
                    .and_then(|hs| hs.get(h))
                    .and_then(|m| m.as_ref());
                for i in 0..n {
                    let dci = &dcontext[i * d + off..i * d + off + dh];
                    let prow = &p[i * n..(i + 1) * n];
                    for j in 0..n {
                        let vj = &lc.v[j * d + off..j * d + off + dh];
                        dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(e) = ext {
                            dp[j] += e.get(i, j);
                        }
                        let dvj = &mut dv[j * d + off..j * d + off + dh];
                        dvj.iter_mut().zip(dci).for_each(|(a, b)| *a += prow[j] * b);
                    }
                    let inner: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qi = &lc.q[i * d + off..i * d + off + dh];
                    for j in 0..n {
                        let ds = prow[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &lc.k[j * d + off..j * d + off + dh];
                        let dqi = &mut dq[i * d + off..i * d + off + dh];
                        dqi.iter_mut().zip(kj).for_each(|(a, b)| *a += ds * b);
                        let dkj = &mut dk[j * d + off..j * d + off + dh];
                        dkj.iter_mut().zip(qi).for_each(|(a, b)| *a += ds * b);
                    }
                }
            }
            let mut dinput = dr1;
            for (lin, glin, dy, mid) in [
                (&layer.query, &mut g.query, &dq, lc.q_mid.as_deref()),
                (&layer.key, &mut g.key, &dk, lc.k_mid.as_deref()),
                (&layer.value, &mut g.value, &dv, lc.v_mid.as_deref()),
            ] {
                let part = lin.backward(glin, &lc.input, mid, dy, n);
                dinput.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
            }
            dx = dinput;
        }

        if let Some(de) = &upstream.embedding {
            dx.iter_mut().zip(de.data()).for_each(|(a, b)| *a += b);
        }
        let dx0 = self.embedding_norm.backward(&mut grads.embedding_norm, &cache.emb_norm, &dx, n);
        for (i, &t) in trace.tokens.iter().enumerate() {
            let row = &dx0[i * d..(i + 1) * d];
            self.token_embedding.lookup_backward(&mut grads.token_embedding, t, row);
            self.position_embedding.lookup_backward(&mut grads.position_embedding, i, row);
        }
        grads.apply_masks();
    }

    /// Gradients for one trace, as a fresh model-shaped buffer.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &TraceGrads) -> ModelGrads {
        let mut grads = self.zeros_like();
        self.backward_into(trace, upstream, &mut grads);
        grads
    }
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    q_mid: Option<Vec<f64>>,
    k_mid: Option<Vec<f64>>,
    v_mid: Option<Vec<f64>>,
    context: Vec<f64>,
    o_mid: Option<Vec<f64>>,
    norm1: NormCache,
    x1: Vec<f64>,
    h_pre: Vec<f64>,
    inner_mid: Option<Vec<f64>>,
    g: Vec<f64>,
    outer_mid: Option<Vec<f64>>,
    norm2: NormCache,
}

#[derive(Debug, Clone)]
struct TraceCache {
    emb_norm: NormCache,
    layers: Vec<LayerCache>,
    pooled: Vec<f64>,
}

/// Outputs of one forward pass at every distillation level, plus the
/// intermediates needed to back-propagate through it.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    /// n×d embedding-layer output.
    pub embedding_out: DenseMatrix,
    /// `[layer][head]` row-stochastic n×n attention maps.
    pub attention: Vec<Vec<DenseMatrix>>,
    /// `[layer]` n×d block outputs.
    pub hidden: Vec<DenseMatrix>,
    pub logits: Vec<f64>,
    cache: TraceCache,
}

/// Upstream loss gradients for the trace outputs; `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct TraceGrads {
    pub embedding: Option<DenseMatrix>,
    pub attention: Vec<Vec<Option<DenseMatrix>>>,
    pub hidden: Vec<Option<DenseMatrix>>,
    pub logits: Option<Vec<f64>>,
}

impl TraceGrads {
    pub fn logits_only(d_logits: Vec<f64>) -> Self {
        Self { logits: Some(d_logits), ..Self::default() }
    }
}

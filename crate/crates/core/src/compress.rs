//! Applying one set of stage fractions to a model or a raw parameter bundle.

use thiserror::Error;

use crate::budget::{treatment, BundleLayout, EntryTreatment, LayoutEntry, StageFractions};
use crate::factorize::{factorize_with_rank, FactorizeError};
use crate::hybrid::{compress_layer_with_rank, FactoredLayer};
use crate::model::{Model, Weight, FACTOR_A_SUFFIX, FACTOR_B_SUFFIX};
use crate::prune::{apply_mask, magnitude_mask, MaskSet, PruneError, PruneMask};
use crate::tensor::{DenseMatrix, Group, ParamBundle, TensorError};

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("{name}: {source}")]
    Factorize {
        name: String,
        #[source]
        source: FactorizeError,
    },
    #[error("{name}: {source}")]
    Prune {
        name: String,
        #[source]
        source: PruneError,
    },
    #[error("fraction {name} = {value} outside (0, 1]")]
    Fraction { name: &'static str, value: f64 },
    #[error("mask entry {0:?}: values must be exactly 0 or 1")]
    MaskValues(String),
    #[error("mask for {name:?} has shape {mask:?}, entry has {entry:?}")]
    MaskShape {
        name: String,
        mask: (usize, usize),
        entry: (usize, usize),
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn check(fractions: StageFractions) -> Result<(), CompressError> {
    for (name, value) in [
        ("p_embd", fractions.p_embd),
        ("p_svd", fractions.p_svd),
        ("p_weight", fractions.p_weight),
    ] {
        if !(value.is_finite() && value > 0.0 && value <= 1.0) {
            return Err(CompressError::Fraction { name, value });
        }
    }
    Ok(())
}

/// Re-compresses one weight from its current effective value. Kept entries are
/// returned unchanged, including any earlier factorization or mask.
pub fn compress_weight(
    name: &str,
    group: Group,
    weight: &Weight,
    fractions: StageFractions,
) -> Result<Weight, CompressError> {
    let (rows, cols) = weight.shape();
    let entry = LayoutEntry { name: name.to_string(), group, rows, cols };
    let factor_err = |source| CompressError::Factorize { name: name.to_string(), source };
    Ok(match treatment(&entry, fractions) {
        EntryTreatment::Keep => weight.clone(),
        EntryTreatment::Factor(r) => {
            let pair = factorize_with_rank(&weight.effective(), r).map_err(factor_err)?;
            Weight::Factored(FactoredLayer::dense(pair))
        }
        EntryTreatment::Prune => {
            let w = weight.effective();
            let mask = magnitude_mask(&w, fractions.p_weight)
                .map_err(|source| CompressError::Prune { name: name.to_string(), source })?;
            let matrix = apply_mask(&w, &mask).expect("mask built from matrix");
            Weight::Dense { matrix, mask: Some(mask) }
        }
        EntryTreatment::Hybrid(r) => {
            Weight::Factored(compress_layer_with_rank(&weight.effective(), r, fractions.p_weight).map_err(factor_err)?)
        }
    })
}

/// Applies `fractions` to every weight matrix of `model`. Vectors and the
/// classifier are copied unchanged.
pub fn compress_model(model: &Model, fractions: StageFractions) -> Result<Model, CompressError> {
    check(fractions)?;
    let mut out = model.clone();
    out.token_embedding = compress_weight("embeddings.token", Group::Embedding, &model.token_embedding, fractions)?;
    out.position_embedding =
        compress_weight("embeddings.position", Group::Embedding, &model.position_embedding, fractions)?;
    for (i, (src, dst)) in model.layers.iter().zip(out.layers.iter_mut()).enumerate() {
        for (part, s, d) in [
            ("attn.query", &src.query, &mut dst.query),
            ("attn.key", &src.key, &mut dst.key),
            ("attn.value", &src.value, &mut dst.value),
            ("attn.output", &src.output, &mut dst.output),
            ("ffn.inner", &src.ffn_inner, &mut dst.ffn_inner),
            ("ffn.outer", &src.ffn_outer, &mut dst.ffn_outer),
        ] {
            d.weight = compress_weight(&format!("layers.{i}.{part}.weight"), Group::Encoder, &s.weight, fractions)?;
        }
    }
    Ok(out)
}

/// A compressed bundle and the masks of its pruned entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBundle {
    pub bundle: ParamBundle,
    pub masks: MaskSet,
}

impl CompressedBundle {
    /// Kept parameters: mask ones for masked entries, every value otherwise.
    pub fn retained_params(&self) -> usize {
        self.bundle
            .iter()
            .map(|(name, e)| self.masks.get(name).map_or(e.matrix.len(), PruneMask::ones_count))
            .sum()
    }
}

/// Compresses every dense entry of an arbitrary bundle. Factored entries are
/// written as `name::a` / `name::b`; pruned entries keep their name and get a mask.
pub fn compress_bundle(
    bundle: &ParamBundle,
    masks: &MaskSet,
    fractions: StageFractions,
) -> Result<CompressedBundle, CompressError> {
    check(fractions)?;
    let mut out = CompressedBundle { bundle: ParamBundle::new(), masks: MaskSet::new() };
    for (name, entry) in bundle.iter() {
        let current = Weight::Dense { matrix: entry.matrix.clone(), mask: masks.get(name).cloned() };
        match compress_weight(name, entry.group, &current, fractions)? {
            Weight::Dense { matrix, mask } => {
                if let Some(m) = mask {
                    out.masks.insert(name.to_string(), m);
                }
                out.bundle.insert(name, entry.group, matrix)?;
            }
            Weight::Factored(f) => {
                let a = format!("{name}{FACTOR_A_SUFFIX}");
                let b = format!("{name}{FACTOR_B_SUFFIX}");
                out.bundle.insert(a.clone(), entry.group, f.pair.a)?;
                out.bundle.insert(b.clone(), entry.group, f.pair.b)?;
                out.masks.insert(a, f.mask_a);
                out.masks.insert(b, f.mask_b);
            }
        }
    }
    Ok(out)
}

/// Masks as a bundle of 0/1 matrices, grouped like the entries they cover.
pub fn masks_to_bundle(masks: &MaskSet, bundle: &ParamBundle) -> Result<ParamBundle, CompressError> {
    let mut out = ParamBundle::new();
    for (name, mask) in masks {
        let group = bundle.get(name).map_or(Group::Encoder, |e| e.group);
        let (rows, cols) = mask.shape();
        let data = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        out.insert(name.clone(), group, DenseMatrix::new(rows, cols, data)?)?;
    }
    Ok(out)
}

/// Inverse of [`masks_to_bundle`], checking shapes against `bundle`.
pub fn masks_from_bundle(mask_bundle: &ParamBundle, bundle: &ParamBundle) -> Result<MaskSet, CompressError> {
    let mut out = MaskSet::new();
    for (name, e) in mask_bundle.iter() {
        if let Some(target) = bundle.matrix(name) {
            if target.shape() != e.matrix.shape() {
                return Err(CompressError::MaskShape {
                    name: name.to_string(),
                    mask: e.matrix.shape(),
                    entry: target.shape(),
                });
            }
        }
        let mut bits = Vec::with_capacity(e.matrix.len());
        for &v in e.matrix.data() {
            if v != 0.0 && v != 1.0 {
                return Err(CompressError::MaskValues(name.to_string()));
            }
            bits.push(v == 1.0);
        }
        out.insert(name.to_string(), PruneMask::new(e.matrix.rows(), e.matrix.cols(), bits));
    }
    Ok(out)
}

/// Retained fraction of a model relative to its dense layout.
pub fn retained_fraction(model: &Model) -> f64 {
    model.retained_params() as f64 / model.dense_param_count() as f64
}

/// Retained fraction of a compressed bundle relative to a dense layout.
pub fn bundle_retained_fraction(compressed: &CompressedBundle, dense: &BundleLayout) -> f64 {
    compressed.retained_params() as f64 / dense.counts().total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::{simulate, solve_budget};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn identity_fractions_change_nothing() {
        let m = model();
        assert_eq!(compress_model(&m, StageFractions::IDENTITY).unwrap(), m);
    }

    #[test]
    fn model_accounting_matches_simulation() {
        let m = model();
        let layout = m.config.layout();
        let plan = solve_budget(&layout, 0.4, 0.5, 0.6).unwrap();
        let c = compress_model(&m, plan.fractions()).unwrap();
        let predicted: usize = simulate(&layout, plan.fractions()).unwrap().iter().map(|a| a.retained).sum();
        assert_eq!(c.retained_params(), predicted);
        assert!((retained_fraction(&c) - 0.4).abs() / 0.4 < 0.01);
        assert_eq!(c.classifier, m.classifier);
        assert!(matches!(c.token_embedding, Weight::Factored(_)));
        assert!(matches!(c.layers[0].ffn_inner.weight, Weight::Factored(_)));
    }

    #[test]
    fn svd_fraction_one_prunes_in_place() {
        let m = model();
        let f = StageFractions { p_embd: 1.0, p_svd: 1.0, p_weight: 0.5 };
        let c = compress_model(&m, f).unwrap();
        match &c.layers[1].key.weight {
            Weight::Dense { matrix, mask: Some(mask) } => {
                assert_eq!(mask.ones_count(), 512);
                assert_eq!(matrix.count_nonzero(), 512);
            }
            other => panic!("expected pruned dense weight, got {other:?}"),
        }
        assert_eq!(c.token_embedding, m.token_embedding);
    }

    #[test]
    fn bundle_compression_and_mask_round_trip() {
        let m = model();
        let bundle = m.to_bundle();
        let f = StageFractions { p_embd: 0.5, p_svd: 0.5, p_weight: 0.5 };
        let c = compress_bundle(&bundle, &MaskSet::new(), f).unwrap();
        assert_eq!(c.bundle, compress_model(&m, f).unwrap().to_bundle());
        let stored = masks_to_bundle(&c.masks, &c.bundle).unwrap();
        assert_eq!(masks_from_bundle(&stored, &c.bundle).unwrap(), c.masks);
        let loaded = Model::from_bundle_with_masks(m.config, &c.bundle, Some(&c.masks)).unwrap();
        assert_eq!(loaded.retained_params(), c.retained_params());

        let bad = ParamBundle::new().with("x", Group::Encoder, DenseMatrix::from_rows(&[&[0.5]]));
        assert!(matches!(masks_from_bundle(&bad, &bundle), Err(CompressError::MaskValues(_))));
    }

    #[test]
    fn invalid_fractions() {
        let f = StageFractions { p_embd: 0.0, p_svd: 1.0, p_weight: 1.0 };
        assert!(matches!(compress_model(&model(), f), Err(CompressError::Fraction { name: "p_embd", .. })));
    }
}

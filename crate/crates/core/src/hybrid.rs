//! Hybrid compression: magnitude pruning applied to the SVD factors.

use crate::factorize::{
    check_fraction, factor_ratio, factorize_layer, factorize_with_rank, FactorizeError,
    LowRankPair,
};
use crate::prune::{apply_mask, magnitude_mask, PruneMask};
use crate::tensor::DenseMatrix;

/// `W_hybrid = (M_A ⊙ A)(M_B ⊙ B)ᵀ`. The stored factors already have masked entries zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredLayer {
    pub pair: LowRankPair,
    pub mask_a: PruneMask,
    pub mask_b: PruneMask,
}

impl FactoredLayer {
    /// Wraps a pair with masks, zeroing the masked entries of the factors.
    pub fn new(pair: LowRankPair, mask_a: PruneMask, mask_b: PruneMask) -> Self {
        assert_eq!(pair.a.shape(), mask_a.shape());
        assert_eq!(pair.b.shape(), mask_b.shape());
        let pair = LowRankPair {
            a: apply_mask(&pair.a, &mask_a).expect("shape checked"),
            b: apply_mask(&pair.b, &mask_b).expect("shape checked"),
        };
        Self { pair, mask_a, mask_b }
    }

    pub fn dense(pair: LowRankPair) -> Self {
        let (ra, ca) = pair.a.shape();
        let (rb, cb) = pair.b.shape();
        Self::new(pair, PruneMask::ones(ra, ca), PruneMask::ones(rb, cb))
    }

    pub fn rank(&self) -> usize {
        self.pair.rank()
    }

    pub fn original_shape(&self) -> (usize, usize) {
        self.pair.original_shape()
    }

    pub fn retained_count(&self) -> usize {
        self.mask_a.ones_count() + self.mask_b.ones_count()
    }

    pub fn effective_weight(&self) -> DenseMatrix {
        effective_weight(self)
    }
}

pub fn effective_weight(layer: &FactoredLayer) -> DenseMatrix {
    let a = apply_mask(&layer.pair.a, &layer.mask_a).expect("mask matches factor");
    let b = apply_mask(&layer.pair.b, &layer.mask_b).expect("mask matches factor");
    a.matmul_nt(&b).expect("factor ranks agree")
}

fn prune_pair(pair: LowRankPair, p_weight: f64) -> Result<FactoredLayer, FactorizeError> {
    check_fraction(p_weight)?;
    let mask_a = magnitude_mask(&pair.a, p_weight).expect("fraction checked");
    let mask_b = magnitude_mask(&pair.b, p_weight).expect("fraction checked");
    Ok(FactoredLayer::new(pair, mask_a, mask_b))
}

pub fn compress_layer(
    w: &DenseMatrix,
    p_svd: f64,
    p_weight: f64,
) -> Result<FactoredLayer, FactorizeError> {
    check_fraction(p_weight)?;
    prune_pair(factorize_layer(w, p_svd)?, p_weight)
}

/// Same as [`compress_layer`] at an explicit rank.
pub fn compress_layer_with_rank(
    w: &DenseMatrix,
    rank: usize,
    p_weight: f64,
) -> Result<FactoredLayer, FactorizeError> {
    check_fraction(p_weight)?;
    prune_pair(factorize_with_rank(w, rank)?, p_weight)
}

/// `((m+n)·r / (m·n)) · p_weight`.
pub fn hybrid_ratio(rows: usize, cols: usize, rank: usize, p_weight: f64) -> Result<f64, FactorizeError> {
    check_fraction(p_weight)?;
    Ok(factor_ratio(rows, cols, rank)? * p_weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorize::rank_for_ratio;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn full_fractions_reproduce_input() {
        let w = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, -4.0]]);
        let layer = compress_layer_with_rank(&w, 2, 1.0).unwrap();
        assert!(layer.effective_weight().sub(&w).unwrap().frobenius_norm() < 1e-8);
        let w = random(4, 4, 3);
        let layer = compress_layer_with_rank(&w, 4, 1.0).unwrap();
        assert!(layer.effective_weight().sub(&w).unwrap().frobenius_norm() < 1e-8);
    }

    #[test]
    fn diagonal_factorization_only() {
        let w = DenseMatrix::from_diag(&[3.0, 2.0, 1.0]);
        let layer = compress_layer_with_rank(&w, 1, 1.0).unwrap();
        let expected = DenseMatrix::from_diag(&[3.0, 0.0, 0.0]);
        assert!(layer.effective_weight().sub(&expected).unwrap().frobenius_norm() < 1e-12);

        let annihilated = FactoredLayer::new(
            layer.pair.clone(),
            PruneMask::zeros(3, 1),
            layer.mask_b.clone(),
        );
        assert_eq!(annihilated.effective_weight(), DenseMatrix::zeros(3, 3));
    }

    #[test]
    fn retained_count_by_construction() {
        let w = random(8, 8, 11);
        assert_eq!(rank_for_ratio(8, 8, 0.5).unwrap(), 2);
        let layer = compress_layer(&w, 0.5, 0.5).unwrap();
        assert_eq!(layer.rank(), 2);
        assert_eq!(layer.mask_a.ones_count(), 8);
        assert_eq!(layer.mask_b.ones_count(), 8);
        assert_eq!(layer.retained_count(), 16);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(hybrid_ratio(4, 4, 2, 0.5).unwrap(), 0.5);
        assert_eq!(hybrid_ratio(768, 768, 192, 1.0).unwrap(), factor_ratio(768, 768, 192).unwrap());
        let r = hybrid_ratio(768, 768, 192, 1.0 / 1.56).unwrap();
        assert_eq!((r * 1e4).round() / 1e4, 0.3205);
        assert!(hybrid_ratio(4, 4, 2, 0.0).is_err());
        assert!(hybrid_ratio(4, 4, 5, 0.5).is_err());
    }

    #[test]
    fn mask_edge_cases() {
        let w = random(5, 4, 2);
        let layer = compress_layer(&w, 1.0, 1.0).unwrap();
        assert_eq!(layer.effective_weight(), layer.pair.reconstruct());
        let zeroed = FactoredLayer::new(
            layer.pair.clone(),
            PruneMask::zeros(5, layer.rank()),
            PruneMask::zeros(4, layer.rank()),
        );
        assert_eq!(zeroed.effective_weight(), DenseMatrix::zeros(5, 4));
    }
}

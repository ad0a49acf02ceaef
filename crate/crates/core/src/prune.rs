//! Unstructured magnitude pruning.

use thiserror::Error;

use crate::tensor::DenseMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("retained fraction {0} outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("mask shape {mask:?} does not match matrix shape {matrix:?}")]
    ShapeMismatch {
        mask: (usize, usize),
        matrix: (usize, usize),
    },
}

/// Explicit pruning masks keyed by bundle entry name.
pub type MaskSet = indexmap::IndexMap<String, PruneMask>;

/// Binary keep-mask over a matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl PruneMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), rows * cols, "mask length must equal rows*cols");
        Self { rows, cols, bits }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![true; rows * cols])
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![false; rows * cols])
    }

    /// Keeps exactly the nonzero entries of `w`.
    pub fn from_nonzero(w: &DenseMatrix) -> Self {
        Self::new(w.rows(), w.cols(), w.data().iter().map(|v| *v != 0.0).collect())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn ones_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn sparsity(&self) -> f64 {
        sparsity(self)
    }

    /// Zeroes `values` wherever the mask is 0. `values` is row-major with the mask's shape.
    pub fn zero_masked(&self, values: &mut [f64]) {
        debug_assert_eq!(values.len(), self.bits.len());
        for (v, keep) in values.iter_mut().zip(&self.bits) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

/// Number of retained entries, `round(p·N)` with halves rounded up.
pub fn retained_count(total: usize, p_weight: f64) -> usize {
    ((p_weight * total as f64) + 0.5).floor() as usize
}

/// Keeps the `round(p·N)` largest-magnitude entries; ties favour the earlier row-major index.
pub fn magnitude_mask(w: &DenseMatrix, p_weight: f64) -> Result<PruneMask, PruneError> {
    if !(p_weight.is_finite() && p_weight > 0.0 && p_weight <= 1.0) {
        return Err(PruneError::FractionOutOfRange(p_weight));
    }
    let keep = retained_count(w.len(), p_weight).min(w.len());
    let mut order: Vec<usize> = (0..w.len()).collect();
    let data = w.data();
    order.sort_by(|&i, &j| data[j].abs().total_cmp(&data[i].abs()).then(i.cmp(&j)));
    let mut bits = vec![false; w.len()];
    for &i in &order[..keep] {
        bits[i] = true;
    }
    Ok(PruneMask::new(w.rows(), w.cols(), bits))
}

pub fn apply_mask(w: &DenseMatrix, mask: &PruneMask) -> Result<DenseMatrix, PruneError> {
    if w.shape() != mask.shape() {
        return Err(PruneError::ShapeMismatch {
            mask: mask.shape(),
            matrix: w.shape(),
        });
    }
    let mut data = w.data().to_vec();
    mask.zero_masked(&mut data);
    Ok(DenseMatrix::from_raw(w.rows(), w.cols(), data))
}

pub fn sparsity(mask: &PruneMask) -> f64 {
    if mask.bits.is_empty() {
        return 0.0;
    }
    mask.ones_count() as f64 / mask.bits.len() as f64
}

//! Low-rank factorization `W ≈ A·Bᵀ` with the rank derived from a retained fraction.

use thiserror::Error;

use crate::svd::{svd, SvdError};
use crate::tensor::DenseMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorizeError {
    #[error("retained fraction {0} outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("rank {rank} out of range 1..={max} for a {rows}x{cols} matrix")]
    RankOutOfRange {
        rank: usize,
        rows: usize,
        cols: usize,
        max: usize,
    },
    #[error(transparent)]
    Svd(#[from] SvdError),
}

pub(crate) fn check_fraction(p: f64) -> Result<(), FactorizeError> {
    if p.is_finite() && p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(FactorizeError::FractionOutOfRange(p))
    }
}

/// `r = max(1, floor(mn/(m+n) · p_svd))`, clamped to `min(m, n)`.
pub fn rank_for_ratio(rows: usize, cols: usize, p_svd: f64) -> Result<usize, FactorizeError> {
    check_fraction(p_svd)?;
    assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
    let (m, n) = (rows as f64, cols as f64);
    let exact = m * n * p_svd / (m + n);
    // absorb representation error so that e.g. 0.7 * k lands on k when exact
    let rank = (exact * (1.0 + 1e-12)).floor() as usize;
    Ok(rank.max(1).min(rows.min(cols)))
}

/// Storage fraction `(m+n)·r / (m·n)` of a rank-`r` factorization.
pub fn factor_ratio(rows: usize, cols: usize, rank: usize) -> Result<f64, FactorizeError> {
    check_rank(rows, cols, rank)?;
    Ok(((rows + cols) * rank) as f64 / (rows * cols) as f64)
}

fn check_rank(rows: usize, cols: usize, rank: usize) -> Result<(), FactorizeError> {
    let max = rows.min(cols);
    if rank == 0 || rank > max {
        return Err(FactorizeError::RankOutOfRange { rank, rows, cols, max });
    }
    Ok(())
}

/// Factors `A` (m×r) and `B` (n×r) with `W ≈ A·Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPair {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

impl LowRankPair {
    pub fn new(a: DenseMatrix, b: DenseMatrix) -> Result<Self, FactorizeError> {
        if a.cols() != b.cols() {
            return Err(FactorizeError::RankOutOfRange {
                rank: b.cols(),
                rows: a.rows(),
                cols: b.rows(),
                max: a.cols(),
            });
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn original_shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.rows())
    }

    pub fn stored_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        reconstruct(self)
    }
}

pub fn reconstruct(pair: &LowRankPair) -> DenseMatrix {
    pair.a.matmul_nt(&pair.b).expect("factor ranks agree")
}

/// Balanced split `A = U_r·sqrt(Σ_r)`, `B = V_r·sqrt(Σ_r)` at an explicit rank.
pub fn factorize_with_rank(w: &DenseMatrix, rank: usize) -> Result<LowRankPair, FactorizeError> {
    check_rank(w.rows(), w.cols(), rank)?;
    let s = svd(w)?.truncate(rank)?;
    let roots: Vec<f64> = s.singular_values.iter().map(|v| v.sqrt()).collect();
    Ok(LowRankPair {
        a: s.u.scale_columns(&roots),
        b: s.v.scale_columns(&roots),
    })
}

pub fn factorize_layer(w: &DenseMatrix, p_svd: f64) -> Result<LowRankPair, FactorizeError> {
    let rank = rank_for_ratio(w.rows(), w.cols(), p_svd)?;
    factorize_with_rank(w, rank)
}

/// Non-fatal note about a factorization that stores more than the dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionWarning {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub ratio: f64,
}

impl std::fmt::Display for ExpansionWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "rank-{} factorization of a {}x{} matrix stores {:.4} of the dense size",
            self.rank, self.rows, self.cols, self.ratio
        )
    }
}

/// `Some` when the factorization expands storage (`factor_ratio > 1`).
pub fn expansion_warning(rows: usize, cols: usize, rank: usize) -> Option<ExpansionWarning> {
    let ratio = factor_ratio(rows, cols, rank).ok()?;
    (ratio > 1.0).then_some(ExpansionWarning { rows, cols, rank, ratio })
}

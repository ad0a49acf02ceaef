//! Singular value decomposition by one-sided (Hestenes) Jacobi rotations.

use thiserror::Error;

use crate::tensor::DenseMatrix;

/// Sweep cap before reporting non-convergence.
pub const MAX_SWEEPS: usize = 60;
/// Converged when every column pair has |aᵢ·aⱼ| / (‖aᵢ‖‖aⱼ‖) below this.
pub const COHERENCE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SvdError {
    #[error("Jacobi SVD did not converge after {sweeps} sweeps (max coherence {max_coherence:.3e}, off-diagonal mass {off_diagonal:.3e})")]
    NoConvergence {
        sweeps: usize,
        max_coherence: f64,
        off_diagonal: f64,
    },
    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
}

/// `W = U · diag(σ) · Vᵀ` with `U` m×p, `V` n×p, `p = min(m, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdResult {
    pub fn rank_capacity(&self) -> usize {
        self.singular_values.len()
    }

    /// `U · diag(σ) · Vᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        self.u
            .scale_columns(&self.singular_values)
            .matmul_nt(&self.v)
            .expect("SVD factors have conforming shapes")
    }

    /// Keeps the leading `rank` singular triples.
    pub fn truncate(&self, rank: usize) -> Result<SvdResult, SvdError> {
        self.check_rank(rank)?;
        Ok(SvdResult {
            u: self.u.leading_columns(rank),
            singular_values: self.singular_values[..rank].to_vec(),
            v: self.v.leading_columns(rank),
        })
    }

    /// Frobenius error of the best rank-`rank` approximation: `sqrt(Σ_{i>r} σᵢ²)`.
    pub fn truncation_error(&self, rank: usize) -> Result<f64, SvdError> {
        self.check_rank(rank)?;
        Ok(self.singular_values[rank..]
            .iter()
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt())
    }

    fn check_rank(&self, rank: usize) -> Result<(), SvdError> {
        let max = self.rank_capacity();
        if rank == 0 || rank > max {
            return Err(SvdError::RankOutOfRange { rank, max });
        }
        Ok(())
    }
}

pub fn truncate(s: &SvdResult, rank: usize) -> Result<SvdResult, SvdError> {
    s.truncate(rank)
}

pub fn truncation_error(s: &SvdResult, rank: usize) -> Result<f64, SvdError> {
    s.truncation_error(rank)
}

pub fn svd(w: &DenseMatrix) -> Result<SvdResult, SvdError> {
    if w.rows() >= w.cols() {
        jacobi_tall(w)
    } else {
        let t = jacobi_tall(&w.transpose())?;
        Ok(SvdResult {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let (a, b) = (*xi, *yi);
        *xi = c * a - s * b;
        *yi = s * a + c * b;
    }
}

fn pair_mut(cols: &mut [Vec<f64>], i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(i < j);
    let (lo, hi) = cols.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

/// One-sided Jacobi on an m×n input with m ≥ n.
fn jacobi_tall(w: &DenseMatrix) -> Result<SvdResult, SvdError> {
    let (m, n) = w.shape();
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| w.get(i, j)).collect())
        .collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    // columns at rounding-noise level are treated as exact zeros
    let negligible = {
        let scale = norms.iter().sum::<f64>().sqrt() * f64::EPSILON * m as f64;
        scale * scale
    };

    let mut converged = n < 2;
    let mut max_coherence = 0.0;
    let mut off_diagonal = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        max_coherence = 0.0f64;
        off_diagonal = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                let coherence = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                off_diagonal += gamma * gamma;
                max_coherence = max_coherence.max(coherence);
                if coherence < COHERENCE_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (x, y) = pair_mut(&mut cols, p, q);
                rotate(x, y, c, s);
                let (x, y) = pair_mut(&mut vcols, p, q);
                rotate(x, y, c, s);
                norms[p] = dot(&cols[p], &cols[p]);
                norms[q] = dot(&cols[q], &cols[q]);
            }
        }
        converged = max_coherence < COHERENCE_TOLERANCE;
    }
    if !converged {
        return Err(SvdError::NoConvergence {
            sweeps: MAX_SWEEPS,
            max_coherence,
            off_diagonal: off_diagonal.sqrt(),
        });
    }

    let sigmas: Vec<f64> = norms
        .iter()
        .map(|&v| if v <= negligible { 0.0 } else { v.sqrt() })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigmas[b].total_cmp(&sigmas[a]));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut zero_slots = Vec::new();
    for &j in &order {
        let sigma = sigmas[j];
        if sigma > 0.0 {
            u_cols.push(cols[j].iter().map(|v| v / sigma).collect());
        } else {
            zero_slots.push(u_cols.len());
            u_cols.push(vec![0.0; m]);
        }
        v_cols.push(vcols[j].clone());
        singular_values.push(sigma);
    }
    for slot in zero_slots {
        u_cols[slot] = orthonormal_complement(&u_cols, slot, m);
    }

    for (u, v) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let lead = u
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, x)| if x.abs() > best.1 { (i, x.abs()) } else { best })
            .0;
        if u[lead] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }

    Ok(SvdResult {
        u: columns_to_matrix(&u_cols, m),
        singular_values,
        v: columns_to_matrix(&v_cols, n),
    })
}

/// A unit vector orthogonal to every other nonzero column, for zero singular values.
fn orthonormal_complement(cols: &[Vec<f64>], slot: usize, m: usize) -> Vec<f64> {
    let others: Vec<&Vec<f64>> = cols
        .iter()
        .enumerate()
        .filter(|(i, c)| *i != slot && c.iter().any(|x| *x != 0.0))
        .map(|(_, c)| c)
        .collect();
    let mut best = vec![0.0; m];
    let mut best_norm = -1.0;
    for k in 0..m {
        let mut e = vec![0.0; m];
        e[k] = 1.0;
        for _ in 0..2 {
            for c in &others {
                let proj = dot(&e, c);
                e.iter_mut().zip(c.iter()).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = dot(&e, &e).sqrt();
        if norm > best_norm + 1e-12 {
            best_norm = norm;
            best = e.iter().map(|x| x / norm).collect();
        }
        if best_norm > 0.5 {
            break;
        }
    }
    best
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> DenseMatrix {
    let p = cols.len();
    let mut data = vec![0.0; rows * p];
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            data[i * p + j] = x;
        }
    }
    DenseMatrix::from_raw(rows, p, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_values(actual: &[f64], expected: &[f64]) {
        assert_eq!(actual.len(), expected.len());
        for (a, e) in actual.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{actual:?} vs {expected:?}");
        }
    }

    fn orthonormality_error(q: &DenseMatrix) -> f64 {
        q.matmul_tn(q)
            .unwrap()
            .sub(&DenseMatrix::identity(q.cols()))
            .unwrap()
            .frobenius_norm()
    }

    #[test]
    fn identity_and_diagonal() {
        assert_values(&svd(&DenseMatrix::identity(3)).unwrap().singular_values, &[1.0, 1.0, 1.0]);
        let d = DenseMatrix::from_diag(&[3.0, 2.0, 1.0]);
        assert_values(&svd(&d).unwrap().singular_values, &[3.0, 2.0, 1.0]);
        let shuffled = DenseMatrix::from_diag(&[1.0, 3.0, 2.0]);
        assert_values(&svd(&shuffled).unwrap().singular_values, &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn nilpotent_two_by_two() {
        let w = DenseMatrix::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]);
        let s = svd(&w).unwrap();
        assert_values(&s.singular_values, &[2.0, 0.0]);
        assert!(orthonormality_error(&s.u) < 1e-12);
        assert!(orthonormality_error(&s.v) < 1e-12);
        assert!(s.reconstruct().sub(&w).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn zero_matrix_has_orthonormal_factors() {
        let s = svd(&DenseMatrix::zeros(4, 3)).unwrap();
        assert_values(&s.singular_values, &[0.0, 0.0, 0.0]);
        assert!(orthonormality_error(&s.u) < 1e-12);
        assert!(orthonormality_error(&s.v) < 1e-12);
    }

    #[test]
    fn wide_input_swaps_factors() {
        let w = DenseMatrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let s = svd(&w).unwrap();
        assert_eq!(s.u.shape(), (2, 2));
        assert_eq!(s.v.shape(), (3, 2));
        assert!(s.reconstruct().sub(&w).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn truncation_examples() {
        let s = svd(&DenseMatrix::from_diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(s.truncate(3).unwrap(), s);
        assert_values(&s.truncate(1).unwrap().singular_values, &[3.0]);
        assert_eq!(
            s.truncate(0).unwrap_err(),
            SvdError::RankOutOfRange { rank: 0, max: 3 }
        );
        assert!(s.truncation_error(3).unwrap().abs() < 1e-15);
        assert!((s.truncation_error(1).unwrap() - 5f64.sqrt()).abs() < 1e-12);
        assert!((s.truncation_error(2).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(s.truncation_error(4), Err(SvdError::RankOutOfRange { .. })));
    }

    #[test]
    fn sign_convention_is_applied() {
        let w = DenseMatrix::from_rows(&[&[-2.0, 0.0], &[0.0, -1.0], &[0.0, 0.0]]);
        let s = svd(&w).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..3).map(|i| s.u.get(i, j)).collect();
            let lead = col.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(lead > 0.0);
        }
        assert!(s.reconstruct().sub(&w).unwrap().frobenius_norm() < 1e-12);
    }
}

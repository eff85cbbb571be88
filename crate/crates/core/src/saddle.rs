//! Exact solver for saddle-point systems
//!
//! ```text
//! [ A  Bᵀ ] [x]   [0]
//! [ B  0  ] [μ] = [e]
//! ```
//!
//! with `A` symmetric positive definite and sparse, and constraint rows `B`
//! that are dense over disjoint contiguous index ranges.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use thiserror::Error;

use crate::sparse::SparseOperator;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SaddleError {
    #[error("energy matrix is not positive definite on the region")]
    EnergyNotDefinite,
    #[error("constraint rows are linearly dependent (Schur complement singular)")]
    SingularConstraints,
    #[error("sparse LU factorization of the saddle-point matrix failed")]
    SingularSystem,
}

/// Factorization strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SaddleMethod {
    /// Sparse Cholesky of `A`, then the dense Schur complement `B A⁻¹ Bᵀ`.
    #[default]
    SchurCholesky,
    /// Sparse LU with pivoting on the full indefinite matrix.
    SparseLu,
}

/// One constraint row, nonzero only on `offset..offset + values.len()`.
#[derive(Debug, Clone, Copy)]
pub struct ConstraintRow<'a> {
    pub offset: usize,
    pub values: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct SaddleSolution {
    /// One primal vector per requested right-hand side.
    pub primal: Vec<Vec<f64>>,
    /// Matching Lagrange multipliers.
    pub multipliers: Vec<Vec<f64>>,
}

/// Solves for every right-hand side `e_t`, `t` in `targets` (constraint indices).
pub fn solve_unit_constraints(
    energy: &SparseOperator,
    rows: &[ConstraintRow<'_>],
    targets: &[usize],
    method: SaddleMethod,
) -> Result<SaddleSolution, SaddleError> {
    match method {
        SaddleMethod::SchurCholesky => schur_cholesky(energy, rows, targets),
        SaddleMethod::SparseLu => sparse_lu(energy, rows, targets),
    }
}

fn schur_cholesky(energy: &SparseOperator, rows: &[ConstraintRow<'_>], targets: &[usize]) -> Result<SaddleSolution, SaddleError> {
    let n = energy.dim();
    let k = rows.len();
    let llt = energy
        .to_faer_lower()
        .sp_cholesky(Side::Lower)
        .map_err(|_| SaddleError::EnergyNotDefinite)?;
    // Y = A⁻¹ Bᵀ
    let mut y = Mat::<f64>::zeros(n, k);
    for (c, row) in rows.iter().enumerate() {
        let mut col = y.col_mut(c);
        for (i, &v) in row.values.iter().enumerate() {
            col[row.offset + i] = v;
        }
    }
    llt.solve_in_place(y.as_mut());
    // S = B Y, symmetric positive definite when B has full row rank.
    let mut s = Mat::<f64>::zeros(k, k);
    for (a, row) in rows.iter().enumerate() {
        for b in 0..k {
            let col = y.col(b);
            let mut acc = 0.0;
            for (i, &v) in row.values.iter().enumerate() {
                acc += v * col[row.offset + i];
            }
            s[(a, b)] = acc;
        }
    }
    for a in 0..k {
        for b in a + 1..k {
            let v = 0.5 * (s[(a, b)] + s[(b, a)]);
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
    }
    // A pivot that collapses relative to its own diagonal entry signals dependent rows.
    let s_llt = s.llt(Side::Lower).map_err(|_| SaddleError::SingularConstraints)?;
    let l = s_llt.L();
    if (0..k).any(|i| !(l[(i, i)] * l[(i, i)] > 1e-12 * s[(i, i)])) {
        return Err(SaddleError::SingularConstraints);
    }
    let mut rhs = Mat::<f64>::zeros(k, targets.len());
    for (c, &t) in targets.iter().enumerate() {
        rhs[(t, c)] = 1.0;
    }
    s_llt.solve_in_place(rhs.as_mut());
    let mut primal = Vec::with_capacity(targets.len());
    let mut multipliers = Vec::with_capacity(targets.len());
    for c in 0..targets.len() {
        let w: Vec<f64> = rhs.col(c).iter().copied().collect();
        let mut x = vec![0.0; n];
        for (b, &wb) in w.iter().enumerate() {
            if wb != 0.0 {
                let col = y.col(b);
                x.iter_mut().zip(col.iter()).for_each(|(xi, yi)| *xi += wb * yi);
            }
        }
        primal.push(x);
        multipliers.push(w.iter().map(|v| -v).collect());
    }
    Ok(SaddleSolution { primal, multipliers })
}

fn sparse_lu(energy: &SparseOperator, rows: &[ConstraintRow<'_>], targets: &[usize]) -> Result<SaddleSolution, SaddleError> {
    let n = energy.dim();
    let k = rows.len();
    let total = n + k;
    let mut t = Vec::with_capacity(energy.nnz() + 2 * rows.iter().map(|r| r.values.len()).sum::<usize>());
    for (i, j, v) in energy.triplets() {
        t.push(Triplet::new(i, j, v));
    }
    for (c, row) in rows.iter().enumerate() {
        for (i, &v) in row.values.iter().enumerate() {
            if v != 0.0 {
                t.push(Triplet::new(n + c, row.offset + i, v));
                t.push(Triplet::new(row.offset + i, n + c, v));
            }
        }
    }
    let kkt = SparseColMat::<usize, f64>::try_new_from_triplets(total, total, &t).expect("valid structure");
    let lu = kkt.sp_lu().map_err(|_| SaddleError::SingularSystem)?;
    let mut rhs = Mat::<f64>::zeros(total, targets.len());
    for (c, &tg) in targets.iter().enumerate() {
        rhs[(n + tg, c)] = 1.0;
    }
    lu.solve_in_place(rhs.as_mut());
    if rhs.col_iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(SaddleError::SingularSystem);
    }
    let primal = (0..targets.len())
        .map(|c| rhs.col(c).iter().take(n).copied().collect())
        .collect();
    let multipliers = (0..targets.len())
        .map(|c| rhs.col(c).iter().skip(n).copied().collect())
        .collect();
    Ok(SaddleSolution { primal, multipliers })
}

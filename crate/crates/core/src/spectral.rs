//! Local spectral problems and the multiscale test space.
//!
//! On every coarse block the generalized eigenproblem `a_i(φ, w) = (λ/H²)(φ, w)`
//! is solved densely; the `L` lowest modes, normalized in `L²(K_i)`, span the
//! local test space and their zero extensions form the columns of `Φ`.

use std::cmp::Ordering;

use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::linalg::solvers::DenseSolveCore;
use faer::{Mat, Par, Side};
use thiserror::Error;

use crate::assembly::{assemble_block, assemble_block_mass};
use crate::grid::{BlockId, MeshHierarchy};
use crate::medium::CoefficientField;
use crate::sparse::SparseOperator;

/// Number of test functions per block used in the reference experiments.
pub const DEFAULT_MODES_PER_BLOCK: usize = 4;

/// Eigenvalues with `|λ| < ZERO_EIGEN_TOL · λ_max` are reported as zero.
pub const ZERO_EIGEN_TOL: f64 = 1e-9;

const CLUSTER_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("requested {requested} modes but block has {dofs} dofs (need 1 <= L < dofs)")]
    InvalidModeCount { requested: usize, dofs: usize },
    #[error("eigensolver failed on block {block}: {reason}")]
    EigenFailure { block: BlockId, reason: String },
    #[error("spectral basis missing for block {0}")]
    MissingBlock(BlockId),
    #[error("operators of size {stiffness} and {mass} do not match")]
    SizeMismatch { stiffness: usize, mass: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpectralBasis {
    pub block: BlockId,
    /// All eigenvalues `λ = H²μ`, ascending.
    pub eigenvalues: Vec<f64>,
    /// Selected modes over block-local dofs, `L²(K_i)`-orthonormal.
    pub modes: Vec<Vec<f64>>,
}

impl BlockSpectralBasis {
    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    /// `λ_{L+1}`, the smallest eigenvalue left out of the test space.
    pub fn excluded_next(&self) -> f64 {
        self.eigenvalues[self.modes.len()]
    }

    /// Eigenvalues with the near-zero ones snapped to exactly zero.
    pub fn reported_eigenvalues(&self) -> Vec<f64> {
        let max = self.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
        self.eigenvalues
            .iter()
            .map(|&l| if l.abs() < ZERO_EIGEN_TOL * max { 0.0 } else { l })
            .collect()
    }
}

/// Solves `K x = μ M x` densely and keeps the `l` lowest modes; eigenvalues
/// are reported as `λ = H² μ`.
pub fn solve_block_eigen(
    block: BlockId,
    stiffness: &SparseOperator,
    mass: &SparseOperator,
    coarse_size: f64,
    l: usize,
) -> Result<BlockSpectralBasis, SpectralError> {
    let n = stiffness.dim();
    if mass.dim() != n {
        return Err(SpectralError::SizeMismatch {
            stiffness: n,
            mass: mass.dim(),
        });
    }
    if l == 0 || l >= n {
        return Err(SpectralError::InvalidModeCount { requested: l, dofs: n });
    }
    let fail = |reason: String| SpectralError::EigenFailure { block, reason };

    let mut m = Mat::<f64>::zeros(n, n);
    for (i, j, v) in mass.triplets() {
        m[(i, j)] = v;
    }
    let mut k = Mat::<f64>::zeros(n, n);
    for (i, j, v) in stiffness.triplets() {
        k[(i, j)] = v;
    }
    let llt = m.llt(Side::Lower).map_err(|e| fail(format!("mass not positive definite: {e:?}")))?;
    let lower = llt.L();
    // C = L⁻¹ K L⁻ᵀ
    solve_lower_triangular_in_place(lower, k.as_mut(), Par::Seq);
    let mut c = k.transpose().to_owned();
    solve_lower_triangular_in_place(lower, c.as_mut(), Par::Seq);
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = s;
            c[(j, i)] = s;
        }
    }
    let evd = c
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| fail(format!("{e:?}")))?;
    let h2 = coarse_size * coarse_size;
    let eigenvalues: Vec<f64> = evd.S().column_vector().iter().map(|&mu| mu * h2).collect();

    // Eigenvectors needed: every cluster that intersects the first l.
    let lam_max = eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b.abs())).max(f64::MIN_POSITIVE);
    let close = |a: f64, b: f64| (a - b).abs() <= CLUSTER_TOL * a.abs().max(b.abs()) + 1e-12 * lam_max;
    let mut take = l;
    while take < n && close(eigenvalues[take], eigenvalues[l - 1]) {
        take += 1;
    }
    let mut q = evd.U().subcols(0, take).to_owned();
    solve_upper_triangular_in_place(lower.transpose(), q.as_mut(), Par::Seq);
    let mut vectors: Vec<Vec<f64>> = (0..take).map(|j| q.col(j).iter().copied().collect()).collect();

    // Canonical, sign-normalized basis inside each cluster of equal eigenvalues.
    let mut start = 0;
    while start < take {
        let mut end = start + 1;
        while end < take && close(eigenvalues[end], eigenvalues[start]) {
            end += 1;
        }
        if end - start > 1 {
            let canon = canonical_cluster_basis(&vectors[start..end], mass);
            vectors.splice(start..end, canon);
        } else {
            normalize_sign(&mut vectors[start]);
        }
        start = end;
    }
    vectors.truncate(l);
    Ok(BlockSpectralBasis {
        block,
        eigenvalues,
        modes: vectors,
    })
}

fn normalize_sign(v: &mut [f64]) {
    let scale = v.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-8 * scale) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    let scale = a.iter().chain(b).fold(0.0_f64, |s, &x| s.max(x.abs()));
    for (x, y) in a.iter().zip(b) {
        if (x - y).abs() > 1e-8 * scale {
            return x.partial_cmp(y).unwrap_or(Ordering::Equal);
        }
    }
    Ordering::Equal
}

/// Replaces an arbitrary orthonormal basis of an eigenspace by one that only
/// depends on the subspace: pivot rows are picked by row norm (invariant under
/// rotations of the basis), the basis is reduced to identity on the pivots,
/// then mass-orthonormalized in pivot order, sign-normalized and sorted.
fn canonical_cluster_basis(vectors: &[Vec<f64>], mass: &SparseOperator) -> Vec<Vec<f64>> {
    let d = vectors.len();
    let n = vectors[0].len();
    let mut residual: Vec<Vec<f64>> = (0..n).map(|i| vectors.iter().map(|v| v[i]).collect()).collect();
    let mut pivots = Vec::with_capacity(d);
    for _ in 0..d {
        let norms: Vec<f64> = residual.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>()).collect();
        let best = norms.iter().fold(0.0_f64, |a, &b| a.max(b));
        let p = (0..n)
            .find(|&i| !pivots.contains(&i) && norms[i] >= best * (1.0 - 1e-10))
            .expect("non-empty residual");
        pivots.push(p);
        let pr = residual[p].clone();
        let pn: f64 = pr.iter().map(|x| x * x).sum();
        if pn == 0.0 {
            break;
        }
        for r in residual.iter_mut() {
            let t: f64 = r.iter().zip(&pr).map(|(a, b)| a * b).sum::<f64>() / pn;
            r.iter_mut().zip(&pr).for_each(|(a, b)| *a -= t * b);
        }
    }
    // Y = X (X_P)^{-1}
    let xp = Mat::<f64>::from_fn(d, d, |i, j| vectors[j][pivots[i]]);
    let inv = xp.partial_piv_lu().inverse();
    let mut out: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            (0..n)
                .map(|i| (0..d).map(|k| vectors[k][i] * inv[(k, j)]).sum())
                .collect()
        })
        .collect();
    for j in 0..d {
        for k in 0..j {
            let mk = mass.mul_vec(&out[k]);
            let c: f64 = out[j].iter().zip(&mk).map(|(a, b)| a * b).sum();
            let prev = out[k].clone();
            out[j].iter_mut().zip(&prev).for_each(|(a, b)| *a -= c * b);
        }
        let nrm = mass.quad_form(&out[j]).sqrt();
        out[j].iter_mut().for_each(|a| *a /= nrm);
        normalize_sign(&mut out[j]);
    }
    out.sort_by(|a, b| lexicographic(a, b));
    out
}

/// The global test space `W_H` and its basis matrix `Φ` (stored block-wise).
#[derive(Debug, Clone)]
pub struct TestSpace {
    modes_per_block: usize,
    nodes_per_block: usize,
    blocks: Vec<BlockSpectralBasis>,
    /// `M_i φ_j^{(i)}` per column, over block-local dofs.
    weighted: Vec<Vec<f64>>,
    lambda: f64,
}

impl TestSpace {
    pub fn modes_per_block(&self) -> usize {
        self.modes_per_block
    }

    pub fn nodes_per_block(&self) -> usize {
        self.nodes_per_block
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_columns(&self) -> usize {
        self.blocks.len() * self.modes_per_block
    }

    pub fn num_dofs(&self) -> usize {
        self.blocks.len() * self.nodes_per_block
    }

    /// `Λ = min_i λ_{L_i+1}`.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn column_index(&self, block: BlockId, j: usize) -> usize {
        block * self.modes_per_block + j
    }

    pub fn column_block(&self, column: usize) -> BlockId {
        column / self.modes_per_block
    }

    pub fn block_basis(&self, block: BlockId) -> &BlockSpectralBasis {
        &self.blocks[block]
    }

    pub fn blocks(&self) -> &[BlockSpectralBasis] {
        &self.blocks
    }

    /// Mode `j` of `block` over the block's local dofs.
    pub fn mode(&self, block: BlockId, j: usize) -> &[f64] {
        &self.blocks[block].modes[j]
    }

    /// `M_i φ_j^{(i)}` over the block's local dofs (one row of `ΦᵀM`).
    pub fn weighted_mode(&self, block: BlockId, j: usize) -> &[f64] {
        &self.weighted[self.column_index(block, j)]
    }

    /// Largest entry of `|ΦᵀMΦ − I|` for the assembled global mass `M`.
    ///
    /// Cross-block entries vanish because `M` is block-diagonal, so only the
    /// per-block Gram matrices are formed.
    pub fn orthonormality_defect(&self, mass: &SparseOperator) -> f64 {
        let mut worst = 0.0_f64;
        for b in 0..self.num_blocks() {
            for j in 0..self.modes_per_block {
                let mphi = block_apply(mass, b, self.nodes_per_block, self.mode(b, j));
                for k in 0..self.modes_per_block {
                    let target = if j == k { 1.0 } else { 0.0 };
                    worst = worst.max((dot(self.mode(b, k), &mphi) - target).abs());
                }
            }
        }
        worst
    }

    /// Column of `Φ` extended by zero to all dofs.
    pub fn column_dense(&self, column: usize) -> Vec<f64> {
        let b = self.column_block(column);
        let j = column % self.modes_per_block;
        let mut v = vec![0.0; self.num_dofs()];
        v[b * self.nodes_per_block..(b + 1) * self.nodes_per_block].copy_from_slice(self.mode(b, j));
        v
    }

    /// Coarse coefficients `ΦᵀMv`.
    pub fn coefficients(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.num_dofs());
        let npb = self.nodes_per_block;
        (0..self.num_columns())
            .map(|c| {
                let b = self.column_block(c);
                dot(&self.weighted[c], &v[b * npb..(b + 1) * npb])
            })
            .collect()
    }

    /// Coarse coefficients of a load vector `F` (already tested against the
    /// fine basis): `ΦᵀF`.
    pub fn load_coefficients(&self, load: &[f64]) -> Vec<f64> {
        assert_eq!(load.len(), self.num_dofs());
        let npb = self.nodes_per_block;
        (0..self.num_columns())
            .map(|c| {
                let b = self.column_block(c);
                dot(self.mode(b, c % self.modes_per_block), &load[b * npb..(b + 1) * npb])
            })
            .collect()
    }

    /// Fine vector `Φc`.
    pub fn representative(&self, coeffs: &[f64]) -> Vec<f64> {
        assert_eq!(coeffs.len(), self.num_columns());
        let npb = self.nodes_per_block;
        let mut v = vec![0.0; self.num_dofs()];
        for (c, &a) in coeffs.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let b = self.column_block(c);
            let mode = self.mode(b, c % self.modes_per_block);
            v[b * npb..(b + 1) * npb]
                .iter_mut()
                .zip(mode)
                .for_each(|(x, m)| *x += a * m);
        }
        v
    }

    /// The projection `π`: coefficients `ΦᵀMv` and the representative `Φ ΦᵀMv`.
    pub fn project_pi(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let c = self.coefficients(v);
        let r = self.representative(&c);
        (c, r)
    }
}

/// `M_b v` for the diagonal block `b` of a block-diagonal operator.
pub(crate) fn block_apply(op: &SparseOperator, block: usize, npb: usize, v: &[f64]) -> Vec<f64> {
    let base = block * npb;
    (0..npb)
        .map(|r| {
            op.row(base + r)
                .filter(|&(c, _)| c >= base && c < base + npb)
                .map(|(c, a)| a * v[c - base])
                .sum()
        })
        .collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Assembles the test space from per-block bases (any order, one per block).
pub fn build_test_space(mesh: &MeshHierarchy, mut bases: Vec<BlockSpectralBasis>) -> Result<TestSpace, SpectralError> {
    bases.sort_by_key(|b| b.block);
    for block in 0..mesh.num_blocks() {
        if bases.get(block).map(|b| b.block) != Some(block) {
            return Err(SpectralError::MissingBlock(block));
        }
    }
    let l = bases[0].num_modes();
    let npb = mesh.nodes_per_block();
    if bases.iter().any(|b| b.num_modes() != l) {
        return Err(SpectralError::InvalidModeCount {
            requested: l,
            dofs: npb,
        });
    }
    let block_mass = assemble_block_mass(mesh);
    let weighted = bases
        .iter()
        .flat_map(|b| b.modes.iter().map(|m| block_mass.mul_vec(m)))
        .collect();
    let lambda = bases.iter().map(|b| b.excluded_next()).fold(f64::INFINITY, f64::min);
    Ok(TestSpace {
        modes_per_block: l,
        nodes_per_block: npb,
        blocks: bases,
        weighted,
        lambda,
    })
}

/// Assembles and solves every block's spectral problem.
pub fn compute_test_space(mesh: &MeshHierarchy, field: &CoefficientField, l: usize) -> Result<TestSpace, SpectralError> {
    let h = mesh.coarse_size();
    let solve = |b: BlockId| {
        let (k, m) = assemble_block(mesh, field, b);
        solve_block_eigen(b, &k, &m, h, l)
    };
    #[cfg(feature = "parallel")]
    let bases: Result<Vec<_>, _> = {
        use rayon::prelude::*;
        (0..mesh.num_blocks()).into_par_iter().map(solve).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let bases: Result<Vec<_>, _> = (0..mesh.num_blocks()).map(solve).collect();
    build_test_space(mesh, bases?)
}

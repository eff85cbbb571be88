//! Localized trial functions by constrained energy minimization.
//!
//! For every block `K_i` and mode `j`, `ψ_{j,m}` minimizes `a_DG(ψ, ψ)` over
//! functions supported in the oversampled region `K_{i,m}` subject to
//! `ΦᵀMψ = e_{(i,j)}` on the test functions of that region.

use thiserror::Error;

use crate::grid::{oversample_region, BlockId, BlockRegion, MeshError, MeshHierarchy};
use crate::saddle::{solve_unit_constraints, ConstraintRow, SaddleError, SaddleMethod};
use crate::sparse::{OperatorRole, SparseOperator, SymmetricBuilder};
use crate::spectral::{block_apply, dot, TestSpace};

/// Default cap on `dofs × constraints` for the global (unlocalized) basis.
pub const DEFAULT_GLOBAL_CAP: usize = 40_000_000;

#[derive(Debug, Error)]
pub enum CemError {
    #[error("singular constraint system for block {block} (m = {m}, {constraints} constraints): {source}")]
    Singular {
        block: BlockId,
        m: usize,
        constraints: usize,
        #[source]
        source: SaddleError,
    },
    #[error("global basis needs {dofs} dofs x {constraints} constraints, above the cap of {cap}")]
    SizeCap { dofs: usize, constraints: usize, cap: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("basis mismatch: {0}")]
    Mismatch(String),
}

/// One trial function stored over the blocks of its region.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialColumn {
    pub center_block: BlockId,
    /// Sorted block ids of the support region.
    pub member_blocks: Vec<BlockId>,
    /// Values over `member_blocks`, block after block.
    pub values: Vec<f64>,
    /// Lagrange multipliers, one per constraint row of the region.
    pub multipliers: Vec<f64>,
}

impl TrialColumn {
    pub fn block_values(&self, slot: usize, nodes_per_block: usize) -> &[f64] {
        &self.values[slot * nodes_per_block..(slot + 1) * nodes_per_block]
    }
}

/// The trial matrix `Ψ`, block-sparse by column.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialBasis {
    m: usize,
    nc: usize,
    nodes_per_block: usize,
    num_dofs: usize,
    columns: Vec<TrialColumn>,
}

impl TrialBasis {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn nodes_per_block(&self) -> usize {
        self.nodes_per_block
    }

    /// Coarse blocks per dimension of the underlying mesh.
    pub fn nc(&self) -> usize {
        self.nc
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn num_dofs(&self) -> usize {
        self.num_dofs
    }

    pub fn column(&self, c: usize) -> &TrialColumn {
        &self.columns[c]
    }

    pub fn columns(&self) -> &[TrialColumn] {
        &self.columns
    }

    /// Column `c` extended by zero to all dofs.
    pub fn column_dense(&self, c: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.num_dofs];
        self.scatter(c, 1.0, &mut v);
        v
    }

    fn scatter(&self, c: usize, scale: f64, out: &mut [f64]) {
        let npb = self.nodes_per_block;
        let col = &self.columns[c];
        for (slot, &b) in col.member_blocks.iter().enumerate() {
            out[b * npb..(b + 1) * npb]
                .iter_mut()
                .zip(col.block_values(slot, npb))
                .for_each(|(o, v)| *o += scale * v);
        }
    }

    /// Downscaling `ΨU`.
    pub fn downscale(&self, coeffs: &[f64]) -> Vec<f64> {
        assert_eq!(coeffs.len(), self.num_columns());
        let mut v = vec![0.0; self.num_dofs];
        for (c, &a) in coeffs.iter().enumerate() {
            if a != 0.0 {
                self.scatter(c, a, &mut v);
            }
        }
        v
    }

    /// `Ψᵀv`.
    pub fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.num_dofs);
        let npb = self.nodes_per_block;
        self.columns
            .iter()
            .map(|col| {
                col.member_blocks
                    .iter()
                    .enumerate()
                    .map(|(slot, &b)| dot(col.block_values(slot, npb), &v[b * npb..(b + 1) * npb]))
                    .sum()
            })
            .collect()
    }

    /// Dense `ΦᵀMΨ` (row = test column, column = trial column).
    pub fn constraint_matrix(&self, test: &TestSpace) -> Vec<Vec<f64>> {
        let n = self.num_columns();
        let l = test.modes_per_block();
        let npb = self.nodes_per_block;
        let mut out = vec![vec![0.0; n]; test.num_columns()];
        for (c, col) in self.columns.iter().enumerate() {
            for (slot, &b) in col.member_blocks.iter().enumerate() {
                let vals = col.block_values(slot, npb);
                for j in 0..l {
                    out[test.column_index(b, j)][c] = dot(test.weighted_mode(b, j), vals);
                }
            }
        }
        out
    }

    /// Largest entry of `|ΦᵀMΨ − I|` using the assembled global mass `M`, without forming the matrix.
    pub fn constraint_defect_with(&self, test: &TestSpace, mass: &SparseOperator) -> f64 {
        let npb = self.nodes_per_block;
        let mut worst = 0.0_f64;
        for (c, col) in self.columns.iter().enumerate() {
            for (slot, &b) in col.member_blocks.iter().enumerate() {
                let mpsi = block_apply(mass, b, npb, col.block_values(slot, npb));
                for j in 0..test.modes_per_block() {
                    let row = test.column_index(b, j);
                    let target = if row == c { 1.0 } else { 0.0 };
                    worst = worst.max((dot(test.mode(b, j), &mpsi) - target).abs());
                }
            }
        }
        worst
    }

    /// Copy with the Lagrange multipliers dropped (they are not persisted).
    pub fn clone_without_multipliers(&self) -> Self {
        let mut out = self.clone();
        out.columns.iter_mut().for_each(|c| c.multipliers.clear());
        out
    }

    /// Dense column-major copy of `Ψ`.
    pub fn to_dense_column_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_dofs * self.num_columns()];
        for c in 0..self.num_columns() {
            self.scatter(c, 1.0, &mut out[c * self.num_dofs..(c + 1) * self.num_dofs]);
        }
        out
    }

    /// Rebuilds the block-sparse form from a dense column-major `Ψ`.
    ///
    /// Supports are recovered from `m`; any nonzero outside a column's region
    /// is rejected.
    pub fn from_dense_column_major(
        mesh: &MeshHierarchy,
        modes_per_block: usize,
        m: usize,
        data: &[f64],
    ) -> Result<Self, CemError> {
        let n = mesh.num_dofs();
        let cols = mesh.num_blocks() * modes_per_block;
        if data.len() != n * cols {
            return Err(CemError::Mismatch(format!("expected {} entries, got {}", n * cols, data.len())));
        }
        let npb = mesh.nodes_per_block();
        let mut columns = Vec::with_capacity(cols);
        for c in 0..cols {
            let center = c / modes_per_block;
            let region = oversample_region(mesh, center, m)?;
            let dense = &data[c * n..(c + 1) * n];
            let mut values = Vec::with_capacity(region.num_dofs());
            for b in 0..mesh.num_blocks() {
                let part = &dense[b * npb..(b + 1) * npb];
                if region.contains_block(b) {
                    values.extend_from_slice(part);
                } else if part.iter().any(|&v| v != 0.0) {
                    return Err(CemError::Mismatch(format!("column {c} has support outside its region")));
                }
            }
            columns.push(TrialColumn {
                center_block: center,
                member_blocks: region.member_blocks,
                values,
                multipliers: Vec::new(),
            });
        }
        Ok(Self {
            m,
            nc: mesh.nc(),
            nodes_per_block: npb,
            num_dofs: n,
            columns,
        })
    }
}

fn constraint_rows<'a>(test: &'a TestSpace, region: &BlockRegion) -> Vec<ConstraintRow<'a>> {
    let npb = test.nodes_per_block();
    region
        .member_blocks
        .iter()
        .enumerate()
        .flat_map(|(slot, &b)| {
            (0..test.modes_per_block()).map(move |j| ConstraintRow {
                offset: slot * npb,
                values: test.weighted_mode(b, j),
            })
        })
        .collect()
}

/// Solves the constrained minimization for every mode of `block` on `K_{block,m}`.
pub fn solve_cem_block(
    mesh: &MeshHierarchy,
    stiffness: &SparseOperator,
    test: &TestSpace,
    block: BlockId,
    m: usize,
    method: SaddleMethod,
) -> Result<Vec<TrialColumn>, CemError> {
    let region = oversample_region(mesh, block, m)?;
    let dofs: Vec<usize> = region.global_dofs().collect();
    let local = stiffness.principal_submatrix(&dofs, |g| region.local_index(g));
    let rows = constraint_rows(test, &region);
    let l = test.modes_per_block();
    let slot = region.block_slot(block).expect("center block is a member");
    let targets: Vec<usize> = (0..l).map(|j| slot * l + j).collect();
    let sol = solve_unit_constraints(&local, &rows, &targets, method).map_err(|source| CemError::Singular {
        block,
        m,
        constraints: rows.len(),
        source,
    })?;
    Ok(sol
        .primal
        .into_iter()
        .zip(sol.multipliers)
        .map(|(values, multipliers)| TrialColumn {
            center_block: block,
            member_blocks: region.member_blocks.clone(),
            values,
            multipliers,
        })
        .collect())
}

/// Builds the localized trial basis `Ψ` for oversampling width `m`.
pub fn build_trial_basis(
    mesh: &MeshHierarchy,
    stiffness: &SparseOperator,
    test: &TestSpace,
    m: usize,
    method: SaddleMethod,
) -> Result<TrialBasis, CemError> {
    check_dims(mesh, stiffness, test)?;
    let solve = |b: BlockId| solve_cem_block(mesh, stiffness, test, b, m, method);
    #[cfg(feature = "parallel")]
    let per_block: Vec<Result<Vec<TrialColumn>, CemError>> = {
        use rayon::prelude::*;
        (0..mesh.num_blocks()).into_par_iter().map(solve).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_block: Vec<Result<Vec<TrialColumn>, CemError>> = (0..mesh.num_blocks()).map(solve).collect();
    let mut columns = Vec::with_capacity(test.num_columns());
    for cols in per_block {
        columns.extend(cols?);
    }
    Ok(TrialBasis {
        m,
        nc: mesh.nc(),
        nodes_per_block: mesh.nodes_per_block(),
        num_dofs: mesh.num_dofs(),
        columns,
    })
}

fn check_dims(mesh: &MeshHierarchy, stiffness: &SparseOperator, test: &TestSpace) -> Result<(), CemError> {
    if stiffness.dim() != mesh.num_dofs() || test.num_dofs() != mesh.num_dofs() {
        return Err(CemError::Mismatch(format!(
            "mesh has {} dofs, stiffness {}, test space {}",
            mesh.num_dofs(),
            stiffness.dim(),
            test.num_dofs()
        )));
    }
    Ok(())
}

/// The unlocalized basis `Ψ^(∞)` from one saddle solve on the whole domain.
pub fn solve_global_basis(
    mesh: &MeshHierarchy,
    stiffness: &SparseOperator,
    test: &TestSpace,
    cap: usize,
    method: SaddleMethod,
) -> Result<TrialBasis, CemError> {
    check_dims(mesh, stiffness, test)?;
    let dofs = mesh.num_dofs();
    let constraints = test.num_columns();
    if dofs.saturating_mul(constraints) > cap {
        return Err(CemError::SizeCap { dofs, constraints, cap });
    }
    let m = mesh.nc() - 1;
    let region = oversample_region(mesh, 0, m)?;
    let rows = constraint_rows(test, &region);
    let targets: Vec<usize> = (0..constraints).collect();
    let sol = solve_unit_constraints(stiffness, &rows, &targets, method).map_err(|source| CemError::Singular {
        block: 0,
        m,
        constraints,
        source,
    })?;
    let columns = sol
        .primal
        .into_iter()
        .zip(sol.multipliers)
        .enumerate()
        .map(|(c, (values, multipliers))| TrialColumn {
            center_block: test.column_block(c),
            member_blocks: region.member_blocks.clone(),
            values,
            multipliers,
        })
        .collect();
    Ok(TrialBasis {
        m,
        nc: mesh.nc(),
        nodes_per_block: mesh.nodes_per_block(),
        num_dofs: dofs,
        columns,
    })
}

/// Per-column `‖ψ_j − ψ_{j,m}‖_N`.
pub fn localization_error(
    global: &TrialBasis,
    local: &TrialBasis,
    anorm: &SparseOperator,
) -> Result<Vec<f64>, CemError> {
    if global.num_columns() != local.num_columns() || global.num_dofs() != local.num_dofs() {
        return Err(CemError::Mismatch(format!(
            "{}x{} vs {}x{}",
            global.num_dofs(),
            global.num_columns(),
            local.num_dofs(),
            local.num_columns()
        )));
    }
    if anorm.dim() != global.num_dofs() {
        return Err(CemError::Mismatch("norm matrix dimension".into()));
    }
    let mut diff = vec![0.0; global.num_dofs()];
    Ok((0..global.num_columns())
        .map(|c| {
            diff.iter_mut().for_each(|d| *d = 0.0);
            global.scatter(c, 1.0, &mut diff);
            local.scatter(c, -1.0, &mut diff);
            anorm.quad_form(&diff).max(0.0).sqrt()
        })
        .collect())
}

/// The coarse stiffness `ΨᵀAΨ`, exactly symmetric.
pub fn build_coarse_operator(trial: &TrialBasis, stiffness: &SparseOperator) -> SparseOperator {
    galerkin_product(trial, stiffness, OperatorRole::CoarseStiffness)
}

/// The trial Gram matrix `ΨᵀMΨ`.
pub fn build_gram(basis: &MultiscaleBasis, mass: &SparseOperator) -> SparseOperator {
    galerkin_product(&basis.trial, mass, OperatorRole::Submatrix)
}

/// `ΨᵀOΨ` for an operator `O` coupling only blocks that share an edge.
fn galerkin_product(trial: &TrialBasis, op: &SparseOperator, role: OperatorRole) -> SparseOperator {
    let n = trial.num_columns();
    let npb = trial.nodes_per_block();
    let nc = trial.nc();
    // Columns whose region covers each block.
    let mut covering: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nc * nc];
    for (c, col) in trial.columns().iter().enumerate() {
        for (slot, &b) in col.member_blocks.iter().enumerate() {
            covering[b].push((c, slot));
        }
    }
    let mut x = vec![0.0; trial.num_dofs()];
    let mut ox = vec![0.0; npb];
    let mut builder = SymmetricBuilder::new(n);
    for q in 0..n {
        let col = trial.column(q);
        trial.scatter(q, 1.0, &mut x);
        let mut support: Vec<BlockId> = Vec::with_capacity(col.member_blocks.len() * 2);
        for &b in &col.member_blocks {
            let (bx, by) = (b % nc, b / nc);
            support.push(b);
            if bx > 0 {
                support.push(b - 1);
            }
            if bx + 1 < nc {
                support.push(b + 1);
            }
            if by > 0 {
                support.push(b - nc);
            }
            if by + 1 < nc {
                support.push(b + nc);
            }
        }
        support.sort_unstable();
        support.dedup();
        for &b in &support {
            for (r, o) in ox.iter_mut().enumerate() {
                *o = op.row(b * npb + r).map(|(j, v)| v * x[j]).sum();
            }
            for &(p, slot) in &covering[b] {
                if p <= q {
                    let v = dot(trial.column(p).block_values(slot, npb), &ox);
                    if v != 0.0 {
                        builder.add(p, q, v);
                    }
                }
            }
        }
        for &b in &col.member_blocks {
            x[b * npb..(b + 1) * npb].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    builder.build(role)
}

/// Test space, trial basis and coarse stiffness for one oversampling width.
#[derive(Debug, Clone)]
pub struct MultiscaleBasis {
    pub test: TestSpace,
    pub trial: TrialBasis,
    pub coarse_stiffness: SparseOperator,
}

impl MultiscaleBasis {
    pub fn build(
        mesh: &MeshHierarchy,
        stiffness: &SparseOperator,
        test: TestSpace,
        m: usize,
        method: SaddleMethod,
    ) -> Result<Self, CemError> {
        let trial = build_trial_basis(mesh, stiffness, &test, m, method)?;
        let coarse_stiffness = build_coarse_operator(&trial, stiffness);
        Ok(Self {
            test,
            trial,
            coarse_stiffness,
        })
    }

    pub fn m(&self) -> usize {
        self.trial.m()
    }

    pub fn num_coarse(&self) -> usize {
        self.trial.num_columns()
    }

    /// Largest entry of `|ΦᵀMΨ − I|`.
    pub fn constraint_defect(&self) -> f64 {
        max_identity_defect(&self.trial.constraint_matrix(&self.test))
    }
}

pub fn max_identity_defect(m: &[Vec<f64>]) -> f64 {
    m.iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &v)| (v - if i == j { 1.0 } else { 0.0 }).abs()))
        .fold(0.0, f64::max)
}

/// Empirical inverse-inequality constant
/// `min_c ‖c‖² κ₁ H⁻² / (cᵀ K_c c)` over `samples` random coarse vectors.
pub fn empirical_beta(coarse_stiffness: &SparseOperator, kappa1: f64, coarse_size: f64, samples: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = coarse_stiffness.dim();
    let mut best = f64::INFINITY;
    for _ in 0..samples {
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let energy = coarse_stiffness.quad_form(&c);
        if energy > 0.0 {
            best = best.min(dot(&c, &c) * kappa1 / (coarse_size * coarse_size * energy));
        }
    }
    best
}

/// Oversampling width `round(4 log(1/H) / log 8)`, ties rounded up.
pub fn m_schedule(coarse_size: f64) -> usize {
    let x = 4.0 * (1.0 / coarse_size).ln() / 8f64.ln();
    // Guard against a representation error just below an exact half.
    (x + 0.5 + 1e-12).floor().max(0.0) as usize
}

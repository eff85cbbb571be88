//! Fine-scale operators: block stiffness and mass, the symmetric interior
//! penalty form on coarse edges, and the matrix of the energy-type a-norm.

use faer::Side;

use crate::grid::{BlockId, CellId, FineSegment, MeshHierarchy};
use crate::medium::{edge_kappa_bar, CoefficientField};
use crate::sparse::{OperatorRole, SparseOperator, SymmetricBuilder};

/// Q1 stiffness of a square cell for κ = 1 (independent of the cell size in 2D).
/// Nodes counterclockwise from the lower-left corner.
pub const Q1_STIFFNESS: [[f64; 4]; 4] = [
    [4.0 / 6.0, -1.0 / 6.0, -2.0 / 6.0, -1.0 / 6.0],
    [-1.0 / 6.0, 4.0 / 6.0, -1.0 / 6.0, -2.0 / 6.0],
    [-2.0 / 6.0, -1.0 / 6.0, 4.0 / 6.0, -1.0 / 6.0],
    [-1.0 / 6.0, -2.0 / 6.0, -1.0 / 6.0, 4.0 / 6.0],
];

/// Q1 mass of the unit square; scale by the cell area.
pub const Q1_MASS: [[f64; 4]; 4] = [
    [4.0 / 36.0, 2.0 / 36.0, 1.0 / 36.0, 2.0 / 36.0],
    [2.0 / 36.0, 4.0 / 36.0, 2.0 / 36.0, 1.0 / 36.0],
    [1.0 / 36.0, 2.0 / 36.0, 4.0 / 36.0, 2.0 / 36.0],
    [2.0 / 36.0, 1.0 / 36.0, 2.0 / 36.0, 4.0 / 36.0],
];

/// Penalty parameter used in all reported experiments.
pub const DEFAULT_GAMMA: f64 = 4.0;

/// Bilinear shape functions on the reference square.
pub fn q1_shape(xi: f64, eta: f64) -> [f64; 4] {
    [
        (1.0 - xi) * (1.0 - eta),
        xi * (1.0 - eta),
        xi * eta,
        (1.0 - xi) * eta,
    ]
}

/// Reference gradients `(d/dxi, d/deta)` of the shape functions.
pub fn q1_grad(xi: f64, eta: f64) -> [[f64; 2]; 4] {
    [
        [-(1.0 - eta), -(1.0 - xi)],
        [1.0 - eta, -xi],
        [eta, xi],
        [-eta, 1.0 - xi],
    ]
}

/// Two-point Gauss rule on a straight segment; exact for cubic integrands.
#[derive(Debug, Clone, Copy)]
pub struct EdgeQuadrature;

impl EdgeQuadrature {
    /// Parameters in `[0, 1]` and weights (summing to 1).
    pub const POINTS: [(f64, f64); 2] = [
        (0.5 - 0.288_675_134_594_812_9, 0.5),
        (0.5 + 0.288_675_134_594_812_9, 0.5),
    ];

    pub fn integrate(start: [f64; 2], end: [f64; 2], f: impl Fn([f64; 2]) -> f64) -> f64 {
        let len = ((end[0] - start[0]).powi(2) + (end[1] - start[1]).powi(2)).sqrt();
        Self::POINTS
            .iter()
            .map(|&(s, w)| {
                let p = [start[0] + s * (end[0] - start[0]), start[1] + s * (end[1] - start[1])];
                w * len * f(p)
            })
            .sum()
    }

    /// Integral of the product of two linear traces given by endpoint values.
    pub fn trace_product(length: f64, u: [f64; 2], v: [f64; 2]) -> f64 {
        Self::POINTS
            .iter()
            .map(|&(s, w)| {
                let us = u[0] + s * (u[1] - u[0]);
                let vs = v[0] + s * (v[1] - v[0]);
                w * length * us * vs
            })
            .sum()
    }
}

/// Trace value and normal flux weights of one cell's shape functions at a point.
fn cell_trace(mesh: &MeshHierarchy, cell: CellId, p: [f64; 2], normal: [f64; 2]) -> ([f64; 4], [f64; 4]) {
    let h = mesh.fine_size();
    let o = mesh.cell_origin(cell);
    let xi = (p[0] - o[0]) / h;
    let eta = (p[1] - o[1]) / h;
    let n = q1_shape(xi, eta);
    let g = q1_grad(xi, eta);
    let mut dn = [0.0; 4];
    for a in 0..4 {
        dn[a] = (g[a][0] * normal[0] + g[a][1] * normal[1]) / h;
    }
    (n, dn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EdgeTerms {
    /// Consistency, symmetry and penalty terms.
    Ipdg,
    /// Penalty term only.
    PenaltyOnly,
}

fn add_bulk(builder: &mut SymmetricBuilder, mesh: &MeshHierarchy, field: &CoefficientField) {
    for cell in 0..mesh.num_cells() {
        let k = field.value(cell);
        let dofs = mesh.cell_nodes(cell);
        let mut local = [[0.0; 4]; 4];
        for a in 0..4 {
            for b in 0..4 {
                local[a][b] = k * Q1_STIFFNESS[a][b];
            }
        }
        builder.add_local(&dofs, &local);
    }
}

fn add_segment(
    builder: &mut SymmetricBuilder,
    mesh: &MeshHierarchy,
    field: &CoefficientField,
    seg: &FineSegment,
    normal: [f64; 2],
    penalty: f64,
    terms: EdgeTerms,
) {
    let len = seg.length();
    let plus_dofs = mesh.cell_nodes(seg.plus_cell);
    let kp = field.value(seg.plus_cell);
    match seg.minus_cell {
        Some(minus_cell) => {
            let minus_dofs = mesh.cell_nodes(minus_cell);
            let km = field.value(minus_cell);
            let mut dofs = [0usize; 8];
            dofs[..4].copy_from_slice(&plus_dofs);
            dofs[4..].copy_from_slice(&minus_dofs);
            let mut local = [[0.0; 8]; 8];
            for &(s, w) in &EdgeQuadrature::POINTS {
                let p = [
                    seg.start[0] + s * (seg.end[0] - seg.start[0]),
                    seg.start[1] + s * (seg.end[1] - seg.start[1]),
                ];
                let (np, dp) = cell_trace(mesh, seg.plus_cell, p, normal);
                let (nm, dm) = cell_trace(mesh, minus_cell, p, normal);
                let mut jump = [0.0; 8];
                let mut flux = [0.0; 8];
                for a in 0..4 {
                    jump[a] = np[a];
                    jump[a + 4] = -nm[a];
                    flux[a] = 0.5 * kp * dp[a];
                    flux[a + 4] = 0.5 * km * dm[a];
                }
                accumulate(&mut local, &jump, &flux, w * len, penalty, terms);
            }
            builder.add_local(&dofs, &local);
        }
        None => {
            let mut local = [[0.0; 4]; 4];
            for &(s, w) in &EdgeQuadrature::POINTS {
                let p = [
                    seg.start[0] + s * (seg.end[0] - seg.start[0]),
                    seg.start[1] + s * (seg.end[1] - seg.start[1]),
                ];
                let (np, dp) = cell_trace(mesh, seg.plus_cell, p, normal);
                let mut flux = [0.0; 4];
                for a in 0..4 {
                    flux[a] = kp * dp[a];
                }
                accumulate(&mut local, &np, &flux, w * len, penalty, terms);
            }
            builder.add_local(&plus_dofs, &local);
        }
    }
}

fn accumulate<const N: usize>(
    local: &mut [[f64; N]; N],
    jump: &[f64; N],
    flux: &[f64; N],
    weight: f64,
    penalty: f64,
    terms: EdgeTerms,
) {
    for a in 0..N {
        for b in 0..N {
            let mut v = penalty * jump[a] * jump[b];
            if terms == EdgeTerms::Ipdg {
                v -= flux[a] * jump[b] + jump[a] * flux[b];
            }
            local[a][b] += weight * v;
        }
    }
}

fn assemble_dg(mesh: &MeshHierarchy, field: &CoefficientField, gamma: f64, terms: EdgeTerms, role: OperatorRole) -> SparseOperator {
    let n = mesh.num_dofs();
    let mut builder = SymmetricBuilder::with_capacity(n, 10 * mesh.num_cells() + 36 * mesh.nc() * mesh.cells_per_dim() * 2);
    add_bulk(&mut builder, mesh, field);
    let h = mesh.fine_size();
    for edge in mesh.coarse_edges() {
        let penalty = gamma / h * edge_kappa_bar(field, mesh, edge);
        for seg in &edge.fine_segments {
            add_segment(&mut builder, mesh, field, seg, edge.normal, penalty, terms);
        }
    }
    builder.build(role)
}

/// Global symmetric interior penalty matrix `A`.
///
/// Logs a warning when `A` is not positive definite at the given penalty.
pub fn assemble_ipdg(mesh: &MeshHierarchy, field: &CoefficientField, gamma: f64) -> SparseOperator {
    assert!(gamma > 0.0, "penalty parameter must be positive");
    let a = assemble_dg(mesh, field, gamma, EdgeTerms::Ipdg, OperatorRole::IpdgStiffness);
    if !is_positive_definite(&a) {
        log::warn!("IPDG matrix is not positive definite at gamma = {gamma}; increase the penalty");
    }
    a
}

/// Matrix `N` of the a-norm: bulk energy plus the penalty on jumps.
pub fn assemble_anorm(mesh: &MeshHierarchy, field: &CoefficientField, gamma: f64) -> SparseOperator {
    assert!(gamma > 0.0, "penalty parameter must be positive");
    assemble_dg(mesh, field, gamma, EdgeTerms::PenaltyOnly, OperatorRole::Anorm)
}

/// Global mass matrix, block diagonal over coarse blocks.
pub fn assemble_mass(mesh: &MeshHierarchy) -> SparseOperator {
    let n = mesh.num_dofs();
    let area = mesh.fine_size() * mesh.fine_size();
    let mut builder = SymmetricBuilder::with_capacity(n, 10 * mesh.num_cells());
    let local = scaled(&Q1_MASS, area);
    for cell in 0..mesh.num_cells() {
        builder.add_local(&mesh.cell_nodes(cell), &local);
    }
    builder.build(OperatorRole::Mass)
}

/// Stiffness `a_i` and mass of one block, in block-local dof numbering.
pub fn assemble_block(mesh: &MeshHierarchy, field: &CoefficientField, block: BlockId) -> (SparseOperator, SparseOperator) {
    let npb = mesh.nodes_per_block();
    let offset = mesh.block_dofs(block).start;
    let area = mesh.fine_size() * mesh.fine_size();
    let mass_local = scaled(&Q1_MASS, area);
    let mut k = SymmetricBuilder::with_capacity(npb, 10 * mesh.nf_per_block().pow(2));
    let mut m = SymmetricBuilder::with_capacity(npb, 10 * mesh.nf_per_block().pow(2));
    for cell in mesh.block_cells(block) {
        let g = mesh.cell_nodes(cell);
        let dofs = [g[0] - offset, g[1] - offset, g[2] - offset, g[3] - offset];
        k.add_local(&dofs, &scaled(&Q1_STIFFNESS, field.value(cell)));
        m.add_local(&dofs, &mass_local);
    }
    (k.build(OperatorRole::BlockStiffness), m.build(OperatorRole::BlockMass))
}

/// Mass matrix of a single block (identical for every block of the mesh).
pub fn assemble_block_mass(mesh: &MeshHierarchy) -> SparseOperator {
    let field = CoefficientField::constant(mesh, 1.0).expect("positive constant");
    assemble_block(mesh, &field, 0).1
}

fn scaled(m: &[[f64; 4]; 4], s: f64) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            out[a][b] = s * m[a][b];
        }
    }
    out
}

/// True when a sparse Cholesky factorization of `op` succeeds.
pub fn is_positive_definite(op: &SparseOperator) -> bool {
    op.to_faer_lower().sp_cholesky(Side::Lower).is_ok()
}

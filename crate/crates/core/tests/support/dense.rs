//! Brute-force dense reference built on nalgebra, independent of the sparse code paths.
//!
//! Every operator is formed by evaluating all global basis functions at 3-point Gauss
//! points and summing outer products. Edges are enumerated directly from the block lattice.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};

const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

pub struct DenseProblem {
    pub nc: usize,
    pub nf: usize,
    pub kappa: Vec<f64>,
    pub gamma: f64,
}

struct Trace {
    value: DVector<f64>,
    grad: [DVector<f64>; 2],
    kappa: f64,
}

impl DenseProblem {
    pub fn new(nc: usize, nf: usize, kappa: Vec<f64>, gamma: f64) -> Self {
        assert_eq!(kappa.len(), nc * nf * nc * nf);
        Self { nc, nf, kappa, gamma }
    }

    pub fn big_h(&self) -> f64 {
        1.0 / self.nc as f64
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.nc * self.nf) as f64
    }

    pub fn npb(&self) -> usize {
        (self.nf + 1) * (self.nf + 1)
    }

    pub fn ndofs(&self) -> usize {
        self.nc * self.nc * self.npb()
    }

    fn block_max(&self, bx: usize, by: usize) -> f64 {
        let n = self.nc * self.nf;
        let mut m = 0.0_f64;
        for cy in 0..self.nf {
            for cx in 0..self.nf {
                m = m.max(self.kappa[(by * self.nf + cy) * n + bx * self.nf + cx]);
            }
        }
        m
    }

    /// Values and gradients of every global basis function at `(x, y)` seen from block `(bx, by)`.
    fn trace(&self, bx: usize, by: usize, x: f64, y: f64) -> Trace {
        let (h, hh, nf) = (self.h(), self.big_h(), self.nf);
        let lx = x - bx as f64 * hh;
        let ly = y - by as f64 * hh;
        let cx = ((lx / h).floor() as isize).clamp(0, nf as isize - 1) as usize;
        let cy = ((ly / h).floor() as isize).clamp(0, nf as isize - 1) as usize;
        let xi = lx / h - cx as f64;
        let eta = ly / h - cy as f64;
        let n = self.ndofs();
        let mut value = DVector::zeros(n);
        let mut gx = DVector::zeros(n);
        let mut gy = DVector::zeros(n);
        let base = (by * self.nc + bx) * self.npb();
        for (dx, dy) in [(0usize, 0usize), (1, 0), (0, 1), (1, 1)] {
            let d = base + (cy + dy) * (nf + 1) + cx + dx;
            let fx = if dx == 1 { xi } else { 1.0 - xi };
            let fy = if dy == 1 { eta } else { 1.0 - eta };
            let sx = if dx == 1 { 1.0 } else { -1.0 };
            let sy = if dy == 1 { 1.0 } else { -1.0 };
            value[d] = fx * fy;
            gx[d] = sx * fy / h;
            gy[d] = fx * sy / h;
        }
        let kappa = self.kappa[(by * nf + cy) * (self.nc * nf) + bx * nf + cx];
        Trace {
            value,
            grad: [gx, gy],
            kappa,
        }
    }

    fn bulk(&self, with_kappa: bool, only_block: Option<(usize, usize)>) -> DMatrix<f64> {
        let n = self.ndofs();
        let h = self.h();
        let mut a = DMatrix::zeros(n, n);
        for by in 0..self.nc {
            for bx in 0..self.nc {
                if only_block.is_some_and(|b| b != (bx, by)) {
                    continue;
                }
                for cy in 0..self.nf {
                    for cx in 0..self.nf {
                        let x0 = (bx * self.nf + cx) as f64 * h;
                        let y0 = (by * self.nf + cy) as f64 * h;
                        for &(sx, wx) in &GAUSS3 {
                            for &(sy, wy) in &GAUSS3 {
                                let t = self.trace(bx, by, x0 + sx * h, y0 + sy * h);
                                let w = wx * wy * h * h;
                                if with_kappa {
                                    a += w * t.kappa * (&t.grad[0] * t.grad[0].transpose() + &t.grad[1] * t.grad[1].transpose());
                                } else {
                                    a += w * &t.value * t.value.transpose();
                                }
                            }
                        }
                    }
                }
            }
        }
        a
    }

    pub fn mass(&self) -> DMatrix<f64> {
        self.bulk(false, None)
    }

    /// Neumann block stiffness on the block's own dofs.
    pub fn block_stiffness(&self, block: usize) -> DMatrix<f64> {
        let b = (block % self.nc, block / self.nc);
        let r = block * self.npb()..(block + 1) * self.npb();
        self.bulk(true, Some(b)).view((r.start, r.start), (r.len(), r.len())).into_owned()
    }

    pub fn block_mass(&self, block: usize) -> DMatrix<f64> {
        let r = block * self.npb()..(block + 1) * self.npb();
        self.mass().view((r.start, r.start), (r.len(), r.len())).into_owned()
    }

    /// Each coarse edge as (plus block, optional minus block, unit normal, start point, direction).
    fn edges(&self) -> Vec<((usize, usize), Option<(usize, usize)>, [f64; 2], [f64; 2], [f64; 2])> {
        let nc = self.nc;
        let hh = self.big_h();
        let mut out = Vec::new();
        for k in 0..=nc {
            for b in 0..nc {
                let x = k as f64 * hh;
                let y = b as f64 * hh;
                // vertical line x = k·H
                let v = match k {
                    0 => ((0, b), None, [-1.0, 0.0]),
                    k if k == nc => ((nc - 1, b), None, [1.0, 0.0]),
                    k => ((k - 1, b), Some((k, b)), [1.0, 0.0]),
                };
                out.push((v.0, v.1, v.2, [x, y], [0.0, hh]));
                // horizontal line y = k·H
                let hz = match k {
                    0 => ((b, 0), None, [0.0, -1.0]),
                    k if k == nc => ((b, nc - 1), None, [0.0, 1.0]),
                    k => ((b, k - 1), Some((b, k)), [0.0, 1.0]),
                };
                out.push((hz.0, hz.1, hz.2, [y, x], [hh, 0.0]));
            }
        }
        out
    }

    fn dg(&self, consistency: bool) -> DMatrix<f64> {
        let mut a = self.bulk(true, None);
        let pen = self.gamma / self.h();
        for (plus, minus, normal, start, dir) in self.edges() {
            let kbar = match minus {
                Some(m) => 0.5 * (self.block_max(plus.0, plus.1) + self.block_max(m.0, m.1)),
                None => self.block_max(plus.0, plus.1),
            };
            let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt() / self.nf as f64;
            for seg in 0..self.nf {
                for &(s, w) in &GAUSS3 {
                    let t = (seg as f64 + s) / self.nf as f64;
                    let (x, y) = (start[0] + t * dir[0], start[1] + t * dir[1]);
                    let p = self.trace(plus.0, plus.1, x, y);
                    let flux_p = p.kappa * (normal[0] * &p.grad[0] + normal[1] * &p.grad[1]);
                    let (jump, avg) = match minus {
                        Some(m) => {
                            let q = self.trace(m.0, m.1, x, y);
                            let flux_q = q.kappa * (normal[0] * &q.grad[0] + normal[1] * &q.grad[1]);
                            (&p.value - &q.value, 0.5 * (flux_p + flux_q))
                        }
                        None => (p.value.clone(), flux_p),
                    };
                    let wt = w * len;
                    a += wt * pen * kbar * &jump * jump.transpose();
                    if consistency {
                        a -= wt * (&avg * jump.transpose() + &jump * avg.transpose());
                    }
                }
            }
        }
        a
    }

    pub fn stiffness(&self) -> DMatrix<f64> {
        self.dg(true)
    }

    pub fn anorm(&self) -> DMatrix<f64> {
        self.dg(false)
    }

    /// `(λ, modes)` of one block with `λ = H²μ`, ascending, mass-normalized, first significant entry positive.
    pub fn block_eigen(&self, block: usize) -> (Vec<f64>, Vec<DVector<f64>>) {
        let k = self.block_stiffness(block);
        let m = self.block_mass(block);
        let l = m.cholesky().expect("block mass is SPD").l();
        let linv = l.clone().try_inverse().unwrap();
        let c = &linv * k * linv.transpose();
        let c = 0.5 * (&c + c.transpose());
        let eig = SymmetricEigen::new(c);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let h2 = self.big_h() * self.big_h();
        let lams = order.iter().map(|&i| h2 * eig.eigenvalues[i]).collect();
        let modes = order
            .iter()
            .map(|&i| {
                let mut x = linv.transpose() * eig.eigenvectors.column(i);
                let scale = x.amax();
                if let Some(first) = x.iter().find(|v| v.abs() > 1e-8 * scale) {
                    if *first < 0.0 {
                        x = -x;
                    }
                }
                x
            })
            .collect();
        (lams, modes)
    }

    /// Test matrix with `modes` columns per block, ordered block-major.
    pub fn phi(&self, modes: usize) -> DMatrix<f64> {
        let nb = self.nc * self.nc;
        let mut phi = DMatrix::zeros(self.ndofs(), nb * modes);
        for b in 0..nb {
            let (_, vecs) = self.block_eigen(b);
            for j in 0..modes {
                phi.view_mut((b * self.npb(), b * modes + j), (self.npb(), 1)).copy_from(&vecs[j]);
            }
        }
        phi
    }

    pub fn region_blocks(&self, block: usize, m: usize) -> Vec<usize> {
        let (cx, cy) = ((block % self.nc) as isize, (block / self.nc) as isize);
        (0..self.nc * self.nc)
            .filter(|&b| {
                let (x, y) = ((b % self.nc) as isize, (b / self.nc) as isize);
                (x - cx).abs().max((y - cy).abs()) <= m as isize
            })
            .collect()
    }

    /// Localized trial matrix from one dense KKT solve per column.
    pub fn psi(&self, a: &DMatrix<f64>, mass: &DMatrix<f64>, phi: &DMatrix<f64>, modes: usize, m: usize) -> DMatrix<f64> {
        let n = self.ndofs();
        let npb = self.npb();
        let mut psi = DMatrix::zeros(n, phi.ncols());
        for b in 0..self.nc * self.nc {
            let region = self.region_blocks(b, m);
            let dofs: Vec<usize> = region.iter().flat_map(|&r| r * npb..(r + 1) * npb).collect();
            let cols: Vec<usize> = region.iter().flat_map(|&r| r * modes..(r + 1) * modes).collect();
            let (nr, k) = (dofs.len(), cols.len());
            let a_r = a.select_rows(&dofs).select_columns(&dofs);
            let bm = phi.select_rows(&dofs).select_columns(&cols).transpose() * mass.select_rows(&dofs).select_columns(&dofs);
            let mut kkt = DMatrix::zeros(nr + k, nr + k);
            kkt.view_mut((0, 0), (nr, nr)).copy_from(&a_r);
            kkt.view_mut((nr, 0), (k, nr)).copy_from(&bm);
            kkt.view_mut((0, nr), (nr, k)).copy_from(&bm.transpose());
            let lu = kkt.lu();
            for j in 0..modes {
                let target = cols.iter().position(|&c| c == b * modes + j).unwrap();
                let mut rhs = DVector::zeros(nr + k);
                rhs[nr + target] = 1.0;
                let sol = lu.solve(&rhs).expect("KKT system is nonsingular");
                for (li, &d) in dofs.iter().enumerate() {
                    psi[(d, b * modes + j)] = sol[li];
                }
            }
        }
        psi
    }
}

pub fn to_dense(op: &cemdg::sparse::SparseOperator) -> DMatrix<f64> {
    let n = op.dim();
    let mut out = DMatrix::zeros(n, n);
    for (i, j, v) in op.triplets() {
        out[(i, j)] = v;
    }
    out
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.amax()
}

pub fn max_rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(b.amax())
}

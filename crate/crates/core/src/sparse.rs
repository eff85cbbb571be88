//! Symmetric sparse operators in compressed-row form.

use std::fmt;
use std::io::{self, Write};

use faer::sparse::{SparseColMat, Triplet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorRole {
    Mass,
    IpdgStiffness,
    BlockStiffness,
    BlockMass,
    Anorm,
    CoarseStiffness,
    Submatrix,
}

impl fmt::Display for OperatorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OperatorRole::Mass => "mass",
            OperatorRole::IpdgStiffness => "ipdg_stiffness",
            OperatorRole::BlockStiffness => "block_stiffness",
            OperatorRole::BlockMass => "block_mass",
            OperatorRole::Anorm => "anorm",
            OperatorRole::CoarseStiffness => "coarse_stiffness",
            OperatorRole::Submatrix => "submatrix",
        };
        f.write_str(s)
    }
}

/// Accumulates upper-triangle contributions of a symmetric matrix.
///
/// Every off-diagonal value is stored once and mirrored on build, so the
/// result is symmetric bit for bit.
#[derive(Debug, Clone)]
pub struct SymmetricBuilder {
    dim: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl SymmetricBuilder {
    pub fn new(dim: usize) -> Self {
        assert!(dim <= u32::MAX as usize);
        Self { dim, entries: Vec::new() }
    }

    pub fn with_capacity(dim: usize, cap: usize) -> Self {
        let mut b = Self::new(dim);
        b.entries.reserve(cap);
        b
    }

    /// Adds `value` at `(i, j)`; the mirrored position is implied.
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        self.entries.push((r as u32, c as u32, value));
    }

    /// Adds a dense symmetric local matrix. Only `local[a][b]` with the
    /// global pair ordered upper is read for each unordered pair, so both
    /// halves of `local` must already agree.
    pub fn add_local<const N: usize>(&mut self, dofs: &[usize; N], local: &[[f64; N]; N]) {
        for a in 0..N {
            for b in a..N {
                let v = local[a][b];
                if v != 0.0 {
                    if a != b && dofs[a] == dofs[b] {
                        self.add(dofs[a], dofs[b], 2.0 * v);
                    } else {
                        self.add(dofs[a], dofs[b], v);
                    }
                }
            }
        }
    }

    pub fn build(mut self, role: OperatorRole) -> SparseOperator {
        self.entries.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        let mut upper: Vec<(u32, u32, f64)> = Vec::with_capacity(self.entries.len());
        for (r, c, v) in self.entries {
            match upper.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => upper.push((r, c, v)),
            }
        }
        let dim = self.dim;
        let mut counts = vec![0usize; dim + 1];
        for &(r, c, _) in &upper {
            counts[r as usize + 1] += 1;
            if r != c {
                counts[c as usize + 1] += 1;
            }
        }
        for i in 0..dim {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let nnz = row_ptr[dim];
        let mut col_idx = vec![0u32; nnz];
        let mut values = vec![0.0; nnz];
        let mut next = counts;
        // Lower entries (mirrored) come first in each row because their
        // column index is below the row index; upper entries are already
        // sorted by (row, col). Insert the mirrored part in a first pass.
        for &(r, c, v) in &upper {
            if r != c {
                let row = c as usize;
                col_idx[next[row]] = r;
                values[next[row]] = v;
                next[row] += 1;
            }
        }
        for &(r, c, v) in &upper {
            let row = r as usize;
            col_idx[next[row]] = c;
            values[next[row]] = v;
            next[row] += 1;
        }
        SparseOperator {
            dim,
            row_ptr,
            col_idx,
            values,
            role,
        }
    }
}

/// Symmetric sparse matrix with both triangles stored, sorted columns per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
    role: OperatorRole,
}

impl SparseOperator {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn role(&self) -> OperatorRole {
        self.role
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()]
            .iter()
            .zip(&self.values[r])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&(j as u32)) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r].binary_search(&(j as u32)).is_ok()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    /// `y = self * x`.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.dim);
        assert_eq!(y.len(), self.dim);
        for (i, yi) in y.iter_mut().enumerate() {
            let r = self.row_ptr[i]..self.row_ptr[i + 1];
            let mut acc = 0.0;
            for (&c, &v) in self.col_idx[r.clone()].iter().zip(&self.values[r]) {
                acc += v * x[c as usize];
            }
            *yi = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let ax = self.mul_vec(x);
        ax.iter().zip(y).map(|(a, b)| a * b).sum()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.bilinear(x, x)
    }

    /// Principal submatrix on `indices` (local order follows the slice).
    pub fn principal_submatrix(&self, indices: &[usize], local_of: impl Fn(usize) -> Option<usize>) -> SparseOperator {
        let mut b = SymmetricBuilder::with_capacity(indices.len(), indices.len() * 12);
        for (li, &gi) in indices.iter().enumerate() {
            for (gj, v) in self.row(gi) {
                if let Some(lj) = local_of(gj) {
                    if li <= lj {
                        b.add(li, lj, v);
                    }
                }
            }
        }
        b.build(OperatorRole::Submatrix)
    }

    /// Lower triangle as a faer column-major sparse matrix (for Cholesky with `Side::Lower`).
    pub fn to_faer_lower(&self) -> SparseColMat<usize, f64> {
        let mut t = Vec::with_capacity(self.nnz() / 2 + self.dim);
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                if j <= i {
                    t.push(Triplet::new(i, j, v));
                }
            }
        }
        SparseColMat::try_new_from_triplets(self.dim, self.dim, &t).expect("valid sparse structure")
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.dim]; self.dim];
        for (i, j, v) in self.triplets() {
            d[i][j] = v;
        }
        d
    }

    /// Sum of absolute row entries, maximized over rows.
    pub fn gershgorin_bound(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Matrix-market-style triplet dump, 1-based indices.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "%%{} {} {}", self.role, self.dim, self.nnz())?;
        for (i, j, v) in self.triplets() {
            writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
        }
        Ok(())
    }
}

//! File formats: persisted bases, field snapshots, CSV tables and the
//! structured-points export.
//!
//! Binary files are little-endian. A basis file is
//!
//! ```text
//! "CEMWBAS1"
//! u64 nc, nf_per_block, L, m, dofs, columns
//! f64 gamma, u64 κ checksum
//! Φ   dofs × columns, column-major f64
//! Ψ   dofs × columns, column-major f64
//! f64 Λ
//! f64 eigenvalues, nodes_per_block per block
//! ```
//!
//! and a field file is `"CEMWFLD1"`, `u64 nc, nf_per_block, step`, `f64 time`,
//! `u64 len`, then `len` f64 values over the DG dofs.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::cem::{build_coarse_operator, CemError, MultiscaleBasis, TrialBasis};
use crate::diagnostics::format_float;
use crate::grid::{MeshError, MeshHierarchy};
use crate::medium::CoefficientField;
use crate::sparse::SparseOperator;
use crate::spectral::{build_test_space, BlockSpectralBasis, SpectralError};
use crate::wavesim::EnergySample;

pub const BASIS_MAGIC: &[u8; 8] = b"CEMWBAS1";
pub const FIELD_MAGIC: &[u8; 8] = b"CEMWFLD1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected {expected}")]
    BadMagic { expected: &'static str },
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("inconsistent header: {0}")]
    Header(String),
    #[error("basis was built for {0}")]
    Incompatible(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Cem(#[from] CemError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &'static [u8; 8]) -> Result<Self, FormatError> {
        if bytes.len() < 8 || &bytes[..8] != magic {
            return Err(FormatError::BadMagic {
                expected: std::str::from_utf8(magic).unwrap_or("?"),
            });
        }
        Ok(Self { bytes, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, FormatError> {
        usize::try_from(self.u64()?).map_err(|_| FormatError::Header("size overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(8).ok_or(FormatError::Truncated(self.pos))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn finish(self) -> Result<(), FormatError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.reserve(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// FNV-1a over the bit patterns of the κ values.
pub fn field_checksum(field: &CoefficientField) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in field.values() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

pub fn encode_basis(mesh: &MeshHierarchy, basis: &MultiscaleBasis, gamma: f64, field: &CoefficientField) -> Vec<u8> {
    let dofs = mesh.num_dofs();
    let cols = basis.num_coarse();
    let mut out = Vec::with_capacity(80 + 16 * dofs * cols + 8 * dofs);
    out.extend_from_slice(BASIS_MAGIC);
    for v in [mesh.nc(), mesh.nf_per_block(), basis.test.modes_per_block(), basis.m(), dofs, cols] {
        put_u64(&mut out, v);
    }
    put_f64s(&mut out, &[gamma]);
    out.extend_from_slice(&field_checksum(field).to_le_bytes());
    for c in 0..cols {
        put_f64s(&mut out, &basis.test.column_dense(c));
    }
    put_f64s(&mut out, &basis.trial.to_dense_column_major());
    put_f64s(&mut out, &[basis.test.lambda()]);
    for b in basis.test.blocks() {
        put_f64s(&mut out, &b.eigenvalues);
    }
    out
}

/// Header of a basis file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisHeader {
    pub nc: usize,
    pub nf_per_block: usize,
    pub modes_per_block: usize,
    pub m: usize,
    pub gamma: f64,
    pub kappa_checksum: u64,
}

/// Decodes a basis and rebuilds the coarse stiffness from `stiffness`.
///
/// The mesh, `γ` and κ must match those the basis was built with.
pub fn decode_basis(
    bytes: &[u8],
    mesh: &MeshHierarchy,
    gamma: f64,
    field: &CoefficientField,
    stiffness: &SparseOperator,
) -> Result<(BasisHeader, MultiscaleBasis), FormatError> {
    let mut r = Reader::new(bytes, BASIS_MAGIC)?;
    let nc = r.usize()?;
    let nf = r.usize()?;
    let l = r.usize()?;
    let m = r.usize()?;
    let dofs = r.usize()?;
    let cols = r.usize()?;
    let header = BasisHeader {
        nc,
        nf_per_block: nf,
        modes_per_block: l,
        m,
        gamma: r.f64()?,
        kappa_checksum: r.u64()?,
    };
    if nc != mesh.nc() || nf != mesh.nf_per_block() {
        return Err(FormatError::Incompatible(format!("nc = {nc}, nf_per_block = {nf}")));
    }
    if dofs != mesh.num_dofs() || cols != mesh.num_blocks() * l || l == 0 {
        return Err(FormatError::Header(format!("{dofs} dofs and {cols} columns for L = {l}")));
    }
    if header.gamma.to_bits() != gamma.to_bits() {
        return Err(FormatError::Incompatible(format!("gamma = {}", header.gamma)));
    }
    if header.kappa_checksum != field_checksum(field) {
        return Err(FormatError::Incompatible("a different coefficient field".into()));
    }
    let phi = r.f64s(dofs * cols)?;
    let psi = r.f64s(dofs * cols)?;
    let _lambda = r.f64()?;
    let npb = mesh.nodes_per_block();
    let mut blocks = Vec::with_capacity(mesh.num_blocks());
    for b in 0..mesh.num_blocks() {
        let eigenvalues = r.f64s(npb)?;
        let modes = (0..l)
            .map(|j| {
                let col = &phi[(b * l + j) * dofs..(b * l + j + 1) * dofs];
                col[b * npb..(b + 1) * npb].to_vec()
            })
            .collect();
        blocks.push(BlockSpectralBasis {
            block: b,
            eigenvalues,
            modes,
        });
    }
    r.finish()?;
    let test = build_test_space(mesh, blocks)?;
    let trial = TrialBasis::from_dense_column_major(mesh, l, m, &psi)?;
    let coarse_stiffness = build_coarse_operator(&trial, stiffness);
    Ok((
        header,
        MultiscaleBasis {
            test,
            trial,
            coarse_stiffness,
        },
    ))
}

pub fn write_basis(path: &Path, mesh: &MeshHierarchy, basis: &MultiscaleBasis, gamma: f64, field: &CoefficientField) -> Result<(), FormatError> {
    fs::write(path, encode_basis(mesh, basis, gamma, field)).map_err(io_err(path))
}

pub fn read_basis(
    path: &Path,
    mesh: &MeshHierarchy,
    gamma: f64,
    field: &CoefficientField,
    stiffness: &SparseOperator,
) -> Result<(BasisHeader, MultiscaleBasis), FormatError> {
    decode_basis(&fs::read(path).map_err(io_err(path))?, mesh, gamma, field, stiffness)
}

/// A DG field at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSnapshot {
    pub nc: usize,
    pub nf_per_block: usize,
    pub step: usize,
    pub time: f64,
    pub values: Vec<f64>,
}

impl FieldSnapshot {
    pub fn mesh(&self) -> Result<MeshHierarchy, FormatError> {
        Ok(MeshHierarchy::new(self.nc, self.nf_per_block)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + 8 * self.values.len());
        out.extend_from_slice(FIELD_MAGIC);
        put_u64(&mut out, self.nc);
        put_u64(&mut out, self.nf_per_block);
        put_u64(&mut out, self.step);
        put_f64s(&mut out, &[self.time]);
        put_u64(&mut out, self.values.len());
        put_f64s(&mut out, &self.values);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes, FIELD_MAGIC)?;
        let nc = r.usize()?;
        let nf_per_block = r.usize()?;
        let step = r.usize()?;
        let time = r.f64()?;
        let len = r.usize()?;
        let expected = nc
            .checked_mul(nc)
            .and_then(|b| b.checked_mul((nf_per_block + 1) * (nf_per_block + 1)))
            .ok_or_else(|| FormatError::Header("dimensions overflow".into()))?;
        if len != expected {
            return Err(FormatError::Header(format!("{len} values for nc = {nc}, nf_per_block = {nf_per_block}")));
        }
        let values = r.f64s(len)?;
        r.finish()?;
        Ok(Self {
            nc,
            nf_per_block,
            step,
            time,
            values,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        fs::write(path, self.encode()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        Self::decode(&fs::read(path).map_err(io_err(path))?)
    }
}

/// Averages duplicated DG dofs onto the `(nc·nf+1)²` lattice, row-major from the bottom.
pub fn lattice_average(mesh: &MeshHierarchy, values: &[f64]) -> Vec<f64> {
    let n = mesh.cells_per_dim() + 1;
    let mut sum = vec![0.0; n * n];
    let mut count = vec![0u32; n * n];
    for (d, v) in values.iter().enumerate() {
        let (i, j) = mesh.dof_lattice(d);
        sum[j * n + i] += v;
        count[j * n + i] += 1;
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect()
}

/// Legacy VTK structured-points ASCII with node-averaged values.
pub fn write_structured_points<W: Write>(mut w: W, snap: &FieldSnapshot) -> Result<(), FormatError> {
    let mesh = snap.mesh()?;
    let n = mesh.cells_per_dim() + 1;
    let h = mesh.fine_size();
    let avg = lattice_average(&mesh, &snap.values);
    let wr = |e: io::Error| FormatError::Io {
        path: "<output>".into(),
        source: e,
    };
    let mut text = String::with_capacity(avg.len() * 24 + 256);
    text.push_str("# vtk DataFile Version 3.0\n");
    text.push_str(&format!("cemdg field step {} t {}\n", snap.step, snap.time));
    text.push_str("ASCII\nDATASET STRUCTURED_POINTS\n");
    text.push_str(&format!("DIMENSIONS {n} {n} 1\nORIGIN 0 0 0\nSPACING {h} {h} 1\n"));
    text.push_str(&format!("POINT_DATA {}\nSCALARS u double 1\nLOOKUP_TABLE default\n", n * n));
    for v in &avg {
        text.push_str(&format!("{v:e}\n"));
    }
    w.write_all(text.as_bytes()).map_err(wr)
}

/// One line per DG dof: `dof,block,x,y,value`.
pub fn write_raw_dofs<W: Write>(mut w: W, snap: &FieldSnapshot) -> Result<(), FormatError> {
    let mesh = snap.mesh()?;
    let mut text = String::with_capacity(snap.values.len() * 48);
    text.push_str("dof,block,x,y,value\n");
    for (d, v) in snap.values.iter().enumerate() {
        let [x, y] = mesh.dof_coords(d);
        text.push_str(&format!("{d},{},{x},{y},{v:e}\n", mesh.dof_block(d)));
    }
    w.write_all(text.as_bytes()).map_err(|e| FormatError::Io {
        path: "<output>".into(),
        source: e,
    })
}

/// `block,j,lambda` for the kept modes and the first excluded one (`j` from 1).
pub fn write_eigenvalue_csv<W: Write>(mut w: W, basis: &MultiscaleBasis) -> io::Result<()> {
    writeln!(w, "block,j,lambda")?;
    for b in basis.test.blocks() {
        let ev = b.reported_eigenvalues();
        for (j, lambda) in ev.iter().take(b.num_modes() + 1).enumerate() {
            writeln!(w, "{},{},{}", b.block, j + 1, format_float(*lambda))?;
        }
    }
    Ok(())
}

/// `n,time,energy,magnitude`, one line per half step `n + 1/2`.
pub fn write_energy_csv<W: Write>(mut w: W, trace: &[EnergySample], tau: f64) -> io::Result<()> {
    writeln!(w, "n,time,energy,magnitude")?;
    for s in trace {
        writeln!(
            w,
            "{},{},{},{}",
            s.n,
            format_float((s.n as f64 + 0.5) * tau),
            format_float(s.energy),
            format_float(s.magnitude)
        )?;
    }
    Ok(())
}

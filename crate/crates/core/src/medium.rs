//! Heterogeneous coefficient fields, piecewise constant per fine cell.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{BlockId, CoarseEdge, MeshHierarchy};

pub const BINARY_RASTER_MAGIC: &[u8; 8] = b"CEMWRAST";

#[derive(Debug, Error)]
pub enum MediumError {
    #[error("background value must be positive, got {0}")]
    NonPositiveBackground(f64),
    #[error("contrast must be >= 1, got {0}")]
    InvalidContrast(f64),
    #[error("coefficient values must be positive and finite (entry {index} = {value})")]
    NonPositiveValue { index: usize, value: f64 },
    #[error("malformed raster header: {0}")]
    MalformedHeader(String),
    #[error("raster declares {declared} values but contains {actual}")]
    DimensionMismatch { declared: usize, actual: usize },
    #[error("cannot parse raster value {token:?}")]
    BadValue { token: String },
    #[error("field has {actual} values but the mesh has {expected} cells")]
    CellCountMismatch { expected: usize, actual: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// κ with its global bounds `kappa0 <= κ <= kappa1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    values: Vec<f64>,
    kappa0: f64,
    kappa1: f64,
}

impl CoefficientField {
    /// Values are indexed like [`MeshHierarchy::cell_id`].
    pub fn new(values: Vec<f64>) -> Result<Self, MediumError> {
        let mut kappa0 = f64::INFINITY;
        let mut kappa1 = 0.0_f64;
        for (index, &value) in values.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(MediumError::NonPositiveValue { index, value });
            }
            kappa0 = kappa0.min(value);
            kappa1 = kappa1.max(value);
        }
        Ok(Self { values, kappa0, kappa1 })
    }

    pub fn for_mesh(mesh: &MeshHierarchy, values: Vec<f64>) -> Result<Self, MediumError> {
        if values.len() != mesh.num_cells() {
            return Err(MediumError::CellCountMismatch {
                expected: mesh.num_cells(),
                actual: values.len(),
            });
        }
        Self::new(values)
    }

    pub fn constant(mesh: &MeshHierarchy, value: f64) -> Result<Self, MediumError> {
        Self::new(vec![value; mesh.num_cells()])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, cell: usize) -> f64 {
        self.values[cell]
    }

    pub fn kappa0(&self) -> f64 {
        self.kappa0
    }

    pub fn kappa1(&self) -> f64 {
        self.kappa1
    }

    pub fn contrast(&self) -> f64 {
        self.kappa1 / self.kappa0
    }

    /// Uniformly scaled copy.
    pub fn scaled(&self, factor: f64) -> Result<Self, MediumError> {
        Self::new(self.values.iter().map(|v| v * factor).collect())
    }

    pub fn check_mesh(&self, mesh: &MeshHierarchy) -> Result<(), MediumError> {
        if self.values.len() == mesh.num_cells() {
            Ok(())
        } else {
            Err(MediumError::CellCountMismatch {
                expected: mesh.num_cells(),
                actual: self.values.len(),
            })
        }
    }
}

/// Maximum of κ over the fine cells of a block.
pub fn block_kappa_max(field: &CoefficientField, mesh: &MeshHierarchy, block: BlockId) -> f64 {
    mesh.block_cells(block)
        .map(|c| field.value(c))
        .fold(0.0, f64::max)
}

/// Penalty weight on a coarse edge: mean of the adjacent block maxima, or the
/// single block maximum on the boundary.
pub fn edge_kappa_bar(field: &CoefficientField, mesh: &MeshHierarchy, edge: &CoarseEdge) -> f64 {
    let plus = block_kappa_max(field, mesh, edge.plus_block);
    match edge.minus_block {
        Some(minus) => 0.5 * (plus + block_kappa_max(field, mesh, minus)),
        None => plus,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// Randomly placed disks of high value.
    Inclusions,
    /// Meandering horizontal bands of high value.
    Channels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub background: f64,
    pub contrast: f64,
    pub pattern: Pattern,
    pub seed: u64,
}

/// Deterministic two-valued medium with `kappa1 / kappa0 == contrast`.
pub fn synthetic_field(mesh: &MeshHierarchy, spec: &SyntheticSpec) -> Result<CoefficientField, MediumError> {
    if !(spec.background > 0.0 && spec.background.is_finite()) {
        return Err(MediumError::NonPositiveBackground(spec.background));
    }
    if !(spec.contrast >= 1.0 && spec.contrast.is_finite()) {
        return Err(MediumError::InvalidContrast(spec.contrast));
    }
    let n = mesh.cells_per_dim();
    let high = spec.background * spec.contrast;
    if spec.contrast == 1.0 {
        return CoefficientField::constant(mesh, spec.background);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut inside = vec![false; mesh.num_cells()];
    let h = mesh.fine_size();
    match spec.pattern {
        Pattern::Inclusions => {
            let count = 24;
            let disks: Vec<([f64; 2], f64)> = (0..count)
                .map(|_| {
                    let c = [rng.random::<f64>(), rng.random::<f64>()];
                    let r = 0.02 + 0.05 * rng.random::<f64>();
                    (c, r.max(0.75 * h))
                })
                .collect();
            for (cell, flag) in inside.iter_mut().enumerate() {
                let p = mesh.cell_center(cell);
                *flag = disks.iter().any(|(c, r)| {
                    let dx = p[0] - c[0];
                    let dy = p[1] - c[1];
                    dx * dx + dy * dy <= r * r
                });
            }
        }
        Pattern::Channels => {
            let count = 4;
            let bands: Vec<(f64, f64, f64, f64, f64)> = (0..count)
                .map(|k| {
                    let y0 = (k as f64 + 0.25 + 0.5 * rng.random::<f64>()) / count as f64;
                    let amp = 0.04 * rng.random::<f64>();
                    let freq = 1.0 + 2.0 * rng.random::<f64>();
                    let phase = std::f64::consts::TAU * rng.random::<f64>();
                    let width = (0.01 + 0.02 * rng.random::<f64>()).max(h);
                    (y0, amp, freq, phase, width)
                })
                .collect();
            for (cell, flag) in inside.iter_mut().enumerate() {
                let p = mesh.cell_center(cell);
                *flag = bands.iter().any(|&(y0, amp, freq, phase, width)| {
                    let yc = y0 + amp * (std::f64::consts::TAU * freq * p[0] + phase).sin();
                    (p[1] - yc).abs() <= 0.5 * width
                });
            }
        }
    }
    // Keep the contrast exact even when the random features miss every cell
    // center (coarse fine grids) or cover all of them.
    if !inside.iter().any(|&f| f) {
        inside[n * (n / 2) + n / 2] = true;
    }
    if inside.iter().all(|&f| f) {
        inside[0] = false;
    }
    let values = inside.iter().map(|&f| if f { high } else { spec.background }).collect();
    CoefficientField::new(values)
}

/// A rectangular grid of samples covering the unit square, row-major with the
/// first row at the bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterFormat {
    Ascii,
    Binary,
}

impl Raster {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self, MediumError> {
        if nx == 0 || ny == 0 {
            return Err(MediumError::MalformedHeader(format!("raster dims {nx}x{ny} must be >= 1")));
        }
        if values.len() != nx * ny {
            return Err(MediumError::DimensionMismatch {
                declared: nx * ny,
                actual: values.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(MediumError::NonPositiveValue { index, value });
        }
        Ok(Self { nx, ny, values })
    }

    pub fn parse_ascii(text: &str) -> Result<Self, MediumError> {
        let mut lines = text.lines();
        let header = lines
            .by_ref()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| MediumError::MalformedHeader("empty file".into()))?;
        let dims: Vec<&str> = header.split_whitespace().collect();
        if dims.len() != 2 {
            return Err(MediumError::MalformedHeader(format!("expected `nx ny`, got {header:?}")));
        }
        let parse_dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| MediumError::MalformedHeader(format!("bad dimension {s:?}")))
        };
        let nx = parse_dim(dims[0])?;
        let ny = parse_dim(dims[1])?;
        let mut values = Vec::with_capacity(nx.saturating_mul(ny).min(1 << 24));
        for line in lines {
            for token in line.split_whitespace() {
                let v = token.parse::<f64>().map_err(|_| MediumError::BadValue {
                    token: token.to_string(),
                })?;
                values.push(v);
            }
        }
        Self::new(nx, ny, values)
    }

    pub fn to_ascii(&self) -> String {
        let mut out = format!("{} {}\n", self.nx, self.ny);
        for row in self.values.chunks(self.nx) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse_binary(bytes: &[u8]) -> Result<Self, MediumError> {
        if bytes.len() < 16 || &bytes[..8] != BINARY_RASTER_MAGIC {
            return Err(MediumError::MalformedHeader("missing CEMWRAST magic".into()));
        }
        let nx = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let ny = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() % 8 != 0 {
            return Err(MediumError::MalformedHeader("trailing partial value".into()));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(nx, ny, values)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        out.extend_from_slice(BINARY_RASTER_MAGIC);
        out.extend_from_slice(&(self.nx as u32).to_le_bytes());
        out.extend_from_slice(&(self.ny as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn read(path: &Path, format: RasterFormat) -> Result<Self, MediumError> {
        let io_err = |source| MediumError::Io {
            path: path.display().to_string(),
            source,
        };
        match format {
            RasterFormat::Ascii => Self::parse_ascii(&fs::read_to_string(path).map_err(io_err)?),
            RasterFormat::Binary => Self::parse_binary(&fs::read(path).map_err(io_err)?),
        }
    }

    /// Nearest-sample resampling at fine cell centers. The sample whose
    /// raster cell contains the center is chosen; centers on a raster cell
    /// boundary go to the upper/right sample.
    pub fn resample(&self, mesh: &MeshHierarchy) -> Result<CoefficientField, MediumError> {
        let n = mesh.cells_per_dim();
        let mut values = Vec::with_capacity(n * n);
        for gy in 0..n {
            let yc = (gy as f64 + 0.5) / n as f64;
            let j = ((yc * self.ny as f64).floor() as usize).min(self.ny - 1);
            for gx in 0..n {
                let xc = (gx as f64 + 0.5) / n as f64;
                let i = ((xc * self.nx as f64).floor() as usize).min(self.nx - 1);
                values.push(self.values[j * self.nx + i]);
            }
        }
        CoefficientField::new(values)
    }
}

pub fn load_raster(path: &Path, format: RasterFormat, mesh: &MeshHierarchy) -> Result<CoefficientField, MediumError> {
    Raster::read(path, format)?.resample(mesh)
}

/// Where a coefficient field comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum MediumSpec {
    Constant(f64),
    Synthetic(SyntheticSpec),
    Raster {
        path: std::path::PathBuf,
        format: RasterFormat,
        /// Multiplies every sample.
        scale: f64,
    },
}

impl MediumSpec {
    pub fn build(&self, mesh: &MeshHierarchy) -> Result<CoefficientField, MediumError> {
        match self {
            MediumSpec::Constant(v) => CoefficientField::constant(mesh, *v),
            MediumSpec::Synthetic(spec) => synthetic_field(mesh, spec),
            MediumSpec::Raster { path, format, scale } => load_raster(path, *format, mesh)?.scaled(*scale),
        }
    }
}

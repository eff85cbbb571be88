//! Leapfrog time stepping at the coarse and fine level, sources, initial
//! data and the discrete energy.

use std::fmt;
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Llt;
use faer::{MatMut, Side};
use thiserror::Error;

use crate::assembly::{assemble_block_mass, q1_shape};
use crate::cem::MultiscaleBasis;
use crate::grid::MeshHierarchy;
use crate::sparse::SparseOperator;
use crate::spectral::dot;

pub const DEFAULT_TAU: f64 = 1e-4;
pub const DEFAULT_FINAL_TIME: f64 = 0.2;
pub const DEFAULT_F0: f64 = 20.0;
pub const DEFAULT_SOURCE_WIDTH: f64 = 1.0 / 256.0;

const POWER_TOL: f64 = 1e-6;
const POWER_MAX_ITERS: usize = 20_000;

#[derive(Debug, Error)]
pub enum WaveError {
    #[error("source load is not finite (spatial exponent overflows; try a negative spatial sign or a wider source)")]
    NonFiniteLoad,
    #[error("mass matrix factorization failed")]
    MassFactorization,
    #[error("time step {tau:e} is not below the stability limit {tau_max:e}")]
    Unstable { tau: f64, tau_max: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid source parameters: {0}")]
    InvalidSource(String),
}

/// Sign of the exponent of the spatial Ricker factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpatialSign {
    /// `exp(+r²/(4h²))`, growing away from the center.
    #[default]
    AsPrinted,
    /// `exp(−r²/(4h²))`, the usual Gaussian.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ricker {
    pub f0: f64,
    pub width: f64,
    pub center: [f64; 2],
    pub sign: SpatialSign,
}

impl Default for Ricker {
    fn default() -> Self {
        Self {
            f0: DEFAULT_F0,
            width: DEFAULT_SOURCE_WIDTH,
            center: [0.5, 0.5],
            sign: SpatialSign::AsPrinted,
        }
    }
}

impl Ricker {
    pub fn validate(&self) -> Result<(), WaveError> {
        if !(self.f0 > 0.0 && self.f0.is_finite()) {
            return Err(WaveError::InvalidSource(format!("f0 must be positive, got {}", self.f0)));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(WaveError::InvalidSource(format!("width must be positive, got {}", self.width)));
        }
        Ok(())
    }

    pub fn temporal(&self, t: f64) -> f64 {
        let s = t - 2.0 / self.f0;
        let pf = std::f64::consts::PI * self.f0;
        s / (4.0 * self.width * self.width) * (-pf * pf * s * s).exp()
    }

    pub fn spatial(&self, x: f64, y: f64) -> f64 {
        let r2 = (x - self.center[0]).powi(2) + (y - self.center[1]).powi(2);
        let e = r2 / (4.0 * self.width * self.width);
        match self.sign {
            SpatialSign::AsPrinted => e.exp(),
            SpatialSign::Negative => (-e).exp(),
        }
    }

    pub fn eval(&self, t: f64, x: f64, y: f64) -> f64 {
        self.temporal(t) * self.spatial(x, y)
    }
}

/// Ricker wavelet centered at `(0.5, 0.5)`.
pub fn ricker(t: f64, x: f64, y: f64, f0: f64, width: f64, sign: SpatialSign) -> f64 {
    Ricker {
        f0,
        width,
        center: [0.5, 0.5],
        sign,
    }
    .eval(t, x, y)
}

pub type SourceFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

#[derive(Clone, Default)]
pub enum Source {
    #[default]
    None,
    Ricker(Ricker),
    Custom(SourceFn),
}

impl fmt::Debug for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::None => f.write_str("None"),
            Source::Ricker(r) => f.debug_tuple("Ricker").field(r).finish(),
            Source::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// `∫ g φ_i` for every dof, with 2×2 Gauss points per fine cell.
pub fn load_vector(mesh: &MeshHierarchy, g: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    const P: [f64; 2] = [0.5 - 0.288_675_134_594_812_9, 0.5 + 0.288_675_134_594_812_9];
    let h = mesh.fine_size();
    let w = 0.25 * h * h;
    let mut out = vec![0.0; mesh.num_dofs()];
    for cell in 0..mesh.num_cells() {
        let o = mesh.cell_origin(cell);
        let nodes = mesh.cell_nodes(cell);
        for &xi in &P {
            for &eta in &P {
                let val = w * g(o[0] + xi * h, o[1] + eta * h);
                for (n, s) in nodes.iter().zip(q1_shape(xi, eta)) {
                    out[*n] += val * s;
                }
            }
        }
    }
    out
}

/// Time-dependent fine load vector `Fⁿ`.
#[derive(Clone)]
pub enum Forcing {
    None,
    /// `F(t) = g(t) S` with a fixed spatial load `S`.
    Separable { ricker: Ricker, spatial: Vec<f64> },
    General { mesh: Arc<MeshHierarchy>, source: SourceFn },
}

impl Forcing {
    pub fn new(mesh: &MeshHierarchy, source: &Source) -> Result<Self, WaveError> {
        match source {
            Source::None => Ok(Forcing::None),
            Source::Ricker(r) => {
                r.validate()?;
                let spatial = load_vector(mesh, |x, y| r.spatial(x, y));
                if spatial.iter().any(|v| !v.is_finite()) {
                    return Err(WaveError::NonFiniteLoad);
                }
                Ok(Forcing::Separable { ricker: *r, spatial })
            }
            Source::Custom(f) => Ok(Forcing::General {
                mesh: Arc::new(mesh.clone()),
                source: f.clone(),
            }),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Forcing::None)
    }

    /// Writes `F(t)` into `out`; returns false (leaving `out` untouched) when there is no source.
    pub fn load_into(&self, t: f64, out: &mut [f64]) -> bool {
        match self {
            Forcing::None => false,
            Forcing::Separable { ricker, spatial } => {
                let g = ricker.temporal(t);
                out.iter_mut().zip(spatial).for_each(|(o, s)| *o = g * s);
                true
            }
            Forcing::General { mesh, source } => {
                out.copy_from_slice(&load_vector(mesh, |x, y| source(t, x, y)));
                true
            }
        }
    }

    pub fn load(&self, t: f64, dofs: usize) -> Vec<f64> {
        let mut v = vec![0.0; dofs];
        self.load_into(t, &mut v);
        v
    }
}

/// Coarse projection of a forcing, `ΦᵀF(t)`, cheap for separable sources.
#[derive(Clone)]
pub enum CoarseForcing {
    None,
    Separable { ricker: Ricker, coeffs: Vec<f64> },
    General { forcing: Forcing, dofs: usize },
}

impl CoarseForcing {
    pub fn new(forcing: &Forcing, basis: &MultiscaleBasis) -> Self {
        match forcing {
            Forcing::None => CoarseForcing::None,
            Forcing::Separable { ricker, spatial } => CoarseForcing::Separable {
                ricker: *ricker,
                coeffs: basis.test.load_coefficients(spatial),
            },
            Forcing::General { .. } => CoarseForcing::General {
                forcing: forcing.clone(),
                dofs: basis.test.num_dofs(),
            },
        }
    }

    pub fn coefficients(&self, t: f64, basis: &MultiscaleBasis) -> Option<Vec<f64>> {
        match self {
            CoarseForcing::None => None,
            CoarseForcing::Separable { ricker, coeffs } => {
                let g = ricker.temporal(t);
                Some(coeffs.iter().map(|c| g * c).collect())
            }
            CoarseForcing::General { forcing, dofs } => Some(basis.test.load_coefficients(&forcing.load(t, *dofs))),
        }
    }
}

/// Solves with the block-diagonal DG mass matrix using one shared factorization.
pub struct MassSolver {
    nodes_per_block: usize,
    llt: Llt<usize, f64>,
}

impl fmt::Debug for MassSolver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MassSolver").field("nodes_per_block", &self.nodes_per_block).finish()
    }
}

impl MassSolver {
    pub fn new(mesh: &MeshHierarchy) -> Result<Self, WaveError> {
        let block = assemble_block_mass(mesh);
        let llt = block
            .to_faer_lower()
            .sp_cholesky(Side::Lower)
            .map_err(|_| WaveError::MassFactorization)?;
        Ok(Self {
            nodes_per_block: mesh.nodes_per_block(),
            llt,
        })
    }

    /// `v ← M⁻¹v`; dofs are block-contiguous so `v` reshapes to one column per block.
    pub fn solve_in_place(&self, v: &mut [f64]) {
        let npb = self.nodes_per_block;
        let cols = v.len() / npb;
        let mat = MatMut::from_column_major_slice_mut(v, npb, cols);
        self.llt.solve_in_place(mat);
    }
}

/// L² projection of an analytic function onto `V_h`.
pub fn project_l2(mesh: &MeshHierarchy, mass: &MassSolver, g: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut v = load_vector(mesh, g);
    mass.solve_in_place(&mut v);
    v
}

/// Nodal interpolation of an analytic function onto `V_h`.
pub fn interpolate(mesh: &MeshHierarchy, g: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    (0..mesh.num_dofs())
        .map(|d| {
            let [x, y] = mesh.dof_coords(d);
            g(x, y)
        })
        .collect()
}

/// `‖v − g‖_{L²}` with 3×3 Gauss points per fine cell.
pub fn l2_distance_to(mesh: &MeshHierarchy, v: &[f64], g: impl Fn(f64, f64) -> f64) -> f64 {
    let s = (0.6f64).sqrt() / 2.0;
    let p = [(0.5 - s, 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.5 + s, 5.0 / 18.0)];
    let h = mesh.fine_size();
    let mut acc = 0.0;
    for cell in 0..mesh.num_cells() {
        let o = mesh.cell_origin(cell);
        let nodes = mesh.cell_nodes(cell);
        for &(xi, wx) in &p {
            for &(eta, wy) in &p {
                let uh: f64 = nodes.iter().zip(q1_shape(xi, eta)).map(|(n, s)| v[*n] * s).sum();
                let d = uh - g(o[0] + xi * h, o[1] + eta * h);
                acc += wx * wy * h * h * d * d;
            }
        }
    }
    acc.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Coarse,
    Fine,
}

/// Two consecutive time levels of a leapfrog run.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveState {
    pub level: Level,
    pub prev: Vec<f64>,
    pub curr: Vec<f64>,
    /// Index of `curr`.
    pub n: usize,
    pub tau: f64,
}

impl WaveState {
    pub fn time(&self) -> f64 {
        self.n as f64 * self.tau
    }

    /// Swaps the two levels, which runs the leapfrog recursion backwards.
    pub fn reversed(&self) -> Self {
        Self {
            level: self.level,
            prev: self.curr.clone(),
            curr: self.prev.clone(),
            n: self.n,
            tau: self.tau,
        }
    }
}

/// How the coarse initial coefficients are projected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitProjection {
    /// `ΦᵀM(·)`.
    #[default]
    Test,
    /// `(ΨᵀMΨ)⁻¹ΨᵀM(·)`, the L² projection onto the trial space.
    L2Gram,
}

/// Which stiffness term enters the second initial level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitStiffness {
    /// `ΨᵀAΨ U⁰`.
    #[default]
    Coarse,
    /// `ΨᵀA u₀` with the fine initial field.
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InitOptions {
    pub projection: InitProjection,
    pub stiffness: InitStiffness,
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn check_len(v: &[f64], expected: usize) -> Result<(), WaveError> {
    if v.len() != expected {
        return Err(WaveError::DimensionMismatch { expected, got: v.len() });
    }
    Ok(())
}

/// `(U⁰, U¹)` from fine initial data `u₀, v₀` and the fine load `F⁰`.
#[allow(clippy::too_many_arguments)]
pub fn init_coarse(
    u0: &[f64],
    v0: &[f64],
    load0: Option<&[f64]>,
    basis: &MultiscaleBasis,
    stiffness: &SparseOperator,
    mass: &SparseOperator,
    tau: f64,
    options: InitOptions,
) -> Result<WaveState, WaveError> {
    let n = basis.test.num_dofs();
    check_len(u0, n)?;
    check_len(v0, n)?;
    if let Some(f) = load0 {
        check_len(f, n)?;
    }
    let mut data = u0.to_vec();
    axpy(&mut data, tau, v0);
    let (c0, mut c1) = match options.projection {
        InitProjection::Test => {
            let mut c1 = basis.test.coefficients(&data);
            if let Some(f) = load0 {
                axpy(&mut c1, 0.5 * tau * tau, &basis.test.load_coefficients(f));
            }
            (basis.test.coefficients(u0), c1)
        }
        InitProjection::L2Gram => {
            let gram = crate::cem::build_gram(basis, mass);
            let llt = gram
                .to_faer_lower()
                .sp_cholesky(Side::Lower)
                .map_err(|_| WaveError::MassFactorization)?;
            let project = |rhs: Vec<f64>| {
                let mut r = rhs;
                let len = r.len();
                llt.solve_in_place(MatMut::from_column_major_slice_mut(&mut r, len, 1));
                r
            };
            let mut rhs1 = basis.trial.transpose_mul(&mass.mul_vec(&data));
            if let Some(f) = load0 {
                axpy(&mut rhs1, 0.5 * tau * tau, &basis.trial.transpose_mul(f));
            }
            (project(basis.trial.transpose_mul(&mass.mul_vec(u0))), project(rhs1))
        }
    };
    let k_term = match options.stiffness {
        InitStiffness::Coarse => basis.coarse_stiffness.mul_vec(&c0),
        InitStiffness::Fine => basis.trial.transpose_mul(&stiffness.mul_vec(u0)),
    };
    axpy(&mut c1, -0.5 * tau * tau, &k_term);
    Ok(WaveState {
        level: Level::Coarse,
        prev: c0,
        curr: c1,
        n: 1,
        tau,
    })
}

/// `(U⁰, U¹)` for the fine reference scheme.
pub fn init_fine(
    u0: &[f64],
    v0: &[f64],
    load0: Option<&[f64]>,
    stiffness: &SparseOperator,
    mass: &MassSolver,
    tau: f64,
) -> Result<WaveState, WaveError> {
    let n = stiffness.dim();
    check_len(u0, n)?;
    check_len(v0, n)?;
    let mut acc = stiffness.mul_vec(u0);
    acc.iter_mut().for_each(|v| *v = -*v);
    if let Some(f) = load0 {
        check_len(f, n)?;
        axpy(&mut acc, 1.0, f);
    }
    mass.solve_in_place(&mut acc);
    let mut u1 = u0.to_vec();
    axpy(&mut u1, tau, v0);
    axpy(&mut u1, 0.5 * tau * tau, &acc);
    Ok(WaveState {
        level: Level::Fine,
        prev: u0.to_vec(),
        curr: u1,
        n: 1,
        tau,
    })
}

/// `U^{n+1} = 2Uⁿ − U^{n−1} + τ²(ΦᵀFⁿ − K_c Uⁿ)`; `load_coeffs` is `ΦᵀFⁿ`.
pub fn step_coarse(state: &mut WaveState, coarse_stiffness: &SparseOperator, load_coeffs: Option<&[f64]>, work: &mut Vec<f64>) {
    debug_assert_eq!(state.level, Level::Coarse);
    let tau2 = state.tau * state.tau;
    work.resize(state.curr.len(), 0.0);
    coarse_stiffness.mul_vec_into(&state.curr, work);
    for i in 0..work.len() {
        let f = load_coeffs.map_or(0.0, |l| l[i]);
        work[i] = 2.0 * state.curr[i] - state.prev[i] + tau2 * (f - work[i]);
    }
    std::mem::swap(&mut state.prev, &mut state.curr);
    std::mem::swap(&mut state.curr, work);
    state.n += 1;
}

/// `M U^{n+1} = M(2Uⁿ − U^{n−1}) + τ²(Fⁿ − AUⁿ)`.
pub fn step_fine(state: &mut WaveState, stiffness: &SparseOperator, mass: &MassSolver, load: Option<&[f64]>, work: &mut Vec<f64>) {
    debug_assert_eq!(state.level, Level::Fine);
    let tau2 = state.tau * state.tau;
    work.resize(state.curr.len(), 0.0);
    stiffness.mul_vec_into(&state.curr, work);
    match load {
        Some(f) => work.iter_mut().zip(f).for_each(|(w, f)| *w = f - *w),
        None => work.iter_mut().for_each(|w| *w = -*w),
    }
    mass.solve_in_place(work);
    for i in 0..work.len() {
        work[i] = 2.0 * state.curr[i] - state.prev[i] + tau2 * work[i];
    }
    std::mem::swap(&mut state.prev, &mut state.curr);
    std::mem::swap(&mut state.curr, work);
    state.n += 1;
}

/// Discrete energy at a half step and its positive-definite part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySample {
    /// Index `n` of the pair `(vⁿ, vⁿ⁺¹)`.
    pub n: usize,
    pub energy: f64,
    /// `½‖d‖² + ½a(m, m)` without the negative `τ²` correction; grows when the scheme is unstable.
    pub magnitude: f64,
}

/// `E^{n+1/2} = ½‖d‖² − τ²/8 a(d, d) + ½ a(m, m)` with `d = (vⁿ⁺¹ − vⁿ)/τ`, `m = (vⁿ⁺¹ + vⁿ)/2`.
///
/// `norm_sq` evaluates `‖·‖²` (Euclidean at the coarse level, `M` at the fine level).
pub fn discrete_energy(prev: &[f64], next: &[f64], tau: f64, stiffness: &SparseOperator, norm_sq: impl Fn(&[f64]) -> f64) -> (f64, f64) {
    let d: Vec<f64> = next.iter().zip(prev).map(|(a, b)| (a - b) / tau).collect();
    let m: Vec<f64> = next.iter().zip(prev).map(|(a, b)| 0.5 * (a + b)).collect();
    let kin = 0.5 * norm_sq(&d);
    let pot = 0.5 * stiffness.quad_form(&m);
    let corr = tau * tau / 8.0 * stiffness.quad_form(&d);
    (kin - corr + pot, kin + pot)
}

pub fn coarse_energy(state: &WaveState, coarse_stiffness: &SparseOperator) -> EnergySample {
    let (energy, magnitude) = discrete_energy(&state.prev, &state.curr, state.tau, coarse_stiffness, |v| dot(v, v));
    EnergySample {
        n: state.n - 1,
        energy,
        magnitude,
    }
}

pub fn fine_energy(state: &WaveState, stiffness: &SparseOperator, mass: &SparseOperator) -> EnergySample {
    let (energy, magnitude) = discrete_energy(&state.prev, &state.curr, state.tau, stiffness, |v| mass.quad_form(v));
    EnergySample {
        n: state.n - 1,
        energy,
        magnitude,
    }
}

/// Stability limit from the largest eigenvalue of a symmetric PSD operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CflEstimate {
    pub lambda_max: f64,
    pub tau_max: f64,
    pub iterations: usize,
    /// False when the power iteration hit its cap and the Gershgorin bound was used.
    pub converged: bool,
}

/// `τ_max = 2/√λ_max` by power iteration, with a Gershgorin fallback.
pub fn estimate_cfl(op: &SparseOperator) -> CflEstimate {
    estimate_cfl_with(op, POWER_TOL, POWER_MAX_ITERS)
}

pub fn estimate_cfl_with(op: &SparseOperator, tol: f64, max_iters: usize) -> CflEstimate {
    use rand::{Rng, SeedableRng};
    let n = op.dim();
    let finish = |lambda: f64, iterations, converged| CflEstimate {
        lambda_max: lambda,
        tau_max: if lambda > 0.0 { 2.0 / lambda.sqrt() } else { f64::INFINITY },
        iterations,
        converged,
    };
    if n == 0 {
        return finish(0.0, 0, true);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let norm = dot(&x, &x).sqrt();
    x.iter_mut().for_each(|v| *v /= norm);
    let mut y = vec![0.0; n];
    for it in 1..=max_iters {
        op.mul_vec_into(&x, &mut y);
        let rho = dot(&x, &y);
        let res: f64 = y.iter().zip(&x).map(|(a, b)| (a - rho * b).powi(2)).sum::<f64>().sqrt();
        let ny = dot(&y, &y).sqrt();
        if ny == 0.0 {
            return finish(0.0, it, true);
        }
        if res <= tol * rho.abs() {
            return finish(rho, it, true);
        }
        x.iter_mut().zip(&y).for_each(|(a, b)| *a = b / ny);
    }
    log::warn!("power iteration did not converge in {max_iters} iterations; using the Gershgorin bound");
    finish(op.gershgorin_bound(), max_iters, false)
}

/// `τ/τ_max`, the computable stand-in for the stability ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub tau: f64,
    pub tau_max: f64,
    pub ratio: f64,
}

/// Refuses `τ ≥ τ_max` unless `allow_unstable` is set (then only warns).
pub fn check_stability(tau: f64, cfl: &CflEstimate, allow_unstable: bool) -> Result<StabilityReport, WaveError> {
    let report = StabilityReport {
        tau,
        tau_max: cfl.tau_max,
        ratio: tau / cfl.tau_max,
    };
    if report.ratio >= 1.0 {
        if !allow_unstable {
            return Err(WaveError::Unstable { tau, tau_max: cfl.tau_max });
        }
        log::warn!("time step {tau:e} exceeds the stability limit {:e}", cfl.tau_max);
    }
    Ok(report)
}

/// `ΨU`.
pub fn downscale(basis: &MultiscaleBasis, coeffs: &[f64]) -> Vec<f64> {
    basis.trial.downscale(coeffs)
}

/// Result of a run: final state, energy trace and snapshots.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: WaveState,
    pub energy: Vec<EnergySample>,
    /// `(n, vector at level n)`.
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    pub steps: usize,
    pub record_energy: bool,
    /// Keep a copy of `curr` every `stride` steps (and at the end).
    pub snapshot_stride: Option<usize>,
}

fn want_snapshot(opts: &RunOptions, n: usize) -> bool {
    opts.snapshot_stride.is_some_and(|s| s > 0 && n % s == 0) || (opts.snapshot_stride.is_some() && n == opts.steps)
}

/// Advances a coarse state until `state.n == options.steps`.
pub fn run_coarse(mut state: WaveState, basis: &MultiscaleBasis, forcing: &CoarseForcing, options: &RunOptions) -> RunOutput {
    let mut out = RunOutput {
        state: state.clone(),
        energy: Vec::new(),
        snapshots: Vec::new(),
    };
    if options.record_energy {
        out.energy.push(coarse_energy(&state, &basis.coarse_stiffness));
    }
    if want_snapshot(options, 0) {
        out.snapshots.push((state.n - 1, state.prev.clone()));
    }
    let mut work = Vec::new();
    while state.n < options.steps {
        let load = forcing.coefficients(state.time(), basis);
        step_coarse(&mut state, &basis.coarse_stiffness, load.as_deref(), &mut work);
        if options.record_energy {
            out.energy.push(coarse_energy(&state, &basis.coarse_stiffness));
        }
        if want_snapshot(options, state.n) {
            out.snapshots.push((state.n, state.curr.clone()));
        }
    }
    out.state = state;
    out
}

/// Advances a fine state until `state.n == options.steps`.
pub fn run_fine(
    mut state: WaveState,
    stiffness: &SparseOperator,
    mass: &SparseOperator,
    mass_solver: &MassSolver,
    forcing: &Forcing,
    options: &RunOptions,
) -> RunOutput {
    let mut out = RunOutput {
        state: state.clone(),
        energy: Vec::new(),
        snapshots: Vec::new(),
    };
    if options.record_energy {
        out.energy.push(fine_energy(&state, stiffness, mass));
    }
    let mut work = Vec::new();
    let mut load = vec![0.0; state.curr.len()];
    while state.n < options.steps {
        let has_load = forcing.load_into(state.time(), &mut load);
        step_fine(&mut state, stiffness, mass_solver, has_load.then_some(load.as_slice()), &mut work);
        if options.record_energy {
            out.energy.push(fine_energy(&state, stiffness, mass));
        }
        if want_snapshot(options, state.n) {
            out.snapshots.push((state.n, state.curr.clone()));
        }
    }
    out.state = state;
    out
}

/// Largest `|E^{n+1/2} − E^{1/2}| / |E^{1/2}|` over a trace.
pub fn max_energy_drift(trace: &[EnergySample]) -> f64 {
    let Some(first) = trace.first() else { return 0.0 };
    let e0 = first.energy;
    trace
        .iter()
        .map(|s| (s.energy - e0).abs() / e0.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Largest `magnitude / magnitude₀` over a trace.
pub fn max_energy_growth(trace: &[EnergySample]) -> f64 {
    let Some(first) = trace.first() else { return 1.0 };
    trace
        .iter()
        .map(|s| if s.magnitude.is_finite() { s.magnitude / first.magnitude } else { f64::INFINITY })
        .fold(0.0, f64::max)
}

//! Error metrics against the fine reference, convergence and localization
//! studies, and their CSV reports.

use std::io::{self, Write};
use std::time::Instant;

use thiserror::Error;

use crate::assembly::{assemble_anorm, assemble_ipdg, assemble_mass};
use crate::cem::{build_trial_basis, localization_error, solve_global_basis, CemError, MultiscaleBasis};
use crate::grid::{MeshError, MeshHierarchy};
use crate::medium::{CoefficientField, MediumError};
use crate::saddle::SaddleMethod;
use crate::sparse::SparseOperator;
use crate::spectral::{compute_test_space, SpectralError};
use crate::wavesim::{
    check_stability, estimate_cfl, init_coarse, init_fine, run_coarse, run_fine, CoarseForcing, Forcing,
    InitOptions, MassSolver, RunOptions, Source, WaveError,
};

pub const REPORT_HEADER: &str = "H,m,L,gamma,tau,energy_err_pct,l2_err_pct,order_est,basis_secs,solve_secs";

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Medium(#[from] MediumError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Cem(#[from] CemError),
    #[error(transparent)]
    Wave(#[from] WaveError),
    #[error("coarse size 1/{nc} does not divide the fine grid of {fine_cells} cells per dimension")]
    NonNesting { nc: usize, fine_cells: usize },
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// A relative error in percent, or the absolute error when the reference vanishes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeError {
    pub percent: f64,
    pub absolute: f64,
    /// Set when the reference norm is zero; `percent` then holds the absolute error.
    pub zero_reference: bool,
}

fn relative_error(reference: &[f64], approx: &[f64], op: &SparseOperator) -> Result<RelativeError, StudyError> {
    if reference.len() != approx.len() || op.dim() != reference.len() {
        return Err(StudyError::LengthMismatch(reference.len(), approx.len()));
    }
    let diff: Vec<f64> = reference.iter().zip(approx).map(|(a, b)| a - b).collect();
    let absolute = op.quad_form(&diff).max(0.0).sqrt();
    let denom = op.quad_form(reference).max(0.0).sqrt();
    Ok(if denom > 0.0 {
        RelativeError {
            percent: 100.0 * absolute / denom,
            absolute,
            zero_reference: false,
        }
    } else {
        RelativeError {
            percent: absolute,
            absolute,
            zero_reference: true,
        }
    })
}

/// `100 ‖u − u_ms‖_N / ‖u‖_N`.
pub fn energy_error(u_fine: &[f64], u_ms: &[f64], anorm: &SparseOperator) -> Result<RelativeError, StudyError> {
    relative_error(u_fine, u_ms, anorm)
}

/// `100 ‖u − u_ms‖_M / ‖u‖_M`.
pub fn l2_error(u_fine: &[f64], u_ms: &[f64], mass: &SparseOperator) -> Result<RelativeError, StudyError> {
    relative_error(u_fine, u_ms, mass)
}

/// `log(e_coarse / e_fine) / log(H_coarse / H_fine)`.
pub fn observed_order(e_coarse: f64, e_fine: f64, h_coarse: f64, h_fine: f64) -> f64 {
    (e_coarse / e_fine).ln() / (h_coarse / h_fine).ln()
}

/// Least-squares line `y = slope·x + intercept` with its coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LineFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

/// Which quantity fills the energy error column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnergyMetric {
    /// Relative a-norm of the final-time difference.
    #[default]
    Anorm,
    /// Square root of the discrete total energy of the difference trajectory
    /// at the last half step, relative to that of the reference.
    Trajectory,
}

/// One row of a convergence table.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub coarse_size: f64,
    pub m: usize,
    pub modes_per_block: usize,
    pub gamma: f64,
    pub tau: f64,
    pub energy_error_pct: f64,
    pub l2_error_pct: f64,
    /// Observed L² order against the previous (coarser) row.
    pub order_est: Option<f64>,
    pub basis_secs: f64,
    pub solve_secs: f64,
}

/// Shortest round-trip decimal, switching to exponent form outside `[1e-4, 1e15)`.
pub fn format_float(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

pub fn write_report_csv<W: Write>(mut w: W, rows: &[ErrorReport]) -> io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        let order = r.order_est.map(format_float).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            format_float(r.coarse_size),
            r.m,
            r.modes_per_block,
            format_float(r.gamma),
            format_float(r.tau),
            format_float(r.energy_error_pct),
            format_float(r.l2_error_pct),
            order,
            format_float(r.basis_secs),
            format_float(r.solve_secs)
        )?;
    }
    Ok(())
}

/// Discretization parameters shared by all levels of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    pub modes_per_block: usize,
    pub gamma: f64,
    pub method: SaddleMethod,
}

#[derive(Debug, Clone)]
pub struct SimulationSettings {
    pub tau: f64,
    pub final_time: f64,
    pub source: Source,
    pub init: InitOptions,
    pub energy_metric: EnergyMetric,
    pub allow_unstable: bool,
    /// Report wall-clock seconds; zeros keep reports byte-reproducible.
    pub timing: bool,
}

impl SimulationSettings {
    /// `N_T = round(T/τ)`.
    pub fn steps(&self) -> usize {
        (self.final_time / self.tau).round() as usize
    }
}

/// Coarse and fine fields at the final time of one level.
#[derive(Debug, Clone)]
pub struct LevelOutcome {
    pub report: ErrorReport,
    /// Largest entry of `|ΦᵀMΦ − I|`.
    pub mass_defect: f64,
    /// Largest entry of `|ΦᵀMΨ − I|`.
    pub constraint_defect: f64,
    pub fine: Vec<f64>,
    pub multiscale: Vec<f64>,
}

/// Builds the basis for `(nc, m)`, runs both schemes with zero initial data and compares.
pub fn run_level(
    field: &CoefficientField,
    fine_cells: usize,
    nc: usize,
    m: usize,
    disc: &Discretization,
    sim: &SimulationSettings,
) -> Result<LevelOutcome, StudyError> {
    if nc == 0 || fine_cells % nc != 0 {
        return Err(StudyError::NonNesting { nc, fine_cells });
    }
    let mesh = MeshHierarchy::new(nc, fine_cells / nc)?;
    field.check_mesh(&mesh)?;
    let stiffness = assemble_ipdg(&mesh, field, disc.gamma);
    let anorm = assemble_anorm(&mesh, field, disc.gamma);
    let mass = assemble_mass(&mesh);
    let mass_solver = MassSolver::new(&mesh)?;
    let forcing = Forcing::new(&mesh, &sim.source)?;

    let clock = Instant::now();
    let test = compute_test_space(&mesh, field, disc.modes_per_block)?;
    let basis = MultiscaleBasis::build(&mesh, &stiffness, test, m, disc.method)?;
    let basis_secs = clock.elapsed().as_secs_f64();
    let mass_defect = basis.test.orthonormality_defect(&mass);
    let constraint_defect = basis.trial.constraint_defect_with(&basis.test, &mass);

    let cfl = estimate_cfl(&basis.coarse_stiffness);
    check_stability(sim.tau, &cfl, sim.allow_unstable)?;
    let steps = sim.steps();
    let zero = vec![0.0; mesh.num_dofs()];
    let load0 = forcing.load(0.0, mesh.num_dofs());
    let load0 = (!forcing.is_zero()).then_some(load0.as_slice());
    let opts = RunOptions {
        steps,
        record_energy: false,
        snapshot_stride: None,
    };

    let clock = Instant::now();
    let coarse0 = init_coarse(&zero, &zero, load0, &basis, &stiffness, &mass, sim.tau, sim.init)?;
    let coarse = run_coarse(coarse0, &basis, &CoarseForcing::new(&forcing, &basis), &opts);
    let solve_secs = clock.elapsed().as_secs_f64();

    let fine0 = init_fine(&zero, &zero, load0, &stiffness, &mass_solver, sim.tau)?;
    let fine = run_fine(fine0, &stiffness, &mass, &mass_solver, &forcing, &opts);

    let ms = basis.trial.downscale(&coarse.state.curr);
    let energy = match sim.energy_metric {
        EnergyMetric::Anorm => energy_error(&fine.state.curr, &ms, &anorm)?.percent,
        EnergyMetric::Trajectory => {
            let ms_prev = basis.trial.downscale(&coarse.state.prev);
            trajectory_energy_error(&fine.state.prev, &fine.state.curr, &ms_prev, &ms, sim.tau, &stiffness, &mass)
        }
    };
    let l2 = l2_error(&fine.state.curr, &ms, &mass)?.percent;
    let report = ErrorReport {
        coarse_size: mesh.coarse_size(),
        m,
        modes_per_block: disc.modes_per_block,
        gamma: disc.gamma,
        tau: sim.tau,
        energy_error_pct: energy,
        l2_error_pct: l2,
        order_est: None,
        basis_secs: if sim.timing { basis_secs } else { 0.0 },
        solve_secs: if sim.timing { solve_secs } else { 0.0 },
    };
    Ok(LevelOutcome {
        report,
        mass_defect,
        constraint_defect,
        fine: fine.state.curr,
        multiscale: ms,
    })
}

fn trajectory_energy_error(
    fine_prev: &[f64],
    fine_curr: &[f64],
    ms_prev: &[f64],
    ms_curr: &[f64],
    tau: f64,
    stiffness: &SparseOperator,
    mass: &SparseOperator,
) -> f64 {
    let dp: Vec<f64> = fine_prev.iter().zip(ms_prev).map(|(a, b)| a - b).collect();
    let dc: Vec<f64> = fine_curr.iter().zip(ms_curr).map(|(a, b)| a - b).collect();
    let (e_diff, _) = crate::wavesim::discrete_energy(&dp, &dc, tau, stiffness, |v| mass.quad_form(v));
    let (e_ref, _) = crate::wavesim::discrete_energy(fine_prev, fine_curr, tau, stiffness, |v| mass.quad_form(v));
    if e_ref > 0.0 {
        100.0 * (e_diff.max(0.0) / e_ref).sqrt()
    } else {
        e_diff.max(0.0).sqrt()
    }
}

/// Levels `(nc, m)` over a fixed fine grid of `fine_cells` per dimension.
#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub fine_cells: usize,
    pub levels: Vec<(usize, usize)>,
    pub disc: Discretization,
    pub sim: SimulationSettings,
}

/// One report per level, coarse to fine, with observed orders filled in.
///
/// The fine reference is recomputed for every level because the DG space
/// duplicates nodes along the coarse edges, which differ between levels.
pub fn run_convergence_study(field: &CoefficientField, study: &ConvergenceStudy) -> Result<Vec<ErrorReport>, StudyError> {
    for &(nc, _) in &study.levels {
        if nc == 0 || study.fine_cells % nc != 0 {
            return Err(StudyError::NonNesting {
                nc,
                fine_cells: study.fine_cells,
            });
        }
    }
    let mut rows: Vec<ErrorReport> = Vec::with_capacity(study.levels.len());
    for &(nc, m) in &study.levels {
        let mut row = run_level(field, study.fine_cells, nc, m, &study.disc, &study.sim)?.report;
        if let Some(prev) = rows.last() {
            row.order_est = Some(observed_order(prev.l2_error_pct, row.l2_error_pct, prev.coarse_size, row.coarse_size));
        }
        log::info!("H = {} m = {}: energy {}%, L2 {}%", row.coarse_size, m, row.energy_error_pct, row.l2_error_pct);
        rows.push(row);
    }
    Ok(rows)
}

/// `‖ψ_j − ψ_{j,m}‖_a` for several `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayTable {
    pub m_values: Vec<usize>,
    pub modes_per_block: usize,
    /// `errors[k][c]` for `m_values[k]` and column `c`.
    pub errors: Vec<Vec<f64>>,
}

impl DecayTable {
    pub fn mean_errors(&self) -> Vec<f64> {
        self.errors
            .iter()
            .map(|e| e.iter().sum::<f64>() / e.len().max(1) as f64)
            .collect()
    }

    /// Columns whose error increases from one `m` to the next beyond `rel_tol`.
    pub fn increasing_columns(&self, rel_tol: f64) -> Vec<usize> {
        let cols = self.errors.first().map_or(0, |e| e.len());
        (0..cols)
            .filter(|&c| self.errors.windows(2).any(|w| w[1][c] > w[0][c] * (1.0 + rel_tol)))
            .collect()
    }

    /// Fit of `log(mean error)` against `m`, skipping vanishing means.
    pub fn log_fit(&self) -> Option<LineFit> {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .m_values
            .iter()
            .zip(self.mean_errors())
            .filter(|(_, e)| *e > 0.0)
            .map(|(&m, e)| (m as f64, e.ln()))
            .unzip();
        fit_line(&x, &y)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "m,block,j,anorm_err")?;
        for (m, errs) in self.m_values.iter().zip(&self.errors) {
            for (c, e) in errs.iter().enumerate() {
                writeln!(w, "{},{},{},{}", m, c / self.modes_per_block, c % self.modes_per_block + 1, format_float(*e))?;
            }
        }
        Ok(())
    }
}

/// Localization error of every trial column for each `m` against the global basis.
pub fn run_decay_study(
    mesh: &MeshHierarchy,
    field: &CoefficientField,
    disc: &Discretization,
    m_values: &[usize],
    global_cap: usize,
) -> Result<DecayTable, StudyError> {
    field.check_mesh(mesh)?;
    let stiffness = assemble_ipdg(mesh, field, disc.gamma);
    let anorm = assemble_anorm(mesh, field, disc.gamma);
    let test = compute_test_space(mesh, field, disc.modes_per_block)?;
    let global = solve_global_basis(mesh, &stiffness, &test, global_cap, disc.method)?;
    let errors = m_values
        .iter()
        .map(|&m| {
            let local = build_trial_basis(mesh, &stiffness, &test, m, disc.method)?;
            Ok(localization_error(&global, &local, &anorm)?)
        })
        .collect::<Result<Vec<_>, StudyError>>()?;
    Ok(DecayTable {
        m_values: m_values.to_vec(),
        modes_per_block: disc.modes_per_block,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::{synthetic_field, Pattern, SyntheticSpec};
    use crate::sparse::{OperatorRole, SymmetricBuilder};
    use crate::wavesim::{Ricker, SpatialSign};

    fn identity(n: usize) -> SparseOperator {
        let mut b = SymmetricBuilder::new(n);
        for i in 0..n {
            b.add(i, i, 1.0);
        }
        b.build(OperatorRole::Mass)
    }

    #[test]
    fn errors_of_identical_and_zero_inputs() {
        let id = identity(3);
        let u = [1.0, -2.0, 0.5];
        assert_eq!(l2_error(&u, &u, &id).unwrap().percent, 0.0);
        assert!((energy_error(&u, &[0.0; 3], &id).unwrap().percent - 100.0).abs() < 1e-12);
        let z = l2_error(&[0.0; 3], &[3.0, 0.0, 4.0], &id).unwrap();
        assert!(z.zero_reference);
        assert!((z.absolute - 5.0).abs() < 1e-15);
        assert!(l2_error(&u, &[1.0], &id).is_err());
    }

    #[test]
    fn float_format_switches_to_exponent() {
        assert_eq!(format_float(0.125), "0.125");
        assert_eq!(format_float(1e-4), "0.0001");
        assert_eq!(format_float(2.5e-7), "2.5e-7");
        assert_eq!(format_float(0.0), "0");
        assert_eq!(format_float(-3e20), "-3e20");
    }

    #[test]
    fn order_and_fit() {
        assert!((observed_order(4.0, 1.0, 0.25, 0.125) - 2.0).abs() < 1e-15);
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 0.5 * v).collect();
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-14 && (f.intercept - 1.0).abs() < 1e-14);
        assert!((f.r2 - 1.0).abs() < 1e-14);
        assert!(fit_line(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn report_csv_layout() {
        let row = ErrorReport {
            coarse_size: 0.125,
            m: 4,
            modes_per_block: 4,
            gamma: 4.0,
            tau: 1e-4,
            energy_error_pct: 12.5,
            l2_error_pct: 3.25,
            order_est: None,
            basis_secs: 0.0,
            solve_secs: 0.0,
        };
        let mut out = Vec::new();
        write_report_csv(&mut out, &[row]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            format!("{REPORT_HEADER}\n0.125,4,4,4,0.0001,12.5,3.25,,0,0\n")
        );
    }

    #[test]
    fn non_nesting_levels_are_rejected() {
        let mesh = MeshHierarchy::new(1, 12).unwrap();
        let field = CoefficientField::constant(&mesh, 1.0).unwrap();
        let study = ConvergenceStudy {
            fine_cells: 12,
            levels: vec![(5, 1)],
            disc: Discretization {
                modes_per_block: 2,
                gamma: 4.0,
                method: SaddleMethod::SchurCholesky,
            },
            sim: SimulationSettings {
                tau: 1e-3,
                final_time: 0.01,
                source: Source::None,
                init: InitOptions::default(),
                energy_metric: EnergyMetric::Anorm,
                allow_unstable: false,
                timing: false,
            },
        };
        assert!(matches!(run_convergence_study(&field, &study), Err(StudyError::NonNesting { nc: 5, .. })));
    }

    #[test]
    fn small_study_is_deterministic_and_reports_orders() {
        let mesh = MeshHierarchy::new(1, 16).unwrap();
        let field = synthetic_field(
            &mesh,
            &SyntheticSpec {
                background: 1.0,
                contrast: 10.0,
                pattern: Pattern::Channels,
                seed: 2,
            },
        )
        .unwrap();
        let study = ConvergenceStudy {
            fine_cells: 16,
            levels: vec![(2, 1), (4, 2)],
            disc: Discretization {
                modes_per_block: 3,
                gamma: 4.0,
                method: SaddleMethod::SchurCholesky,
            },
            sim: SimulationSettings {
                tau: 2e-3,
                final_time: 0.1,
                source: Source::Ricker(Ricker {
                    f0: 20.0,
                    width: 0.08,
                    center: [0.5, 0.5],
                    sign: SpatialSign::Negative,
                }),
                init: InitOptions::default(),
                energy_metric: EnergyMetric::Anorm,
                allow_unstable: false,
                timing: false,
            },
        };
        let a = run_convergence_study(&field, &study).unwrap();
        let b = run_convergence_study(&field, &study).unwrap();
        assert_eq!(a, b);
        assert!(a[0].order_est.is_none() && a[1].order_est.is_some());
        assert!(a.iter().all(|r| r.l2_error_pct >= 0.0 && r.energy_error_pct >= 0.0));
    }

    #[test]
    fn decay_table_on_homogeneous_medium() {
        let mesh = MeshHierarchy::new(4, 2).unwrap();
        let field = CoefficientField::constant(&mesh, 1.0).unwrap();
        let disc = Discretization {
            modes_per_block: 2,
            gamma: 4.0,
            method: SaddleMethod::SchurCholesky,
        };
        let t = run_decay_study(&mesh, &field, &disc, &[0, 1, 2, 3], 1 << 24).unwrap();
        assert!(t.increasing_columns(1e-9).is_empty());
        assert!(t.mean_errors()[3] < 1e-8);
        let fit = t.log_fit().unwrap();
        assert!(fit.slope < 0.0);
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("m,block,j,anorm_err\n0,0,1,"));
        assert_eq!(text.lines().count(), 1 + 4 * 32);
    }
}

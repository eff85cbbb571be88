use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use cemdg::assembly::{assemble_anorm, assemble_ipdg, assemble_mass};
use cemdg::cem::{empirical_beta, CemError, MultiscaleBasis};
use cemdg::diagnostics::{
    energy_error, l2_error, run_convergence_study, run_decay_study, write_report_csv, ConvergenceStudy, Discretization,
    ErrorReport, SimulationSettings, StudyError,
};
use cemdg::grid::{MeshError, MeshHierarchy};
use cemdg::io::{
    read_basis, write_basis, write_energy_csv, write_eigenvalue_csv, write_raw_dofs, write_structured_points,
    FieldSnapshot, FormatError,
};
use cemdg::medium::{CoefficientField, MediumError};
use cemdg::spectral::{compute_test_space, SpectralError};
use cemdg::wavesim::{
    check_stability, estimate_cfl, init_coarse, init_fine, max_energy_growth, project_l2, run_coarse, run_fine,
    CoarseForcing, Forcing, MassSolver, RunOptions, WaveError,
};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Initial};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("refusing to run: {0} (pass --allow-unstable to run anyway)")]
    Unstable(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Unstable(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MediumError> for CliError {
    fn from(e: MediumError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        match e {
            SpectralError::InvalidModeCount { .. } => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<CemError> for CliError {
    fn from(e: CemError) -> Self {
        match e {
            CemError::Singular { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<WaveError> for CliError {
    fn from(e: WaveError) -> Self {
        match e {
            WaveError::Unstable { .. } => CliError::Unstable(e.to_string()),
            WaveError::InvalidSource(_) | WaveError::DimensionMismatch { .. } => CliError::Config(e.to_string()),
            WaveError::NonFiniteLoad | WaveError::MassFactorization => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<StudyError> for CliError {
    fn from(e: StudyError) -> Self {
        match e {
            StudyError::Mesh(e) => e.into(),
            StudyError::Medium(e) => e.into(),
            StudyError::Spectral(e) => e.into(),
            StudyError::Cem(e) => e.into(),
            StudyError::Wave(e) => e.into(),
            StudyError::NonNesting { .. } | StudyError::LengthMismatch(..) => CliError::Config(e.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io { .. } => CliError::Io(e.to_string()),
            FormatError::Cem(e) => e.into(),
            FormatError::Spectral(e) => e.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_error(path))?))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), CliError> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(io_error(path))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    Ok(())
}

/// Mesh, medium and fine operators shared by `bases` and `solve`.
struct Setup {
    mesh: MeshHierarchy,
    field: CoefficientField,
    stiffness: cemdg::sparse::SparseOperator,
    m: usize,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup, CliError> {
    let mesh = MeshHierarchy::new(cfg.nc, cfg.nf_per_block)?;
    let field = cfg.medium.build(&mesh)?;
    let stiffness = assemble_ipdg(&mesh, &field, cfg.gamma);
    let m = cfg.m.resolve(mesh.coarse_size());
    Ok(Setup {
        mesh,
        field,
        stiffness,
        m,
    })
}

fn build_basis(cfg: &ExperimentConfig, s: &Setup) -> Result<MultiscaleBasis, CliError> {
    let test = compute_test_space(&s.mesh, &s.field, cfg.modes)?;
    Ok(MultiscaleBasis::build(&s.mesh, &s.stiffness, test, s.m, cfg.saddle)?)
}

pub fn cmd_bases(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let s = setup(cfg)?;
    let basis = build_basis(cfg, &s)?;
    let out = &cfg.output;
    let basis_path = out.path(&out.basis);
    ensure_dir(&basis_path)?;
    write_basis(&basis_path, &s.mesh, &basis, cfg.gamma, &s.field)?;
    write_with(&out.path(&out.eigenvalues), |w| write_eigenvalue_csv(w, &basis))?;
    let cfl = estimate_cfl(&basis.coarse_stiffness);
    let beta = empirical_beta(&basis.coarse_stiffness, s.field.kappa1(), s.mesh.coarse_size(), 64, 0);
    println!("H = 1/{} h = 1/{} L = {} m = {}", cfg.nc, s.mesh.cells_per_dim(), cfg.modes, s.m);
    println!("coarse dofs {}", basis.num_coarse());
    println!("Lambda {}", basis.test.lambda());
    println!("max |Phi^T M Psi - I| {:e}", basis.constraint_defect());
    println!("tau_max {:e}", cfl.tau_max);
    println!("beta_emp {:e}", beta);
    println!("wrote {}", basis_path.display());
    Ok(())
}

pub fn cmd_solve(cfg: &ExperimentConfig, from_basis: Option<&Path>, allow_unstable: bool) -> Result<(), CliError> {
    let s = setup(cfg)?;
    let basis = match from_basis {
        Some(p) => {
            let (header, basis) = read_basis(p, &s.mesh, cfg.gamma, &s.field, &s.stiffness)?;
            if header.modes_per_block != cfg.modes || header.m != s.m {
                log::warn!(
                    "basis file has L = {}, m = {}; config asks for L = {}, m = {}; using the file",
                    header.modes_per_block,
                    header.m,
                    cfg.modes,
                    s.m
                );
            }
            basis
        }
        None => build_basis(cfg, &s)?,
    };
    let cfl = estimate_cfl(&basis.coarse_stiffness);
    let stab = check_stability(cfg.tau, &cfl, allow_unstable)?;
    println!("tau {:e} tau_max {:e} ratio {:.4}", cfg.tau, cfl.tau_max, stab.ratio);

    let mesh = &s.mesh;
    let mass = assemble_mass(mesh);
    let mass_solver = MassSolver::new(mesh)?;
    let forcing = Forcing::new(mesh, &cfg.source)?;
    let n = mesh.num_dofs();
    let u0 = match cfg.initial {
        Initial::Zero => vec![0.0; n],
        Initial::Bump { width } => project_l2(mesh, &mass_solver, |x, y| {
            (-((x - 0.5).powi(2) + (y - 0.5).powi(2)) / (2.0 * width * width)).exp()
        }),
    };
    let v0 = vec![0.0; n];
    let load0 = (!forcing.is_zero()).then(|| forcing.load(0.0, n));
    let steps = cfg.steps();
    let opts = RunOptions {
        steps,
        record_energy: true,
        snapshot_stride: (cfg.output.snapshot_stride > 0).then_some(cfg.output.snapshot_stride),
    };
    let start = init_coarse(&u0, &v0, load0.as_deref(), &basis, &s.stiffness, &mass, cfg.tau, cfg.init)?;
    let run = run_coarse(start, &basis, &CoarseForcing::new(&forcing, &basis), &opts);
    if run.state.curr.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical(format!("coarse solution became non-finite before step {steps}")));
    }

    let out = &cfg.output;
    write_with(&out.path(&out.energy), |w| write_energy_csv(w, &run.energy, cfg.tau))?;
    let snapshot = |step: usize, coeffs: &[f64]| FieldSnapshot {
        nc: mesh.nc(),
        nf_per_block: mesh.nf_per_block(),
        step,
        time: step as f64 * cfg.tau,
        values: basis.trial.downscale(coeffs),
    };
    for (step, coeffs) in &run.snapshots {
        let path = out.path(Path::new(&format!("snapshot_{step:06}.cemf")));
        ensure_dir(&path)?;
        snapshot(*step, coeffs).write(&path)?;
    }
    let final_field = snapshot(run.state.n, &run.state.curr);
    let field_path = out.path(&out.field);
    ensure_dir(&field_path)?;
    final_field.write(&field_path)?;

    println!("steps {steps} final time {}", run.state.time());
    // Without a source the discrete energy is conserved, so drift and growth are meaningful.
    if forcing.is_zero() {
        let growth = max_energy_growth(&run.energy);
        let drift = cemdg::wavesim::max_energy_drift(&run.energy);
        println!("energy drift {drift:e} magnitude growth {growth:e}");
        if growth > 10.0 {
            log::warn!("energy magnitude grew by a factor {growth:e}; the run is unstable");
        }
    }

    if cfg.reference {
        let start = init_fine(&u0, &v0, load0.as_deref(), &s.stiffness, &mass_solver, cfg.tau)?;
        let fine = run_fine(
            start,
            &s.stiffness,
            &mass,
            &mass_solver,
            &forcing,
            &RunOptions {
                steps,
                ..Default::default()
            },
        );
        let anorm = assemble_anorm(mesh, &s.field, cfg.gamma);
        let e = energy_error(&fine.state.curr, &final_field.values, &anorm)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let l = l2_error(&fine.state.curr, &final_field.values, &mass).map_err(|e| CliError::Numerical(e.to_string()))?;
        let report = ErrorReport {
            coarse_size: mesh.coarse_size(),
            m: basis.m(),
            modes_per_block: basis.test.modes_per_block(),
            gamma: cfg.gamma,
            tau: cfg.tau,
            energy_error_pct: e.percent,
            l2_error_pct: l.percent,
            order_est: None,
            basis_secs: 0.0,
            solve_secs: 0.0,
        };
        write_with(&out.path(&out.report), |w| write_report_csv(w, &[report]))?;
        println!("energy error {}% L2 error {}%", e.percent, l.percent);
    }
    println!("wrote {}", field_path.display());
    Ok(())
}

pub fn cmd_convergence(cfg: &ExperimentConfig, allow_unstable: bool) -> Result<(), CliError> {
    let fine_cells = cfg
        .fine_cells
        .ok_or_else(|| CliError::Config("study.fine_cells is required".into()))?;
    if cfg.levels.is_empty() {
        return Err(CliError::Config("study.levels is required".into()));
    }
    for &(nc, _) in &cfg.levels {
        if fine_cells % nc != 0 {
            return Err(CliError::Config(format!(
                "study.levels: 1/{nc} does not divide the fine grid of {fine_cells} cells"
            )));
        }
    }
    let lattice = MeshHierarchy::new(1, fine_cells)?;
    let field = cfg.medium.build(&lattice)?;
    let study = ConvergenceStudy {
        fine_cells,
        levels: cfg.levels.iter().map(|&(nc, m)| (nc, m.resolve(1.0 / nc as f64))).collect(),
        disc: Discretization {
            modes_per_block: cfg.modes,
            gamma: cfg.gamma,
            method: cfg.saddle,
        },
        sim: SimulationSettings {
            tau: cfg.tau,
            final_time: cfg.final_time,
            source: cfg.source.clone(),
            init: cfg.init,
            energy_metric: cfg.energy_metric,
            allow_unstable,
            timing: cfg.output.timing,
        },
    };
    let rows = run_convergence_study(&field, &study)?;
    let path = cfg.output.path(&cfg.output.report);
    write_with(&path, |w| write_report_csv(w, &rows))?;
    write_report_csv(io::stdout().lock(), &rows).map_err(|e| CliError::Io(e.to_string()))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_decay(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let mesh = MeshHierarchy::new(cfg.nc, cfg.nf_per_block)?;
    let field = cfg.medium.build(&mesh)?;
    let disc = Discretization {
        modes_per_block: cfg.modes,
        gamma: cfg.gamma,
        method: cfg.saddle,
    };
    let table = run_decay_study(&mesh, &field, &disc, &cfg.m_values, cfg.global_cap)?;
    let path = cfg.output.path(&cfg.output.decay);
    write_with(&path, |w| table.write_csv(w))?;
    println!("m,mean_anorm_err");
    for (m, e) in table.m_values.iter().zip(table.mean_errors()) {
        println!("{m},{e}");
    }
    match table.log_fit() {
        Some(fit) => println!("log-mean slope {} r2 {}", fit.slope, fit.r2),
        None => println!("log-mean slope n/a"),
    }
    let bad = table.increasing_columns(0.0);
    if !bad.is_empty() {
        println!("columns with increasing error: {}", bad.len());
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_export_field(input: &Path, output: Option<&PathBuf>, raw: bool) -> Result<(), CliError> {
    let snap = FieldSnapshot::read(input)?;
    let write = |w: &mut dyn Write| -> Result<(), FormatError> {
        if raw {
            write_raw_dofs(w, &snap)
        } else {
            write_structured_points(w, &snap)
        }
    };
    match output {
        Some(path) => {
            let mut w = create(path)?;
            write(&mut w)?;
            w.flush().map_err(io_error(path))?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            write(&mut w)?;
            w.flush().map_err(|e| CliError::Io(e.to_string()))?;
        }
    }
    Ok(())
}

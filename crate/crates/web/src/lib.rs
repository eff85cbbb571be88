//! Browser demo: block eigenmodes, localized trial functions and a coarse wave animation.
//!
//! [`Session`] holds all state and is plain Rust so it can be tested natively;
//! [`Demo`] is the thin JavaScript-facing wrapper.

use cemdg::assembly::{assemble_ipdg, assemble_mass};
use cemdg::cem::{solve_cem_block, MultiscaleBasis};
use cemdg::grid::MeshHierarchy;
use cemdg::io::lattice_average;
use cemdg::medium::{synthetic_field, CoefficientField, Pattern, SyntheticSpec};
use cemdg::saddle::SaddleMethod;
use cemdg::sparse::SparseOperator;
use cemdg::spectral::{compute_test_space, TestSpace};
use cemdg::wavesim::{
    coarse_energy, estimate_cfl, init_coarse, step_coarse, CoarseForcing, Forcing, InitOptions, Ricker, Source,
    SpatialSign, WaveState,
};
use wasm_bindgen::prelude::*;

const GAMMA: f64 = 4.0;

struct Animation {
    basis: MultiscaleBasis,
    forcing: CoarseForcing,
    state: WaveState,
    work: Vec<f64>,
}

pub struct Session {
    mesh: MeshHierarchy,
    field: CoefficientField,
    stiffness: SparseOperator,
    test: TestSpace,
    animation: Option<Animation>,
}

impl Session {
    pub fn new(nc: usize, nf_per_block: usize, contrast: f64, channels: bool, seed: u64, modes: usize) -> Result<Self, String> {
        let mesh = MeshHierarchy::new(nc, nf_per_block).map_err(|e| e.to_string())?;
        let spec = SyntheticSpec {
            background: 1.0,
            contrast,
            pattern: if channels { Pattern::Channels } else { Pattern::Inclusions },
            seed,
        };
        let field = synthetic_field(&mesh, &spec).map_err(|e| e.to_string())?;
        let stiffness = assemble_ipdg(&mesh, &field, GAMMA);
        let test = compute_test_space(&mesh, &field, modes).map_err(|e| e.to_string())?;
        Ok(Self {
            mesh,
            field,
            stiffness,
            test,
            animation: None,
        })
    }

    /// Side length of the node lattice returned by the field methods.
    pub fn lattice_size(&self) -> usize {
        self.mesh.cells_per_dim() + 1
    }

    pub fn kappa(&self) -> Vec<f64> {
        self.field.values().to_vec()
    }

    fn check_block(&self, block: usize) -> Result<(), String> {
        self.mesh.check_block(block).map_err(|e| e.to_string())
    }

    /// Kept eigenvalues of one block followed by the first excluded one.
    pub fn eigenvalues(&self, block: usize) -> Result<Vec<f64>, String> {
        self.check_block(block)?;
        let mut lam = self.test.block_basis(block).reported_eigenvalues();
        lam.truncate(self.test.modes_per_block() + 1);
        Ok(lam)
    }

    /// Eigenmode `j` of `block` on the whole lattice, zero outside the block.
    pub fn eigenmode(&self, block: usize, j: usize) -> Result<Vec<f64>, String> {
        self.check_block(block)?;
        if j >= self.test.modes_per_block() {
            return Err(format!("mode {j} out of range (L = {})", self.test.modes_per_block()));
        }
        let mut v = vec![0.0; self.mesh.num_dofs()];
        v[self.mesh.block_dofs(block)].copy_from_slice(self.test.mode(block, j));
        Ok(self.on_lattice(&v, Some(block)))
    }

    /// Trial function for mode `j` of `block` computed on an `m`-layer oversampled region.
    pub fn localized_function(&self, block: usize, j: usize, m: usize) -> Result<Vec<f64>, String> {
        self.check_block(block)?;
        let columns = solve_cem_block(&self.mesh, &self.stiffness, &self.test, block, m, SaddleMethod::SchurCholesky)
            .map_err(|e| e.to_string())?;
        let col = columns
            .get(j)
            .ok_or_else(|| format!("mode {j} out of range (L = {})", columns.len()))?;
        let npb = self.mesh.nodes_per_block();
        let mut v = vec![0.0; self.mesh.num_dofs()];
        for (slot, &b) in col.member_blocks.iter().enumerate() {
            v[self.mesh.block_dofs(b)].copy_from_slice(col.block_values(slot, npb));
        }
        Ok(self.on_lattice(&v, None))
    }

    // Node averages; with `only` set, nodes shared with other blocks keep the block's own value.
    fn on_lattice(&self, v: &[f64], only: Option<usize>) -> Vec<f64> {
        match only {
            None => lattice_average(&self.mesh, v),
            Some(block) => {
                let n = self.lattice_size();
                let mut out = vec![0.0; n * n];
                for d in self.mesh.block_dofs(block) {
                    let (i, j) = self.mesh.dof_lattice(d);
                    out[j * n + i] = v[d];
                }
                out
            }
        }
    }

    /// Builds the multiscale basis and starts a Ricker-driven run at `cfl_fraction` of the stable step.
    pub fn start_wave(&mut self, m: usize, cfl_fraction: f64, f0: f64, width: f64) -> Result<f64, String> {
        if !(cfl_fraction > 0.0 && cfl_fraction < 1.0) {
            return Err(format!("cfl fraction must lie in (0, 1), got {cfl_fraction}"));
        }
        let basis = MultiscaleBasis::build(&self.mesh, &self.stiffness, self.test.clone(), m, SaddleMethod::SchurCholesky)
            .map_err(|e| e.to_string())?;
        let tau = cfl_fraction * estimate_cfl(&basis.coarse_stiffness).tau_max;
        let source = Source::Ricker(Ricker {
            f0,
            width,
            center: [0.5, 0.5],
            sign: SpatialSign::Negative,
        });
        let forcing = Forcing::new(&self.mesh, &source).map_err(|e| e.to_string())?;
        let n = self.mesh.num_dofs();
        let zero = vec![0.0; n];
        let load0 = forcing.load(0.0, n);
        let mass = assemble_mass(&self.mesh);
        let state = init_coarse(&zero, &zero, Some(&load0), &basis, &self.stiffness, &mass, tau, InitOptions::default())
            .map_err(|e| e.to_string())?;
        let forcing = CoarseForcing::new(&forcing, &basis);
        self.animation = Some(Animation {
            basis,
            forcing,
            state,
            work: Vec::new(),
        });
        Ok(tau)
    }

    /// Advances the running animation and returns the field on the lattice.
    pub fn advance(&mut self, steps: usize) -> Result<Vec<f64>, String> {
        let a = self.animation.as_mut().ok_or("no wave running")?;
        for _ in 0..steps {
            let load = a.forcing.coefficients(a.state.time(), &a.basis);
            step_coarse(&mut a.state, &a.basis.coarse_stiffness, load.as_deref(), &mut a.work);
        }
        let fine = a.basis.trial.downscale(&a.state.curr);
        Ok(lattice_average(&self.mesh, &fine))
    }

    pub fn time(&self) -> f64 {
        self.animation.as_ref().map_or(0.0, |a| a.state.time())
    }

    pub fn energy(&self) -> f64 {
        self.animation
            .as_ref()
            .map_or(0.0, |a| coarse_energy(&a.state, &a.basis.coarse_stiffness).energy)
    }
}

#[wasm_bindgen]
pub struct Demo(Session);

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(nc: usize, nf_per_block: usize, contrast: f64, channels: bool, seed: u32, modes: usize) -> Result<Demo, JsError> {
        Session::new(nc, nf_per_block, contrast, channels, seed as u64, modes).map(Demo).map_err(js)
    }

    #[wasm_bindgen(js_name = latticeSize)]
    pub fn lattice_size(&self) -> usize {
        self.0.lattice_size()
    }

    pub fn kappa(&self) -> Vec<f64> {
        self.0.kappa()
    }

    pub fn eigenvalues(&self, block: usize) -> Result<Vec<f64>, JsError> {
        self.0.eigenvalues(block).map_err(js)
    }

    pub fn eigenmode(&self, block: usize, j: usize) -> Result<Vec<f64>, JsError> {
        self.0.eigenmode(block, j).map_err(js)
    }

    #[wasm_bindgen(js_name = localizedFunction)]
    pub fn localized_function(&self, block: usize, j: usize, m: usize) -> Result<Vec<f64>, JsError> {
        self.0.localized_function(block, j, m).map_err(js)
    }

    #[wasm_bindgen(js_name = startWave)]
    pub fn start_wave(&mut self, m: usize, cfl_fraction: f64, f0: f64, width: f64) -> Result<f64, JsError> {
        self.0.start_wave(m, cfl_fraction, f0, width).map_err(js)
    }

    pub fn advance(&mut self, steps: usize) -> Result<Vec<f64>, JsError> {
        self.0.advance(steps).map_err(js)
    }

    pub fn time(&self) -> f64 {
        self.0.time()
    }

    pub fn energy(&self) -> f64 {
        self.0.energy()
    }
}

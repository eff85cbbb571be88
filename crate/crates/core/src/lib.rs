//! Constraint energy minimizing generalized multiscale discontinuous Galerkin
//! solver for the scalar wave equation `u_tt = div(κ ∇u) + f` on the unit
//! square with homogeneous Dirichlet data.
//!
//! The pipeline is: [`grid`] builds the two-level mesh, [`medium`] supplies κ,
//! [`assembly`] produces the fine interior-penalty operators, [`spectral`]
//! extracts the local test space, [`cem`] builds localized trial functions by
//! constrained energy minimization, and [`wavesim`] marches the explicit
//! coarse (or fine reference) leapfrog scheme. [`diagnostics`] runs error,
//! convergence and localization studies, and [`io`] reads and writes bases,
//! fields and CSV tables.

pub mod assembly;
pub mod cem;
pub mod diagnostics;
pub mod grid;
pub mod io;
pub mod medium;
pub mod sparse;
pub mod spectral;
pub mod wavesim;
pub mod saddle;

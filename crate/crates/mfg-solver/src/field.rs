//! Field containers for the two sides of the primal-dual pair.
//!
//! `ScalarField` holds node-collocated values `(nt + 1, nx, nx)`,
//! `VectorField` holds interval-collocated flux components
//! `(nt, axis, nx, nx)` at cell centers, `TimeSlice` a single `(nx, nx)`
//! spatial slice.

use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::grid::SpaceTimeGrid;

pub type TimeSlice = Array2<f64>;
pub type ScalarField = Array3<f64>;
pub type VectorField = Array4<f64>;
/// Coefficient trajectory of a nonlocal dual variable: `(nt + 1, r)`.
pub type CoeffTrajectory = Array2<f64>;

/// Dual-side state: nonlocal coefficients, local dual fields and the value
/// function. `b` is empty (`r = 0`) when the terminal nonlocal coupling is
/// disabled; `alphas` holds one field per configured local running coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingSide {
    pub a: CoeffTrajectory,
    pub b: Array1<f64>,
    pub alphas: Vec<ScalarField>,
    pub beta: TimeSlice,
    pub phi: ScalarField,
}

/// Primal-side state: density, flux and the boundary-time trace slices.
///
/// After every solver update `rho0` equals `rho` at node 0 and `rho1`
/// equals `rho` at node `nt`; arbitrary (e.g. random test) instances may
/// leave them unsynchronized, the inner product treats them as independent
/// degrees of freedom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySide {
    pub rho: ScalarField,
    pub m: VectorField,
    pub rho0: TimeSlice,
    pub rho1: TimeSlice,
}

/// Block sizes of the coupling side, fixed by the scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingShape {
    /// Modes of the running nonlocal coupling (0 when disabled).
    pub r_running: usize,
    /// Modes of the terminal nonlocal coupling (0 when disabled).
    pub r_terminal: usize,
    /// Number of local running couplings.
    pub n_local: usize,
}

impl CouplingSide {
    pub fn zeros(grid: &SpaceTimeGrid, shape: CouplingShape) -> Self {
        Self {
            a: Array2::zeros((grid.nt + 1, shape.r_running)),
            b: Array1::zeros(shape.r_terminal),
            alphas: vec![Array3::zeros(grid.scalar_shape()); shape.n_local],
            beta: Array2::zeros(grid.slice_shape()),
            phi: Array3::zeros(grid.scalar_shape()),
        }
    }

    pub fn shape(&self) -> CouplingShape {
        CouplingShape {
            r_running: self.a.ncols(),
            r_terminal: self.b.len(),
            n_local: self.alphas.len(),
        }
    }

    /// `self += c * other`, blockwise.
    pub fn axpy(&mut self, c: f64, other: &Self) {
        self.a.scaled_add(c, &other.a);
        self.b.scaled_add(c, &other.b);
        for (a, oa) in self.alphas.iter_mut().zip(&other.alphas) {
            a.scaled_add(c, oa);
        }
        self.beta.scaled_add(c, &other.beta);
        self.phi.scaled_add(c, &other.phi);
    }

    /// Over-relaxation combination `2 * new - old`.
    pub fn extrapolate(new: &Self, old: &Self) -> Self {
        let mut out = new.clone();
        out.axpy(1.0, new);
        out.axpy(-1.0, old);
        out
    }

    pub fn is_finite(&self) -> std::result::Result<(), &'static str> {
        if !self.a.iter().all(|v| v.is_finite()) {
            return Err("a");
        }
        if !self.b.iter().all(|v| v.is_finite()) {
            return Err("b");
        }
        if !self.alphas.iter().flatten().all(|v| v.is_finite()) {
            return Err("alpha");
        }
        if !self.beta.iter().all(|v| v.is_finite()) {
            return Err("beta");
        }
        if !self.phi.iter().all(|v| v.is_finite()) {
            return Err("phi");
        }
        Ok(())
    }
}

impl DensitySide {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Self {
            rho: Array3::zeros(grid.scalar_shape()),
            m: Array4::zeros(grid.flux_shape()),
            rho0: Array2::zeros(grid.slice_shape()),
            rho1: Array2::zeros(grid.slice_shape()),
        }
    }

    /// Initial solver state: `rho0` replicated across time, zero flux.
    pub fn from_initial_density(grid: &SpaceTimeGrid, rho0: &TimeSlice) -> Self {
        let mut q = Self::zeros(grid);
        for mut slice in q.rho.outer_iter_mut() {
            slice.assign(rho0);
        }
        q.rho0.assign(rho0);
        q.rho1.assign(rho0);
        q
    }

    pub fn axpy(&mut self, c: f64, other: &Self) {
        self.rho.scaled_add(c, &other.rho);
        self.m.scaled_add(c, &other.m);
        self.rho0.scaled_add(c, &other.rho0);
        self.rho1.scaled_add(c, &other.rho1);
    }

    /// Copy node 0 / node `nt` of `rho` into the trace slices.
    pub fn synchronize_traces(&mut self) {
        let first = self.rho.index_axis(ndarray::Axis(0), 0).to_owned();
        let nt = self.rho.shape()[0] - 1;
        let last = self.rho.index_axis(ndarray::Axis(0), nt).to_owned();
        self.rho0.assign(&first);
        self.rho1.assign(&last);
    }

    pub fn is_finite(&self) -> std::result::Result<(), &'static str> {
        if !self.rho.iter().all(|v| v.is_finite()) {
            return Err("rho");
        }
        if !self.m.iter().all(|v| v.is_finite()) {
            return Err("m");
        }
        if !self.rho0.iter().all(|v| v.is_finite()) || !self.rho1.iter().all(|v| v.is_finite()) {
            return Err("rho boundary slice");
        }
        Ok(())
    }
}

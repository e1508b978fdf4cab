//! Discrete H^1 Riesz map on the space-time grid.
//!
//! The value function lives in the discrete H^1 space with inner product
//!
//! ```text
//! <phi, h> = hx^2 [ phi(0).h(0) + phi(nt).h(nt) ]
//!          + hx^2 ht sum_k  (Dt phi)(k) . (Dt h)(k)
//!          + hx^2 ht sum_j  (Dx phi)(j) . (Dx h)(j)     (faces, all nodes)
//! ```
//!
//! whose Riesz problem `<h, psi> = F(psi)` is solved by a 2D DCT-II in
//! space (which diagonalizes the Neumann Laplacian exactly) and one
//! tridiagonal solve per spatial mode in time. The boundary mass terms act
//! as Robin rows and keep every system nonsingular, including the zero
//! spatial mode.
//!
//! Right-hand-side functionals are passed as coefficient arrays in the
//! weighted convention
//! `F(psi) = hx^2 ht sum inter.psi + hx^2 sum t0.psi(0) + hx^2 sum t1.psi(nt)`.

use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use rustdct::{DctPlanner, TransformType2And3};

use crate::error::{Error, Result};
use crate::field::{ScalarField, TimeSlice};
use crate::grid::SpaceTimeGrid;
use crate::stencil;

pub struct EllipticPlan {
    grid: SpaceTimeGrid,
    dct: Arc<dyn TransformType2And3<f64>>,
    /// DCT-II scalings for the orthonormal convention.
    scale_fwd: Vec<f64>,
    /// Modified diagonals of the factored tridiagonal system, one row per
    /// flattened spatial mode.
    pivots: Array2<f64>,
    /// Elimination multipliers.
    multipliers: Array2<f64>,
    /// Constant off-diagonal `-1/ht`.
    off: f64,
}

impl std::fmt::Debug for EllipticPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EllipticPlan")
            .field("nx", &self.grid.nx)
            .field("nt", &self.grid.nt)
            .finish()
    }
}

impl EllipticPlan {
    pub fn new(grid: &SpaceTimeGrid) -> Result<Self> {
        let nx = grid.nx;
        let nt = grid.nt;
        let dct = DctPlanner::new().plan_dct2(nx);
        let mut scale_fwd = vec![(2.0 / nx as f64).sqrt(); nx];
        scale_fwd[0] = (1.0 / nx as f64).sqrt();

        // eigenvalues of the forward-difference Neumann Laplacian per axis
        let lam: Vec<f64> = (0..nx)
            .map(|p| (2.0 - 2.0 * (p as f64 * std::f64::consts::PI / nx as f64).cos()) / (grid.hx * grid.hx))
            .collect();

        let n = nt + 1;
        let off = -1.0 / grid.ht;
        let mut pivots = Array2::zeros((nx * nx, n));
        let mut multipliers = Array2::zeros((nx * nx, n - 1));
        for p in 0..nx {
            for q in 0..nx {
                let mu = lam[p] + lam[q];
                let row = p * nx + q;
                let diag = |k: usize| -> f64 {
                    let t_part = if k == 0 || k == nt { 1.0 / grid.ht } else { 2.0 / grid.ht };
                    let boundary = if k == 0 || k == nt { 1.0 } else { 0.0 };
                    t_part + boundary + grid.ht * mu
                };
                let mut prev = diag(0);
                pivots[[row, 0]] = prev;
                for k in 1..n {
                    if prev <= 0.0 {
                        return Err(Error::Internal(format!(
                            "time system lost positive definiteness at mode ({p},{q})"
                        )));
                    }
                    let w = off / prev;
                    multipliers[[row, k - 1]] = w;
                    prev = diag(k) - w * off;
                    pivots[[row, k]] = prev;
                }
                if prev <= 0.0 {
                    return Err(Error::Internal(format!(
                        "singular time system at mode ({p},{q})"
                    )));
                }
            }
        }
        Ok(Self {
            grid: grid.clone(),
            dct,
            scale_fwd,
            pivots,
            multipliers,
            off,
        })
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    /// Orthonormal 2D DCT-II of a spatial slice, in place.
    pub fn forward_slice(&self, slice: &mut TimeSlice) {
        let nx = self.grid.nx;
        let mut scratch = vec![0.0f64; nx];
        // axis 1: rows are contiguous
        for mut row in slice.rows_mut() {
            scratch.copy_from_slice(row.as_slice().expect("contiguous row"));
            self.dct.process_dct2(&mut scratch);
            for (v, (s, f)) in row.iter_mut().zip(scratch.iter().zip(&self.scale_fwd)) {
                *v = s * f;
            }
        }
        // axis 0: gather columns
        for j in 0..nx {
            for i in 0..nx {
                scratch[i] = slice[[i, j]];
            }
            self.dct.process_dct2(&mut scratch);
            for i in 0..nx {
                slice[[i, j]] = scratch[i] * self.scale_fwd[i];
            }
        }
    }

    /// Inverse (transpose) of [`Self::forward_slice`].
    pub fn inverse_slice(&self, slice: &mut TimeSlice) {
        let nx = self.grid.nx;
        let mut scratch = vec![0.0f64; nx];
        for mut row in slice.rows_mut() {
            for (s, (v, f)) in scratch.iter_mut().zip(row.iter().zip(&self.scale_fwd)) {
                *s = v * f;
            }
            scratch[0] *= 2.0; // dct3 convention halves the zero mode
            self.dct.process_dct3(&mut scratch);
            for (v, s) in row.iter_mut().zip(&scratch) {
                *v = *s;
            }
        }
        for j in 0..nx {
            for i in 0..nx {
                scratch[i] = slice[[i, j]] * self.scale_fwd[i];
            }
            scratch[0] *= 2.0;
            self.dct.process_dct3(&mut scratch);
            for i in 0..nx {
                slice[[i, j]] = scratch[i];
            }
        }
    }

    /// Solve the Riesz problem for the functional with weighted pieces
    /// `(rhs_interior, rhs_t0, rhs_t1)`; returns the unique representer.
    pub fn solve_riesz(
        &self,
        rhs_interior: &ScalarField,
        rhs_t0: &TimeSlice,
        rhs_t1: &TimeSlice,
    ) -> ScalarField {
        let nx = self.grid.nx;
        let nt = self.grid.nt;
        assert_eq!(rhs_interior.dim(), self.grid.scalar_shape());

        // spatial transform of every slice of the functional
        let mut hat = rhs_interior.clone();
        hat.outer_iter_mut().into_par_iter().for_each(|mut slice| {
            let mut s = slice.to_owned();
            self.forward_slice(&mut s);
            slice.assign(&s);
        });
        let mut t0 = rhs_t0.clone();
        let mut t1 = rhs_t1.clone();
        self.forward_slice(&mut t0);
        self.forward_slice(&mut t1);

        // per-mode tridiagonal solves in time
        let mut sol = Array3::zeros((nt + 1, nx, nx));
        {
            let hat = &hat;
            let t0 = &t0;
            let t1 = &t1;
            let cols: Vec<Vec<f64>> = (0..nx * nx)
                .into_par_iter()
                .map(|row| {
                    let (p, q) = (row / nx, row % nx);
                    let mut rhs = vec![0.0f64; nt + 1];
                    for k in 0..=nt {
                        rhs[k] = self.grid.ht * hat[[k, p, q]];
                    }
                    rhs[0] += t0[[p, q]];
                    rhs[nt] += t1[[p, q]];
                    self.thomas_solve(row, &mut rhs);
                    rhs
                })
                .collect();
            for (row, col) in cols.iter().enumerate() {
                let (p, q) = (row / nx, row % nx);
                for k in 0..=nt {
                    sol[[k, p, q]] = col[k];
                }
            }
        }

        sol.outer_iter_mut().into_par_iter().for_each(|mut slice| {
            let mut s = slice.to_owned();
            self.inverse_slice(&mut s);
            slice.assign(&s);
        });
        sol
    }

    fn thomas_solve(&self, row: usize, rhs: &mut [f64]) {
        let n = rhs.len();
        for k in 1..n {
            let w = self.multipliers[[row, k - 1]];
            rhs[k] -= w * rhs[k - 1];
        }
        rhs[n - 1] /= self.pivots[[row, n - 1]];
        for k in (0..n - 1).rev() {
            rhs[k] = (rhs[k] - self.off * rhs[k + 1]) / self.pivots[[row, k]];
        }
    }

    /// `phi + tau * solve_riesz(rhs)`: the value-function half of the dual
    /// update, algebraically the space-time elliptic step of the iteration.
    pub fn phi_update(
        &self,
        phi: &ScalarField,
        rhs_interior: &ScalarField,
        rhs_t0: &TimeSlice,
        rhs_t1: &TimeSlice,
        tau: f64,
    ) -> ScalarField {
        if tau == 0.0 {
            return phi.clone();
        }
        let mut out = self.solve_riesz(rhs_interior, rhs_t0, rhs_t1);
        out.mapv_inplace(|v| v * tau);
        out += phi;
        out
    }
}

/// Discrete H^1 inner product (the bilinear form inverted by the plan).
pub fn h1_inner(grid: &SpaceTimeGrid, phi: &ScalarField, psi: &ScalarField) -> f64 {
    let w2 = grid.cell_area();
    let nt = grid.nt;
    let mut acc = 0.0;
    // boundary mass
    let p0 = phi.index_axis(Axis(0), 0);
    let s0 = psi.index_axis(Axis(0), 0);
    let p1 = phi.index_axis(Axis(0), nt);
    let s1 = psi.index_axis(Axis(0), nt);
    acc += w2 * p0.iter().zip(s0.iter()).map(|(a, b)| a * b).sum::<f64>();
    acc += w2 * p1.iter().zip(s1.iter()).map(|(a, b)| a * b).sum::<f64>();
    // time gradient
    let dphi = stencil::dt_forward(&phi.view(), grid.ht);
    let dpsi = stencil::dt_forward(&psi.view(), grid.ht);
    acc += w2 * grid.ht * dphi.iter().zip(dpsi.iter()).map(|(a, b)| a * b).sum::<f64>();
    // space gradient at every node
    for k in 0..=nt {
        let pk = phi.index_axis(Axis(0), k);
        let sk = psi.index_axis(Axis(0), k);
        for axis in 0..2 {
            let gp = stencil::grad_faces(&pk, axis, grid.hx);
            let gs = stencil::grad_faces(&sk, axis, grid.hx);
            acc += w2 * grid.ht * gp.iter().zip(gs.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    acc
}

/// Apply the H^1 operator: produce the weighted functional pieces of
/// `psi -> <phi, psi>`. Exact inverse of [`EllipticPlan::solve_riesz`].
pub fn apply_h1(grid: &SpaceTimeGrid, phi: &ScalarField) -> (ScalarField, TimeSlice, TimeSlice) {
    let nt = grid.nt;
    let dphi = stencil::dt_forward(&phi.view(), grid.ht);
    let mut inter = stencil::dt_forward_transpose(&dphi.view(), grid.ht);
    for k in 0..=nt {
        let lap = stencil::neumann_laplacian(&phi.index_axis(Axis(0), k), grid.hx);
        inter.index_axis_mut(Axis(0), k).scaled_add(1.0, &lap);
    }
    let t0 = phi.index_axis(Axis(0), 0).to_owned();
    let t1 = phi.index_axis(Axis(0), nt).to_owned();
    (inter, t0, t1)
}

/// Evaluate a weighted functional triple against a field.
pub fn functional_apply(
    grid: &SpaceTimeGrid,
    pieces: &(ScalarField, TimeSlice, TimeSlice),
    psi: &ScalarField,
) -> f64 {
    let (inter, t0, t1) = pieces;
    let w2 = grid.cell_area();
    let mut acc = w2 * grid.ht * inter.iter().zip(psi.iter()).map(|(a, b)| a * b).sum::<f64>();
    acc += w2
        * t0.iter()
            .zip(psi.index_axis(Axis(0), 0).iter())
            .map(|(a, b)| a * b)
            .sum::<f64>();
    acc += w2
        * t1.iter()
            .zip(psi.index_axis(Axis(0), grid.nt).iter())
            .map(|(a, b)| a * b)
            .sum::<f64>();
    acc
}

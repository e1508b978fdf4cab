//! The linear operator pairing the coupling side with the density side,
//! its exact discrete adjoint, the inner products of both sides, and
//! power-iteration estimation of the operator norm.
//!
//! Adjointness is exact by construction: the adjoint is assembled from the
//! literal transposes of the stencils in [`crate::stencil`], and the value
//! function component is the Riesz representer of the pairing functional
//! in the discrete H^1 product inverted by [`crate::elliptic`].
//!
//! Time collocation: the time-derivative term pairs the flux interval `k`
//! with the density node `k + 1`, which makes the transposed continuity
//! equation the forward transport stencil
//! `(rho(k+1) - rho(k))/ht + div m(k) = 0` with no spurious terminal
//! constraint. The spatial gradient of the value function is taken at the
//! left node of each interval and collocated at cell centers.

use std::sync::Arc;

use ndarray::Axis;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::elliptic::{h1_inner, EllipticPlan};
use crate::error::{Error, Result};
use crate::field::{CouplingShape, CouplingSide, DensitySide, ScalarField, TimeSlice};
use crate::grid::SpaceTimeGrid;
use crate::spectral::BasisSet;
use crate::stencil;

/// Weighted L^2 inner product of the density side: `hx^2 ht` on nodes and
/// intervals, `hx^2` on the two boundary trace slices.
pub fn inner_product_density_side(grid: &SpaceTimeGrid, q1: &DensitySide, q2: &DensitySide) -> f64 {
    let w = grid.cell_area() * grid.ht;
    let mut acc = w * dot(q1.rho.as_slice().unwrap(), q2.rho.as_slice().unwrap());
    acc += w * dot(q1.m.as_slice().unwrap(), q2.m.as_slice().unwrap());
    acc += grid.cell_area() * dot(q1.rho0.as_slice().unwrap(), q2.rho0.as_slice().unwrap());
    acc += grid.cell_area() * dot(q1.rho1.as_slice().unwrap(), q2.rho1.as_slice().unwrap());
    acc
}

/// Inner product of the coupling side: time-weighted coefficient l^2 for
/// `a`, plain l^2 for `b`, weighted L^2 for the local duals, and the
/// discrete H^1 product for the value function.
pub fn inner_product_coupling_side(
    grid: &SpaceTimeGrid,
    s1: &CouplingSide,
    s2: &CouplingSide,
) -> f64 {
    let mut acc = grid.ht * dot(s1.a.as_slice().unwrap(), s2.a.as_slice().unwrap());
    acc += dot(s1.b.as_slice().unwrap(), s2.b.as_slice().unwrap());
    let w = grid.cell_area() * grid.ht;
    for (a1, a2) in s1.alphas.iter().zip(&s2.alphas) {
        acc += w * dot(a1.as_slice().unwrap(), a2.as_slice().unwrap());
    }
    acc += grid.cell_area() * dot(s1.beta.as_slice().unwrap(), s2.beta.as_slice().unwrap());
    acc += h1_inner(grid, &s1.phi, &s2.phi);
    acc
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The coupled-system operator and its adjoint.
#[derive(Debug, Clone)]
pub struct SystemOperator {
    grid: SpaceTimeGrid,
    basis: Arc<BasisSet>,
    plan: Arc<EllipticPlan>,
    shape: CouplingShape,
}

impl SystemOperator {
    pub fn new(
        grid: SpaceTimeGrid,
        basis: Arc<BasisSet>,
        plan: Arc<EllipticPlan>,
        shape: CouplingShape,
    ) -> Result<Self> {
        if shape.r_running != 0 && shape.r_running != basis.r {
            return Err(Error::Config(format!(
                "running coupling has {} modes but the basis has {}",
                shape.r_running, basis.r
            )));
        }
        if shape.r_terminal != 0 && shape.r_terminal != basis.r {
            return Err(Error::Config(format!(
                "terminal coupling has {} modes but the basis has {}",
                shape.r_terminal, basis.r
            )));
        }
        Ok(Self {
            grid,
            basis,
            plan,
            shape,
        })
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }
    pub fn basis(&self) -> &Arc<BasisSet> {
        &self.basis
    }
    pub fn plan(&self) -> &Arc<EllipticPlan> {
        &self.plan
    }
    pub fn shape(&self) -> CouplingShape {
        self.shape
    }

    fn check_coupling_shape(&self, s: &CouplingSide) -> Result<()> {
        if s.shape() != self.shape
            || s.phi.dim() != self.grid.scalar_shape()
            || s.a.nrows() != self.grid.nt + 1
        {
            return Err(Error::Config(format!(
                "coupling side has shape {:?}, operator expects {:?} on a {}x{} grid",
                s.shape(),
                self.shape,
                self.grid.nx,
                self.grid.nt
            )));
        }
        Ok(())
    }

    /// Forward map: coupling side to density-side-shaped pairing data.
    pub fn apply(&self, s: &CouplingSide) -> Result<DensitySide> {
        self.check_coupling_shape(s)?;
        let grid = &self.grid;
        let nt = grid.nt;
        let mut out = DensitySide::zeros(grid);

        // density component: -(sum_i a_i zeta_i) - sum_l alpha_l - dphi/dt,
        // the time difference placed at the right node of its interval
        let a = &s.a;
        let alphas = &s.alphas;
        let phi = &s.phi;
        let basis = &self.basis;
        let r_running = self.shape.r_running;
        out.rho
            .outer_iter_mut()
            .into_par_iter()
            .enumerate()
            .for_each(|(k, mut slice)| {
                let mut work: TimeSlice = ndarray::Array2::zeros(grid.slice_shape());
                if r_running > 0 {
                    let coeffs = a.row(k);
                    basis.accumulate_synthesis(coeffs.as_slice().unwrap(), -1.0, &mut work);
                }
                for alpha in alphas {
                    work.scaled_add(-1.0, &alpha.index_axis(Axis(0), k));
                }
                if k >= 1 {
                    let hi = phi.index_axis(Axis(0), k);
                    let lo = phi.index_axis(Axis(0), k - 1);
                    ndarray::Zip::from(&mut work).and(&hi).and(&lo).for_each(|w, &h, &l| {
                        *w -= (h - l) / grid.ht;
                    });
                }
                slice.assign(&work);
            });

        // flux component: cell-collocated gradient at the left node
        out.m
            .outer_iter_mut()
            .into_par_iter()
            .enumerate()
            .for_each(|(k, mut mk)| {
                let phik = phi.index_axis(Axis(0), k);
                for axis in 0..2 {
                    let g = stencil::grad_cells(&phik, axis, grid.hx);
                    let mut dst = mk.index_axis_mut(Axis(0), axis);
                    dst.assign(&g);
                    dst.mapv_inplace(|v| -v);
                }
            });

        // trace components
        out.rho0.assign(&phi.index_axis(Axis(0), 0));
        out.rho0.mapv_inplace(|v| -v);
        out.rho1.assign(&phi.index_axis(Axis(0), nt));
        if self.shape.r_terminal > 0 {
            self.basis
                .accumulate_synthesis(s.b.as_slice().unwrap(), -1.0, &mut out.rho1);
        }
        out.rho1.scaled_add(-1.0, &s.beta);
        Ok(out)
    }

    /// Exact adjoint of [`Self::apply`] under the two inner products.
    pub fn apply_adjoint(&self, q: &DensitySide) -> Result<CouplingSide> {
        if q.rho.dim() != self.grid.scalar_shape() {
            return Err(Error::Config(
                "density side does not match the operator grid".into(),
            ));
        }
        let grid = &self.grid;
        let nt = grid.nt;
        let mut out = CouplingSide::zeros(grid, self.shape);

        if self.shape.r_running > 0 {
            let projections: Vec<Vec<f64>> = (0..=nt)
                .into_par_iter()
                .map(|k| {
                    let c = self.basis.project(&q.rho.index_axis(Axis(0), k).to_owned());
                    c.iter().map(|v| -v).collect()
                })
                .collect();
            for (k, row) in projections.iter().enumerate() {
                out.a.row_mut(k).assign(&ndarray::ArrayView1::from(&row[..]));
            }
        }
        if self.shape.r_terminal > 0 {
            let c = self.basis.project(&q.rho1);
            out.b.assign(&c.mapv(|v| -v));
        }
        for alpha in out.alphas.iter_mut() {
            alpha.assign(&q.rho);
            alpha.mapv_inplace(|v| -v);
        }
        out.beta.assign(&q.rho1);
        out.beta.mapv_inplace(|v| -v);
        out.phi = self.plan.solve_riesz(
            &self.adjoint_phi_interior(q),
            &q.rho0.mapv(|v| -v),
            &q.rho1.clone(),
        );
        Ok(out)
    }

    /// Interior piece of the pairing functional handed to the Riesz solve:
    /// the transposed continuity stencil applied to `(rho, m)`.
    pub fn adjoint_phi_interior(&self, q: &DensitySide) -> ScalarField {
        let grid = &self.grid;
        let nt = grid.nt;
        // right-node density values per interval
        let shifted = q.rho.slice(ndarray::s![1.., .., ..]).to_owned();
        let mut inter = stencil::dt_forward_transpose(&shifted.view(), grid.ht);
        inter.mapv_inplace(|v| -v);
        let div_slices: Vec<TimeSlice> = (0..nt)
            .into_par_iter()
            .map(|k| {
                let mut d = ndarray::Array2::zeros(grid.slice_shape());
                for axis in 0..2 {
                    let comp = q.m.index_axis(Axis(0), k);
                    let comp = comp.index_axis(Axis(0), axis);
                    d.scaled_add(-1.0, &stencil::grad_cells_transpose(&comp, axis, grid.hx));
                }
                d
            })
            .collect();
        for (k, d) in div_slices.iter().enumerate() {
            inter.index_axis_mut(Axis(0), k).scaled_add(1.0, d);
        }
        inter
    }

    pub fn inner_s(&self, a: &CouplingSide, b: &CouplingSide) -> f64 {
        inner_product_coupling_side(&self.grid, a, b)
    }

    pub fn inner_q(&self, a: &DensitySide, b: &DensitySide) -> f64 {
        inner_product_density_side(&self.grid, a, b)
    }
}

/// Forward/adjoint pair abstraction for norm estimation.
pub trait AdjointPair {
    fn forward(&self, s: &CouplingSide) -> DensitySide;
    fn adjoint(&self, q: &DensitySide) -> CouplingSide;
    fn inner_s(&self, a: &CouplingSide, b: &CouplingSide) -> f64;
    fn inner_q(&self, a: &DensitySide, b: &DensitySide) -> f64;
    fn zero_state(&self) -> CouplingSide;
}

impl AdjointPair for SystemOperator {
    fn forward(&self, s: &CouplingSide) -> DensitySide {
        self.apply(s).expect("shape checked at construction")
    }
    fn adjoint(&self, q: &DensitySide) -> CouplingSide {
        self.apply_adjoint(q).expect("shape checked at construction")
    }
    fn inner_s(&self, a: &CouplingSide, b: &CouplingSide) -> f64 {
        SystemOperator::inner_s(self, a, b)
    }
    fn inner_q(&self, a: &DensitySide, b: &DensitySide) -> f64 {
        SystemOperator::inner_q(self, a, b)
    }
    fn zero_state(&self) -> CouplingSide {
        CouplingSide::zeros(&self.grid, self.shape)
    }
}

#[derive(Debug, Clone)]
pub struct NormEstimate {
    pub value: f64,
    /// False when the relative increment never dropped below the tolerance.
    pub converged: bool,
    pub iterations: usize,
    /// Rayleigh-quotient trace, nondecreasing in exact arithmetic.
    pub history: Vec<f64>,
}

/// Power iteration on the self-adjoint composition `adjoint . forward`;
/// returns an estimate of the operator norm.
pub fn estimate_operator_norm(
    op: &dyn AdjointPair,
    max_iters: usize,
    rel_tol: f64,
    seed: u64,
) -> NormEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = op.zero_state();
    randomize_coupling(&mut v, &mut rng);
    let n0 = op.inner_s(&v, &v).sqrt();
    if n0 == 0.0 {
        return NormEstimate {
            value: 0.0,
            converged: true,
            iterations: 0,
            history: vec![],
        };
    }
    scale_coupling(&mut v, 1.0 / n0);

    let mut history = Vec::new();
    let mut prev = 0.0f64;
    for it in 1..=max_iters {
        let u = op.forward(&v);
        let rayleigh = op.inner_q(&u, &u); // <C*C v, v> with |v| = 1
        let est = rayleigh.max(0.0).sqrt();
        history.push(est);
        if est == 0.0 {
            return NormEstimate {
                value: 0.0,
                converged: true,
                iterations: it,
                history,
            };
        }
        let mut w = op.adjoint(&u);
        let nw = op.inner_s(&w, &w).sqrt();
        if nw == 0.0 {
            return NormEstimate {
                value: est,
                converged: true,
                iterations: it,
                history,
            };
        }
        scale_coupling(&mut w, 1.0 / nw);
        v = w;
        if it > 1 && (est - prev).abs() <= rel_tol * est {
            return NormEstimate {
                value: est,
                converged: true,
                iterations: it,
                history,
            };
        }
        prev = est;
    }
    NormEstimate {
        value: prev,
        converged: false,
        iterations: max_iters,
        history,
    }
}

pub fn randomize_coupling(s: &mut CouplingSide, rng: &mut ChaCha8Rng) {
    for v in s.a.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for v in s.b.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for alpha in s.alphas.iter_mut() {
        for v in alpha.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    for v in s.beta.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for v in s.phi.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
}

pub fn randomize_density(q: &mut DensitySide, rng: &mut ChaCha8Rng) {
    for v in q.rho.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for v in q.m.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for v in q.rho0.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for v in q.rho1.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
}

fn scale_coupling(s: &mut CouplingSide, c: f64) {
    s.a.mapv_inplace(|v| v * c);
    s.b.mapv_inplace(|v| v * c);
    for alpha in s.alphas.iter_mut() {
        alpha.mapv_inplace(|v| v * c);
    }
    s.beta.mapv_inplace(|v| v * c);
    s.phi.mapv_inplace(|v| v * c);
}

//! The monotone primal-dual iteration over the coupling and density sides,
//! step-size selection, residual diagnostics, and stopping.
//!
//! One iteration performs
//!
//! 1. `s' = J_{tau M}(s - tau C* q)` — the dual resolvents of the
//!    couplings module; the value-function component of `M` is zero, so
//!    its update is exactly the elliptic step hidden inside `C*`;
//! 2. `s~ = 2 s' - s`;
//! 3. `q' = J_{sigma dXi}(q + sigma C s~)` — the pointwise kinetic prox
//!    with the pinned initial slice and the terminal trace update.
//!
//! The terminal density update follows the specialized form of the
//! algorithm: node `nt` is driven by its trace channel only (the running
//! channel input at the last node does not enter), and the result is
//! clamped at zero.

use ndarray::{Array1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::couplings::{LocalCoupling, NonlocalCoupling, TerminalCoupling};
use crate::dynamics;
use crate::elliptic::EllipticPlan;
use crate::error::{Error, Result};
use crate::field::{CouplingShape, CouplingSide, DensitySide, TimeSlice};
use crate::grid::SpaceTimeGrid;
use crate::ops::{estimate_operator_norm, NormEstimate, SystemOperator};
use crate::spectral::BasisSet;
use crate::stencil;

/// Density floor below which the value-function equation is not evaluated.
pub const RHO_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Joint bound on the value-function and continuity residual norms.
    pub tol_residual: f64,
    /// Bound on the relative change of both sides per iteration.
    pub tol_change: f64,
    /// Step sizes satisfy `tau sigma |C|^2 = safety`, in (0, 1).
    pub safety: f64,
    /// `tau / sigma` balance; 1 splits evenly.
    pub step_ratio: f64,
    /// Explicit `(tau, sigma)`; overrides the norm-based selection but is
    /// still validated against the step-size condition.
    pub steps_override: Option<(f64, f64)>,
    pub report_every: usize,
    pub seed: u64,
    /// Power-iteration budget for the norm estimate.
    pub norm_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            tol_residual: 1e-4,
            tol_change: 1e-6,
            safety: 0.95,
            step_ratio: 1.0,
            steps_override: None,
            report_every: 25,
            seed: 0,
            norm_iters: 200,
        }
    }
}

/// Balanced step sizes under the condition `tau sigma |C|^2 < 1`.
pub fn select_steps(norm: f64, safety: f64, step_ratio: f64) -> Result<(f64, f64)> {
    if !(safety > 0.0 && safety < 1.0) {
        return Err(Error::Config(format!(
            "step safety factor must lie in (0, 1), got {safety}"
        )));
    }
    if !(norm > 0.0) {
        return Err(Error::Config(format!(
            "operator norm estimate {norm} is not positive"
        )));
    }
    if !(step_ratio > 0.0) {
        return Err(Error::Config("step ratio must be positive".into()));
    }
    let base = safety.sqrt() / norm;
    Ok((base * step_ratio, base / step_ratio))
}

/// Per-report diagnostics: PDE residuals, coupling consistency, mass drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iter: usize,
    pub rel_change_s: f64,
    pub rel_change_q: f64,
    /// L2 residual of the discrete value-function equation on occupied cells.
    pub hjb_residual: f64,
    /// L2 residual of the discrete transport equation.
    pub continuity_residual: f64,
    /// `|a - K c(rho)|` aggregated over nodes (0 when disabled).
    pub running_nonlocal_residual: f64,
    /// `|b - S c(rho(., 1))|` (0 when disabled).
    pub terminal_nonlocal_residual: f64,
    /// Resolvent-based optimality gaps, one per local coupling.
    pub local_gaps: Vec<f64>,
    pub terminal_gap: f64,
    /// Max over nodes of the total-mass deviation from the initial slice.
    pub mass_drift: f64,
}

/// Assembled problem: operator pair, prepared resolvents, data, steps.
#[derive(Debug)]
pub struct MfgProblem {
    pub grid: SpaceTimeGrid,
    pub basis: Arc<BasisSet>,
    pub plan: Arc<EllipticPlan>,
    pub operator: SystemOperator,
    pub running_nonlocal: NonlocalCoupling,
    pub terminal_nonlocal: NonlocalCoupling,
    pub locals: Vec<LocalCoupling>,
    pub terminal: TerminalCoupling,
    pub rho_init: TimeSlice,
    pub config: SolverConfig,
    pub tau: f64,
    pub sigma: f64,
    pub norm_estimate: NormEstimate,
}

/// Final state and trace of a run.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub s: CouplingSide,
    pub q: DensitySide,
    pub reports: Vec<IterationReport>,
    pub converged: bool,
    pub iterations: usize,
}

/// Everything the assembly needs besides the grid and solver knobs.
pub struct ProblemData {
    pub basis: Arc<BasisSet>,
    /// Moment matrix of the running kernel, if the coupling is enabled.
    pub running_matrix: Option<crate::spectral::MomentMatrix>,
    /// Moment matrix of the terminal kernel, if enabled.
    pub terminal_matrix: Option<crate::spectral::MomentMatrix>,
    pub locals: Vec<LocalCoupling>,
    pub terminal: TerminalCoupling,
    pub rho_init: TimeSlice,
}

impl MfgProblem {
    pub fn assemble(grid: SpaceTimeGrid, data: ProblemData, config: SolverConfig) -> Result<Self> {
        let plan = Arc::new(EllipticPlan::new(&grid)?);
        for coupling in &data.locals {
            coupling.validate(&grid)?;
        }
        data.terminal.validate(&grid)?;
        if data.rho_init.dim() != grid.slice_shape() {
            return Err(Error::Config("initial density does not match the grid".into()));
        }
        if data.rho_init.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("initial density must be finite and nonnegative".into()));
        }
        let shape = CouplingShape {
            r_running: data.running_matrix.as_ref().map_or(0, |_| data.basis.r),
            r_terminal: data.terminal_matrix.as_ref().map_or(0, |_| data.basis.r),
            n_local: data.locals.len(),
        };
        let operator = SystemOperator::new(grid.clone(), data.basis.clone(), plan.clone(), shape)?;
        let norm_estimate = estimate_operator_norm(&operator, config.norm_iters, 1e-6, config.seed);
        let (tau, sigma) = match config.steps_override {
            Some((tau, sigma)) => {
                let product = tau * sigma * norm_estimate.value * norm_estimate.value;
                if !(tau > 0.0 && sigma > 0.0) || product >= 1.0 {
                    return Err(Error::Config(format!(
                        "step sizes tau={tau}, sigma={sigma} violate \
                         tau*sigma*|C|^2 < 1 (got {product:.3})"
                    )));
                }
                (tau, sigma)
            }
            None => select_steps(norm_estimate.value, config.safety, config.step_ratio)?,
        };
        let running_nonlocal = match data.running_matrix {
            Some(m) => NonlocalCoupling::linear(m, tau)?,
            None => NonlocalCoupling::disabled(),
        };
        let terminal_nonlocal = match data.terminal_matrix {
            Some(m) => NonlocalCoupling::linear(m, tau)?,
            None => NonlocalCoupling::disabled(),
        };
        Ok(Self {
            grid,
            basis: data.basis,
            plan,
            operator,
            running_nonlocal,
            terminal_nonlocal,
            locals: data.locals,
            terminal: data.terminal,
            rho_init: data.rho_init,
            config,
            tau,
            sigma,
            norm_estimate,
        })
    }

    pub fn initial_state(&self) -> (CouplingSide, DensitySide) {
        let s = CouplingSide::zeros(&self.grid, self.operator.shape());
        let q = DensitySide::from_initial_density(&self.grid, &self.rho_init);
        (s, q)
    }

    /// One primal-dual step; returns the fresh pair.
    pub fn pdhg_step(&self, s: &CouplingSide, q: &DensitySide) -> Result<(CouplingSide, DensitySide)> {
        let tau = self.tau;
        let sigma = self.sigma;

        // dual half-step: s - tau C* q, then the componentwise resolvents
        let cstar = self.operator.apply_adjoint(q)?;
        let mut s_new = s.clone();
        s_new.axpy(-tau, &cstar);

        if let Some(resolver) = &self.running_nonlocal.resolvent {
            let rows: Vec<Vec<f64>> = s_new
                .a
                .outer_iter()
                .into_par_iter()
                .map(|row| {
                    let mut v = row.to_vec();
                    resolver.resolve(&mut v, tau).map(|_| v)
                })
                .collect::<Result<_>>()?;
            for (k, row) in rows.into_iter().enumerate() {
                s_new.a.row_mut(k).assign(&Array1::from_vec(row));
            }
        }
        if let Some(resolver) = &self.terminal_nonlocal.resolvent {
            let mut v = s_new.b.to_vec();
            resolver.resolve(&mut v, tau)?;
            s_new.b.assign(&Array1::from_vec(v));
        }
        for (coupling, alpha) in self.locals.iter().zip(s_new.alphas.iter_mut()) {
            coupling.resolvent_precombined(alpha, tau);
        }
        self.terminal.resolvent_precombined(&mut s_new.beta, tau);
        // phi: the monotone map has no phi component, the half-step stands

        // primal step on the extrapolated dual state
        let s_tilde = CouplingSide::extrapolate(&s_new, s);
        let forward = self.operator.apply(&s_tilde)?;
        let mut v = q.clone();
        v.axpy(sigma, &forward);

        // terminal slice from its trace channel, clamped at zero
        let terminal = v.rho1.mapv(|x| x.max(0.0));
        let (rho, m) = dynamics::prox_density_block(&v.rho, &v.m, &self.rho_init, terminal, sigma);
        let mut q_new = DensitySide {
            rho,
            m,
            rho0: q.rho0.clone(),
            rho1: q.rho1.clone(),
        };
        q_new.synchronize_traces();
        Ok((s_new, q_new))
    }

    /// Residual diagnostics at a given state.
    pub fn compute_residuals(&self, s: &CouplingSide, q: &DensitySide) -> IterationReport {
        let grid = &self.grid;
        let nt = grid.nt;
        let w2 = grid.cell_area();
        let wst = w2 * grid.ht;

        // value-function equation on occupied interior nodes: the backward
        // time difference and the cell gradient are collocated at node k
        let mut hjb_sq = 0.0;
        for k in 1..nt {
            let phik = s.phi.index_axis(Axis(0), k);
            let phik1 = s.phi.index_axis(Axis(0), k - 1);
            let gx = stencil::grad_cells(&phik, 0, grid.hx);
            let gy = stencil::grad_cells(&phik, 1, grid.hx);
            let mut drive = TimeSlice::zeros(grid.slice_shape());
            if self.operator.shape().r_running > 0 {
                let row = s.a.row(k);
                self.basis
                    .accumulate_synthesis(row.as_slice().unwrap(), 1.0, &mut drive);
            }
            for alpha in &s.alphas {
                drive.scaled_add(1.0, &alpha.index_axis(Axis(0), k));
            }
            let rhok = q.rho.index_axis(Axis(0), k);
            ndarray::Zip::from(&rhok)
                .and(&phik)
                .and(&phik1)
                .and(&gx)
                .and(&gy)
                .and(&drive)
                .for_each(|&r, &p, &p0, &dx, &dy, &f| {
                    if r > RHO_FLOOR {
                        let res = -(p - p0) / grid.ht + 0.5 * (dx * dx + dy * dy) - f;
                        hjb_sq += res * res * wst;
                    }
                });
        }

        // transport equation: forward difference against the divergence of
        // the cell-collocated flux
        let mut cont_sq = 0.0;
        for k in 0..nt {
            let lo = q.rho.index_axis(Axis(0), k);
            let hi = q.rho.index_axis(Axis(0), k + 1);
            let mut div = TimeSlice::zeros(grid.slice_shape());
            for axis in 0..2 {
                let comp = q.m.index_axis(Axis(0), k);
                let comp = comp.index_axis(Axis(0), axis);
                div.scaled_add(-1.0, &stencil::grad_cells_transpose(&comp, axis, grid.hx));
            }
            ndarray::Zip::from(&hi).and(&lo).and(&div).for_each(|&h, &l, &d| {
                let res = (h - l) / grid.ht + d;
                cont_sq += res * res * wst;
            });
        }

        let running_nonlocal_residual = match self
            .running_nonlocal
            .resolvent
            .as_ref()
            .and_then(|r| r.moment_matrix())
        {
            Some(k_matrix) => {
                let mut acc = 0.0;
                for k in 0..=nt {
                    let c = self.basis.project(&q.rho.index_axis(Axis(0), k).to_owned());
                    let target = &k_matrix.entries
                        * nalgebra::DVector::from_iterator(c.len(), c.iter().copied());
                    let diff: f64 = s
                        .a
                        .row(k)
                        .iter()
                        .zip(target.iter())
                        .map(|(a, t)| (a - t) * (a - t))
                        .sum();
                    acc += diff * grid.ht;
                }
                acc.sqrt()
            }
            None => 0.0,
        };
        let terminal_nonlocal_residual = match self
            .terminal_nonlocal
            .resolvent
            .as_ref()
            .and_then(|r| r.moment_matrix())
        {
            Some(s_matrix) => {
                let c = self.basis.project(&q.rho1);
                let target = &s_matrix.entries
                    * nalgebra::DVector::from_iterator(c.len(), c.iter().copied());
                s.b.iter()
                    .zip(target.iter())
                    .map(|(b, t)| (b - t) * (b - t))
                    .sum::<f64>()
                    .sqrt()
            }
            None => 0.0,
        };

        let local_gaps: Vec<f64> = self
            .locals
            .iter()
            .zip(&s.alphas)
            .map(|(c, alpha)| c.optimality_gap(grid, alpha, &q.rho, self.tau))
            .collect();
        let terminal_gap = self.terminal.optimality_gap(grid, &s.beta, &q.rho1, self.tau);

        let mass0: f64 = q.rho.index_axis(Axis(0), 0).sum() * w2;
        let mass_drift = (0..=nt)
            .map(|k| (q.rho.index_axis(Axis(0), k).sum() * w2 - mass0).abs())
            .fold(0.0f64, f64::max);

        IterationReport {
            iter: 0,
            rel_change_s: f64::NAN,
            rel_change_q: f64::NAN,
            hjb_residual: hjb_sq.sqrt(),
            continuity_residual: cont_sq.sqrt(),
            running_nonlocal_residual,
            terminal_nonlocal_residual,
            local_gaps,
            terminal_gap,
            mass_drift,
        }
    }

    /// Iterate to convergence or the iteration cap.
    pub fn run(&self) -> Result<SolveOutcome> {
        let (mut s, mut q) = self.initial_state();
        let mut reports = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        let cadence = self.config.report_every.max(1);

        for it in 1..=self.config.max_iters {
            iterations = it;
            let (s_new, q_new) = self.pdhg_step(&s, &q)?;
            if let Err(component) = s_new.is_finite() {
                return Err(Error::Divergence { component, iteration: it });
            }
            if let Err(component) = q_new.is_finite() {
                return Err(Error::Divergence { component, iteration: it });
            }

            let at_report = it % cadence == 0 || it == self.config.max_iters;
            if at_report {
                let mut ds = s_new.clone();
                ds.axpy(-1.0, &s);
                let mut dq = q_new.clone();
                dq.axpy(-1.0, &q);
                let ns = self.operator.inner_s(&s, &s).sqrt().max(1e-30);
                let nq = self.operator.inner_q(&q, &q).sqrt().max(1e-30);
                let rel_s = self.operator.inner_s(&ds, &ds).sqrt() / ns;
                let rel_q = self.operator.inner_q(&dq, &dq).sqrt() / nq;

                let mut report = self.compute_residuals(&s_new, &q_new);
                report.iter = it;
                report.rel_change_s = rel_s;
                report.rel_change_q = rel_q;
                let resid_ok = report.hjb_residual < self.config.tol_residual
                    && report.continuity_residual < self.config.tol_residual;
                let change_ok =
                    rel_s < self.config.tol_change && rel_q < self.config.tol_change;
                reports.push(report);
                if resid_ok && change_ok {
                    converged = true;
                    s = s_new;
                    q = q_new;
                    break;
                }
            }
            s = s_new;
            q = q_new;
        }
        Ok(SolveOutcome {
            s,
            q,
            reports,
            converged,
            iterations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{compute_moment_matrix, KernelSpec};

    fn trivial_problem(nx: usize, nt: usize) -> MfgProblem {
        let grid = SpaceTimeGrid::unit_box(nx, nt).unwrap();
        let basis = Arc::new(BasisSet::new(&grid, 4).unwrap());
        let rho_init = TimeSlice::from_elem(grid.slice_shape(), 0.25);
        let terminal = TerminalCoupling::free(&grid, TimeSlice::zeros(grid.slice_shape()));
        let data = ProblemData {
            basis,
            running_matrix: None,
            terminal_matrix: None,
            locals: vec![],
            terminal,
            rho_init,
        };
        MfgProblem::assemble(grid, data, SolverConfig::default()).unwrap()
    }

    #[test]
    fn select_steps_reference_value() {
        let (tau, sigma) = select_steps(2.0, 0.95, 1.0).unwrap();
        assert!((tau - 0.95f64.sqrt() / 2.0).abs() <= 1e-15);
        assert_eq!(tau, sigma);
        assert!(select_steps(2.0, 1.0, 1.0).is_err());
        assert!(select_steps(0.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn uniform_stationary_state_is_fixed_point() {
        let problem = trivial_problem(8, 4);
        let (s, q) = problem.initial_state();
        let (s1, q1) = problem.pdhg_step(&s, &q).unwrap();
        let mut ds = s1.clone();
        ds.axpy(-1.0, &s);
        let mut dq = q1.clone();
        dq.axpy(-1.0, &q);
        assert!(problem.operator.inner_s(&ds, &ds).sqrt() <= 1e-10);
        assert!(problem.operator.inner_q(&dq, &dq).sqrt() <= 1e-10);
        let report = problem.compute_residuals(&s1, &q1);
        assert!(report.hjb_residual <= 1e-10);
        assert!(report.continuity_residual <= 1e-10);
        assert!(report.mass_drift <= 1e-12);
    }

    #[test]
    fn trivial_scenario_converges_immediately() {
        let mut problem = trivial_problem(8, 4);
        problem.config.report_every = 1;
        let outcome = problem.run().unwrap();
        assert!(outcome.converged);
        assert!(outcome.iterations <= 2, "took {}", outcome.iterations);
        assert!(outcome.reports.last().unwrap().hjb_residual <= 1e-10);
    }

    #[test]
    fn step_override_validated() {
        let grid = SpaceTimeGrid::unit_box(8, 4).unwrap();
        let basis = Arc::new(BasisSet::new(&grid, 4).unwrap());
        let rho_init = TimeSlice::from_elem(grid.slice_shape(), 0.25);
        let terminal = TerminalCoupling::free(&grid, TimeSlice::zeros(grid.slice_shape()));
        let data = ProblemData {
            basis,
            running_matrix: None,
            terminal_matrix: None,
            locals: vec![],
            terminal,
            rho_init,
        };
        let config = SolverConfig {
            steps_override: Some((10.0, 10.0)),
            ..SolverConfig::default()
        };
        let err = MfgProblem::assemble(grid, data, config).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn determinism_of_runs() {
        let grid = SpaceTimeGrid::unit_box(8, 4).unwrap();
        let basis = Arc::new(BasisSet::new(&grid, 9).unwrap());
        let kernel = KernelSpec::SymmetricGaussian { amplitude: 1.0, delta: 0.3 };
        let matrix = compute_moment_matrix(&kernel, &basis, &grid, 64).unwrap();
        let mut rho_init = TimeSlice::zeros(grid.slice_shape());
        for i in 0..8 {
            for j in 0..8 {
                let x = grid.center(0, i);
                let y = grid.center(1, j);
                rho_init[[i, j]] = (-2.0 * (x * x + y * y)).exp();
            }
        }
        let total = rho_init.sum() * grid.cell_area();
        rho_init.mapv_inplace(|v| v / total);
        let cost = TimeSlice::from_shape_fn(grid.slice_shape(), |(i, _)| {
            let x = grid.center(0, i);
            x * x
        });
        let make = || {
            let data = ProblemData {
                basis: basis.clone(),
                running_matrix: Some(matrix.clone()),
                terminal_matrix: None,
                locals: vec![LocalCoupling::Box {
                    lower: crate::field::ScalarField::zeros(grid.scalar_shape()),
                    upper: crate::field::ScalarField::from_elem(grid.scalar_shape(), f64::INFINITY),
                }],
                terminal: TerminalCoupling::free(&grid, cost.clone()),
                rho_init: rho_init.clone(),
            };
            let config = SolverConfig {
                max_iters: 120,
                report_every: 20,
                ..SolverConfig::default()
            };
            MfgProblem::assemble(grid.clone(), data, config).unwrap().run().unwrap()
        };
        let o1 = make();
        let o2 = make();
        assert_eq!(o1.iterations, o2.iterations);
        for (r1, r2) in o1.reports.iter().zip(&o2.reports) {
            assert_eq!(r1.hjb_residual.to_bits(), r2.hjb_residual.to_bits());
            assert_eq!(r1.continuity_residual.to_bits(), r2.continuity_residual.to_bits());
        }
        assert_eq!(o1.q.rho, o2.q.rho);
    }
}

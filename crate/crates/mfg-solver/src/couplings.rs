//! Coupling definitions and the resolvents of the maximally monotone map
//! acting on the dual variables.
//!
//! Local running couplings are either hard density boxes (whose conjugate
//! prox is a closed-form clip, obstacles being the degenerate box
//! `lower = upper = 0`) or an entropic penalty (whose conjugate prox is a
//! scalar root-find). Nonlocal couplings are linear in the kernel-averaged
//! density; their resolvents are small dense solves against the moment
//! matrix, independent of the grid.

use std::sync::Arc;

use ndarray::{Array1, Axis};

use crate::error::{Error, Result};
use crate::field::{ScalarField, TimeSlice};
use crate::grid::SpaceTimeGrid;
use crate::spectral::MomentMatrix;

/// Local running coupling `f_0`.
#[derive(Debug, Clone)]
pub enum LocalCoupling {
    /// Pointwise density constraint `lower <= rho <= upper`; equality
    /// models obstacles, `upper = inf` disables the upper bound.
    Box {
        lower: ScalarField,
        upper: ScalarField,
    },
    /// `epsilon * log(rho)` running cost (conjugate `epsilon exp(alpha/epsilon)`).
    Entropy { epsilon: f64 },
}

impl LocalCoupling {
    pub fn validate(&self, grid: &SpaceTimeGrid) -> Result<()> {
        match self {
            LocalCoupling::Box { lower, upper } => {
                if lower.dim() != grid.scalar_shape() || upper.dim() != grid.scalar_shape() {
                    return Err(Error::Config("box bound fields do not match the grid".into()));
                }
                for (lo, hi) in lower.iter().zip(upper.iter()) {
                    if !(*lo >= 0.0 && *hi >= *lo) {
                        return Err(Error::Config(format!(
                            "box bounds need 0 <= lower <= upper, got [{lo}, {hi}]"
                        )));
                    }
                }
                Ok(())
            }
            LocalCoupling::Entropy { epsilon } => {
                if *epsilon > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config("entropy coupling needs epsilon > 0".into()))
                }
            }
        }
    }

    /// Apply the conjugate prox at every grid point:
    /// `alpha <- J_tau(alpha + tau rho)`.
    pub fn resolvent_field(&self, alpha: &mut ScalarField, rho: &ScalarField, tau: f64) {
        alpha.scaled_add(tau, rho);
        self.resolvent_precombined(alpha, tau);
    }

    /// Same prox on an input that already contains `alpha + tau rho`.
    pub fn resolvent_precombined(&self, z: &mut ScalarField, tau: f64) {
        match self {
            LocalCoupling::Box { lower, upper } => {
                ndarray::Zip::from(z)
                    .and(lower)
                    .and(upper)
                    .par_for_each(|a, &lo, &hi| {
                        *a = resolvent_box(*a, tau, lo, hi);
                    });
            }
            LocalCoupling::Entropy { epsilon } => {
                let eps = *epsilon;
                ndarray::Zip::from(z).par_for_each(|a| {
                    *a = resolvent_entropy(*a, tau, eps);
                });
            }
        }
    }

    /// Graph-distance proxy for the consistency diagnostics: RMS change of
    /// the dual field under one more resolvent application, scaled by tau.
    pub fn optimality_gap(
        &self,
        grid: &SpaceTimeGrid,
        alpha: &ScalarField,
        rho: &ScalarField,
        tau: f64,
    ) -> f64 {
        let mut next = alpha.clone();
        self.resolvent_field(&mut next, rho, tau);
        next.scaled_add(-1.0, alpha);
        let w = grid.cell_area() * grid.ht;
        (next.iter().map(|v| v * v).sum::<f64>() * w).sqrt() / tau
    }

    /// Conjugate functional value (diagnostics only).
    pub fn conjugate_value(&self, grid: &SpaceTimeGrid, alpha: &ScalarField) -> f64 {
        let w = grid.cell_area() * grid.ht;
        match self {
            LocalCoupling::Box { lower, upper } => {
                let mut acc = 0.0;
                // left-endpoint rule in time: running couplings act on [0, 1)
                for k in 0..grid.nt {
                    let a = alpha.index_axis(Axis(0), k);
                    let lo = lower.index_axis(Axis(0), k);
                    let hi = upper.index_axis(Axis(0), k);
                    for ((a, lo), hi) in a.iter().zip(lo.iter()).zip(hi.iter()) {
                        acc += mul_bound(*a, *lo).max(mul_bound(*a, *hi));
                    }
                }
                acc * w
            }
            LocalCoupling::Entropy { epsilon } => {
                let mut acc = 0.0;
                for k in 0..grid.nt {
                    let a = alpha.index_axis(Axis(0), k);
                    for v in a.iter() {
                        acc += epsilon * (v / epsilon).exp();
                    }
                }
                acc * w
            }
        }
    }
}

/// `0 * inf = 0` convention for conjugates of boxes with open bounds.
fn mul_bound(alpha: f64, bound: f64) -> f64 {
    if alpha == 0.0 {
        0.0
    } else {
        alpha * bound
    }
}

/// Prox of the conjugate of the box indicator:
/// `min(max(0, z - tau upper), z - tau lower)` with `z = alpha + tau rho`
/// precombined by the caller.
pub fn resolvent_box(z: f64, tau: f64, lower: f64, upper: f64) -> f64 {
    let hi_shift = z - tau * upper; // -inf when upper = inf
    let lo_shift = z - tau * lower;
    hi_shift.max(0.0).min(lo_shift)
}

/// Prox of the conjugate `epsilon exp(alpha/epsilon)` of the entropy
/// coupling: the unique root of `alpha + tau exp(alpha/epsilon) = z`.
///
/// Solved as `tau beta + eps ln beta = z` in `beta = exp(alpha/eps)`, which
/// cannot overflow; for `z` far in the linear regime the exponential term
/// is below round-off and `alpha = z - tau exp(z/eps)` directly.
pub fn resolvent_entropy(z: f64, tau: f64, eps: f64) -> f64 {
    debug_assert!(tau > 0.0 && eps > 0.0);
    let tail = z / eps;
    if tail < -30.0 {
        // exp(z/eps) <= 1e-13: one fixed-point refinement is exact to f64
        let a1 = z - tau * (tail).exp();
        return z - tau * (a1 / eps).exp();
    }
    // Newton on f(beta) = tau beta + eps ln(beta) - z, increasing on (0, inf)
    let mut beta = if z > 0.0 { (z / tau).max(1e-300) } else { (tail).exp() };
    if !beta.is_finite() || beta <= 0.0 {
        beta = 1.0;
    }
    for _ in 0..200 {
        let f = tau * beta + eps * beta.ln() - z;
        let df = tau + eps / beta;
        let step = f / df;
        let mut next = beta - step;
        if next <= 0.0 {
            next = beta * 0.5;
        }
        if (next - beta).abs() <= 1e-16 * beta.abs() {
            beta = next;
            break;
        }
        beta = next;
    }
    // alpha = z - tau beta; polish once in the original variable
    let alpha = z - tau * beta;
    let g = alpha + tau * (alpha / eps).exp() - z;
    let dg = 1.0 + tau / eps * (alpha / eps).exp();
    alpha - g / dg
}

/// Prox of the terminal conjugate with cost offset `g`:
/// `min(max(g, z - tau e_upper), z - tau e_lower)`.
pub fn resolvent_terminal_box(z: f64, tau: f64, g: f64, e_lower: f64, e_upper: f64) -> f64 {
    let hi_shift = z - tau * e_upper;
    let lo_shift = z - tau * e_lower;
    hi_shift.max(g).min(lo_shift)
}

/// Terminal coupling `g_0`: cost slice plus terminal density box.
#[derive(Debug, Clone)]
pub struct TerminalCoupling {
    pub cost: TimeSlice,
    pub lower: TimeSlice,
    pub upper: TimeSlice,
}

impl TerminalCoupling {
    /// Free terminal condition with the given cost: `0 <= rho(1) < inf`.
    pub fn free(grid: &SpaceTimeGrid, cost: TimeSlice) -> Self {
        Self {
            cost,
            lower: TimeSlice::zeros(grid.slice_shape()),
            upper: TimeSlice::from_elem(grid.slice_shape(), f64::INFINITY),
        }
    }

    pub fn validate(&self, grid: &SpaceTimeGrid) -> Result<()> {
        if self.cost.dim() != grid.slice_shape()
            || self.lower.dim() != grid.slice_shape()
            || self.upper.dim() != grid.slice_shape()
        {
            return Err(Error::Config("terminal coupling fields do not match the grid".into()));
        }
        for (lo, hi) in self.lower.iter().zip(self.upper.iter()) {
            if !(*lo >= 0.0 && *hi >= *lo) {
                return Err(Error::Config(format!(
                    "terminal bounds need 0 <= lower <= upper, got [{lo}, {hi}]"
                )));
            }
        }
        if !self.cost.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("terminal cost must be finite".into()));
        }
        Ok(())
    }

    pub fn resolvent_field(&self, beta: &mut TimeSlice, rho1: &TimeSlice, tau: f64) {
        beta.scaled_add(tau, rho1);
        self.resolvent_precombined(beta, tau);
    }

    /// Prox on an input that already contains `beta + tau rho(., 1)`.
    pub fn resolvent_precombined(&self, z: &mut TimeSlice, tau: f64) {
        ndarray::Zip::from(z)
            .and(&self.cost)
            .and(&self.lower)
            .and(&self.upper)
            .par_for_each(|b, &g, &lo, &hi| {
                *b = resolvent_terminal_box(*b, tau, g, lo, hi);
            });
    }

    pub fn optimality_gap(
        &self,
        grid: &SpaceTimeGrid,
        beta: &TimeSlice,
        rho1: &TimeSlice,
        tau: f64,
    ) -> f64 {
        let mut next = beta.clone();
        self.resolvent_field(&mut next, rho1, tau);
        next.scaled_add(-1.0, beta);
        (next.iter().map(|v| v * v).sum::<f64>() * grid.cell_area()).sqrt() / tau
    }

    /// `V_0^*(beta) = sum max((beta - g) lower, (beta - g) upper) hx^2`.
    pub fn conjugate_value(&self, grid: &SpaceTimeGrid, beta: &TimeSlice) -> f64 {
        let mut acc = 0.0;
        for ((b, g), (lo, hi)) in beta
            .iter()
            .zip(self.cost.iter())
            .zip(self.lower.iter().zip(self.upper.iter()))
        {
            let d = b - g;
            acc += mul_bound(d, *lo).max(mul_bound(d, *hi));
        }
        acc * grid.cell_area()
    }
}

/// Resolvent supplier for the coefficient variables of a nonlocal coupling.
/// The linear couplings of the experiments resolve through the moment
/// matrix; user extensions provide their own implementation.
pub trait CoefficientResolvent: std::fmt::Debug + Send + Sync {
    /// In-place `coeffs <- J_tau(coeffs)` where the input already contains
    /// `coeffs + tau * (projected density)` assembled by the solver.
    fn resolve(&self, coeffs: &mut [f64], tau: f64) -> Result<()>;
    fn moment_matrix(&self) -> Option<&MomentMatrix>;
}

/// Linear nonlocal coupling `f_1(z) = z` (or `g_1(z) = z`): the resolvent
/// is `(K + tau I)^{-1} K`, one small dense solve per time node.
#[derive(Debug)]
pub struct LinearNonlocal {
    matrix: MomentMatrix,
}

impl LinearNonlocal {
    /// Requires a monotone moment matrix; prepares the factorization cache.
    pub fn new(mut matrix: MomentMatrix, tau: f64) -> Result<Self> {
        let lambda_min = matrix.monotonicity_check();
        if lambda_min < -1e-8 {
            return Err(Error::Config(format!(
                "kernel moment matrix is not monotone: lambda_min = {lambda_min:.3e}"
            )));
        }
        if tau != 0.0 {
            matrix.prepare_resolvent(tau)?;
        }
        Ok(Self { matrix })
    }
}

impl CoefficientResolvent for LinearNonlocal {
    fn resolve(&self, coeffs: &mut [f64], tau: f64) -> Result<()> {
        self.matrix.apply_resolvent(coeffs, tau)
    }
    fn moment_matrix(&self) -> Option<&MomentMatrix> {
        Some(&self.matrix)
    }
}

/// A nonlocal coupling slot: disabled, or a coefficient resolvent.
#[derive(Debug, Clone, Default)]
pub struct NonlocalCoupling {
    pub resolvent: Option<Arc<dyn CoefficientResolvent>>,
}

impl NonlocalCoupling {
    pub fn disabled() -> Self {
        Self { resolvent: None }
    }

    pub fn linear(matrix: MomentMatrix, tau: f64) -> Result<Self> {
        Ok(Self {
            resolvent: Some(Arc::new(LinearNonlocal::new(matrix, tau)?)),
        })
    }

    pub fn enabled(&self) -> bool {
        self.resolvent.is_some()
    }
}

/// Convenience wrapper around [`MomentMatrix::apply_resolvent`] that
/// factors on the fly: returns the solution of `(K + tau I) a = K a_in`.
pub fn resolvent_linear_coefficients(
    a_in: &Array1<f64>,
    tau: f64,
    matrix: &MomentMatrix,
) -> Result<Array1<f64>> {
    let mut m = matrix.clone();
    if tau != 0.0 {
        m.prepare_resolvent(tau)?;
    }
    let mut out = a_in.to_vec();
    m.apply_resolvent(&mut out, tau)?;
    Ok(Array1::from_vec(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_resolvent_closed_forms() {
        // point box (obstacle): identity
        for &z in &[-3.0, -0.2, 0.0, 0.5, 10.0] {
            assert_eq!(resolvent_box(z, 0.1, 0.0, 0.0), z);
        }
        // active upper bound
        let z = 0.0 + 0.1 * 5.0;
        assert_relative_eq!(resolvent_box(z, 0.1, 0.0, 4.0), 0.1);
        // inactive constraint: dual goes to zero
        let z = 0.0 + 0.1 * 2.0;
        assert_relative_eq!(resolvent_box(z, 0.1, 0.0, 4.0), 0.0);
        // open upper bound
        assert_eq!(resolvent_box(1.0, 0.1, 0.0, f64::INFINITY), 0.0);
        assert_eq!(resolvent_box(-1.0, 0.1, 0.0, f64::INFINITY), -1.0);
    }

    #[test]
    fn box_resolvent_matches_grid_search_prox() {
        // conjugate of the box indicator on [lo, hi] is
        // max(alpha lo, alpha hi); brute-force its prox on a fine grid
        let cases: [(f64, f64, f64); 3] = [(0.0, 4.0, 0.37), (0.5, 2.0, 0.81), (1.0, 1.0, 0.2)];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (lo, hi, tau) in cases {
            for _ in 0..20 {
                let z = rng.gen_range(-4.0..4.0);
                let mut best = (f64::INFINITY, 0.0);
                let mut alpha = -10.0;
                while alpha <= 10.0 {
                    let conj = (alpha * lo).max(alpha * hi);
                    let val = conj + (alpha - z) * (alpha - z) / (2.0 * tau);
                    if val < best.0 {
                        best = (val, alpha);
                    }
                    alpha += 1e-4;
                }
                let got = resolvent_box(z, tau, lo, hi);
                assert!(
                    (got - best.1).abs() <= 2e-4,
                    "z={z}: {} vs grid {}",
                    got,
                    best.1
                );
            }
        }
    }

    #[test]
    fn entropy_resolvent_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10_000 {
            let z = rng.gen_range(-20.0..20.0);
            let tau = rng.gen_range(0.01..1.0);
            let eps = [0.01, 0.1, 1.0][rng.gen_range(0..3)];
            let a = resolvent_entropy(z, tau, eps);
            let resid = a + tau * (a / eps).exp() - z;
            assert!(
                resid.abs() <= 1e-12,
                "z={z} tau={tau} eps={eps}: alpha={a}, residual={resid}"
            );
        }
    }

    #[test]
    fn entropy_resolvent_limits() {
        // tau -> 0: identity (z/eps moderate so the conjugate term vanishes)
        let a = resolvent_entropy(0.1, 1e-14, 0.01);
        assert!((a - 0.1).abs() <= 1e-8);
        // z far negative: exponential vanishes
        let a = resolvent_entropy(-10.0, 0.1, 0.01);
        assert!((a + 10.0).abs() <= 1e-10);
    }

    #[test]
    fn entropy_resolvent_matches_bisection() {
        // independent bisection oracle on alpha + tau exp(alpha/eps) = z
        let (tau, eps, z) = (0.1f64, 0.01f64, 0.0f64);
        let (mut lo, mut hi) = (-1.0f64, 0.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let g = mid + tau * (mid / eps).exp() - z;
            if g > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert!((oracle + 0.0175).abs() <= 2e-4, "oracle {oracle}");
        let got = resolvent_entropy(z, tau, eps);
        assert!((got - oracle).abs() <= 1e-10);
    }

    #[test]
    fn terminal_resolvent_closed_forms() {
        // free terminal box collapses to min(max(g, z), z)
        for &(g, z) in &[(0.0, 1.2), (0.0, -0.4), (1.0, 0.9), (1.0, 1.7)] {
            let out = resolvent_terminal_box(z, 0.1, g, 0.0, 0.0);
            assert_eq!(out, z.max(g).min(z));
            assert_eq!(out, z); // min(max(g, z), z) = z always
        }
        assert_relative_eq!(resolvent_terminal_box(0.9, 0.1, 1.0, 0.0, 4.0), 0.9);
        assert_relative_eq!(resolvent_terminal_box(1.0, 0.1, 0.0, 0.0, 4.0), 0.6);
    }

    #[test]
    fn scalar_resolvents_are_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let z1 = rng.gen_range(-5.0..5.0);
            let z2 = rng.gen_range(-5.0..5.0);
            let tau = rng.gen_range(0.01..2.0);
            let lo = rng.gen_range(0.0..1.0);
            let hi = lo + rng.gen_range(0.0..3.0);
            let d = (resolvent_box(z1, tau, lo, hi) - resolvent_box(z2, tau, lo, hi)).abs();
            assert!(d <= (z1 - z2).abs() + 1e-12);
            let d = (resolvent_entropy(z1, tau, 0.05) - resolvent_entropy(z2, tau, 0.05)).abs();
            assert!(d <= (z1 - z2).abs() + 1e-12);
            let g = rng.gen_range(-1.0..1.0);
            let d = (resolvent_terminal_box(z1, tau, g, lo, hi)
                - resolvent_terminal_box(z2, tau, g, lo, hi))
            .abs();
            assert!(d <= (z1 - z2).abs() + 1e-12);
        }
    }

    fn random_monotone_matrix(rng: &mut ChaCha8Rng, n: usize) -> MomentMatrix {
        // PSD symmetric part plus a small skew part
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let sym = &a * a.transpose(); // PSD
        let skew = DMatrix::from_fn(n, n, |i, j| {
            if i < j {
                rng.gen_range(-0.1..0.1)
            } else {
                0.0
            }
        });
        let m = sym + &skew - skew.transpose();
        MomentMatrix::new(m).unwrap()
    }

    #[test]
    fn linear_resolvent_identity_and_halving() {
        let eye = MomentMatrix::new(DMatrix::identity(5, 5)).unwrap();
        let a_in = Array1::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.0]);
        let out = resolvent_linear_coefficients(&a_in, 1.0, &eye).unwrap();
        for (o, i) in out.iter().zip(a_in.iter()) {
            assert_relative_eq!(*o, i / 2.0, max_relative = 1e-14);
        }
        let out = resolvent_linear_coefficients(&a_in, 0.0, &eye).unwrap();
        assert_eq!(out, a_in);
    }

    #[test]
    fn linear_resolvent_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_monotone_matrix(&mut rng, 5);
        let tau = 0.3;
        let a_in = Array1::from_shape_simple_fn(5, || rng.gen_range(-2.0..2.0));
        let out = resolvent_linear_coefficients(&a_in, tau, &m).unwrap();
        // residual of (I + tau K^-1) out = a_in, i.e. K (out - a_in) + tau out = 0
        let k = &m.entries;
        let v = nalgebra::DVector::from_iterator(5, out.iter().copied());
        let vin = nalgebra::DVector::from_iterator(5, a_in.iter().copied());
        let resid = k * (&v - &vin) + tau * &v;
        assert!(resid.norm() <= 1e-10, "{}", resid.norm());
    }

    #[test]
    fn linear_resolvent_nonexpansive_for_psd_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = DMatrix::from_fn(6, 6, |_, _| rng.gen_range(-1.0..1.0));
        let m = MomentMatrix::new(&a * a.transpose()).unwrap();
        let tau = 0.5;
        for _ in 0..50 {
            let x = Array1::from_shape_simple_fn(6, || rng.gen_range(-2.0..2.0));
            let y = Array1::from_shape_simple_fn(6, || rng.gen_range(-2.0..2.0));
            let jx = resolvent_linear_coefficients(&x, tau, &m).unwrap();
            let jy = resolvent_linear_coefficients(&y, tau, &m).unwrap();
            let num: f64 = jx.iter().zip(jy.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            assert!(num.sqrt() <= den.sqrt() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn conjugate_values_match_arithmetic() {
        let grid = SpaceTimeGrid::unit_box(8, 4).unwrap();
        // alpha = 1, box [0, 4] on the whole cylinder: 4 |Omega| = 16
        let coupling = LocalCoupling::Box {
            lower: ScalarField::zeros(grid.scalar_shape()),
            upper: ScalarField::from_elem(grid.scalar_shape(), 4.0),
        };
        let alpha = ScalarField::from_elem(grid.scalar_shape(), 1.0);
        assert_relative_eq!(coupling.conjugate_value(&grid, &alpha), 16.0, max_relative = 1e-12);
        let zero = ScalarField::zeros(grid.scalar_shape());
        assert_eq!(coupling.conjugate_value(&grid, &zero), 0.0);

        let term = TerminalCoupling {
            cost: TimeSlice::from_elem(grid.slice_shape(), 0.7),
            lower: TimeSlice::zeros(grid.slice_shape()),
            upper: TimeSlice::from_elem(grid.slice_shape(), 4.0),
        };
        let beta = TimeSlice::from_elem(grid.slice_shape(), 0.7);
        assert_eq!(term.conjugate_value(&grid, &beta), 0.0);
    }

    #[test]
    fn nonmonotone_kernel_rejected() {
        let m = MomentMatrix::new(-DMatrix::identity(4, 4)).unwrap();
        assert!(matches!(LinearNonlocal::new(m, 0.1), Err(Error::Config(_))));
    }
}

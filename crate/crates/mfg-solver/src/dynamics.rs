//! Pointwise proximal step for the kinetic energy with the nonnegativity
//! and absolute-continuity constraints, plus the boundary-time updates.
//!
//! The Hamiltonian is fixed to `H(p) = |p|^2 / 2`, so the Lagrangian is
//! `L(v) = |v|^2 / 2` and the per-cell problem
//!
//! ```text
//! min_{rho >= 0, m}  |m|^2 / (2 rho) + (rho - r)^2/(2 sigma) + |m - w|^2/(2 sigma)
//! ```
//!
//! reduces, after eliminating `m = rho w / (rho + sigma)`, to the cubic
//! `(rho - r)(rho + sigma)^2 = sigma |w|^2 / 2` with at most one positive
//! root. No positive root means the vacuum solution `(0, 0)`.

use ndarray::Axis;

use crate::error::{Error, Result};
use crate::field::{ScalarField, TimeSlice, VectorField};

/// Quadratic kinetic cost `rho L(m / rho)`, `L(v) = |v|^2 / 2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct KineticEnergy;

impl KineticEnergy {
    /// Perspective value with the closed domain conventions:
    /// zero at `(0, 0)`, infinite for `rho = 0, m != 0` or `rho < 0`.
    pub fn eval(&self, rho: f64, m: [f64; 2]) -> f64 {
        let m2 = m[0] * m[0] + m[1] * m[1];
        if rho > 0.0 {
            m2 / (2.0 * rho)
        } else if rho == 0.0 && m2 == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Pointwise prox: inputs are the already-combined quantities
/// `r = rho - sigma (...)` and `w = m - sigma grad(...)`.
pub fn prox_kinetic(r: f64, w: [f64; 2], sigma: f64) -> (f64, [f64; 2]) {
    debug_assert!(sigma > 0.0);
    let w2 = w[0] * w[0] + w[1] * w[1];
    if w2 == 0.0 {
        return (r.max(0.0), [0.0, 0.0]);
    }
    // positive root exists iff the reduced objective decreases at rho = 0+
    if r <= -w2 / (2.0 * sigma) {
        return (0.0, [0.0, 0.0]);
    }
    let rho = positive_cubic_root(r, w2.sqrt(), sigma);
    let scale = rho / (rho + sigma);
    (rho, [scale * w[0], scale * w[1]])
}

/// Safeguarded Newton for `(rho - r)(rho + sigma)^2 = sigma |w|^2 / 2`
/// on the bracket `[max(r, 0), hi]`; the left-hand side is strictly
/// increasing there.
fn positive_cubic_root(r: f64, wn: f64, sigma: f64) -> f64 {
    let target = sigma * wn * wn / 2.0;
    let lo0 = r.max(0.0);
    let mut hi = lo0 + wn * (sigma / 2.0).sqrt() + 1.0;
    let g = |rho: f64| (rho - r) * (rho + sigma) * (rho + sigma) - target;
    while g(hi) < 0.0 {
        hi = 2.0 * hi + 1.0;
    }
    let mut lo = lo0;
    let mut rho = 0.5 * (lo + hi);
    for _ in 0..200 {
        let val = g(rho);
        if val.abs() <= 1e-13 {
            break;
        }
        if val > 0.0 {
            hi = rho;
        } else {
            lo = rho;
        }
        let slope = (rho + sigma) * (3.0 * rho - 2.0 * r + sigma);
        let mut next = rho - val / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - rho).abs() <= f64::EPSILON * rho.abs() {
            rho = next;
            break;
        }
        rho = next;
    }
    rho
}

/// Hard initial condition: the node-0 slice is replaced by `rho0`.
pub fn apply_initial_constraint(rho0: &TimeSlice) -> Result<TimeSlice> {
    if rho0.iter().any(|&v| v < 0.0) {
        return Err(Error::Config("initial density has negative entries".into()));
    }
    Ok(rho0.clone())
}

/// Terminal-slice update: `rho1 - sigma (b_synth + beta - phi1)`, clamped
/// at zero. The clamp repairs transient negativity of the affine formula.
pub fn terminal_density_update(
    rho1: &TimeSlice,
    beta_tilde: &TimeSlice,
    b_synthesis: &TimeSlice,
    phi1_tilde: &TimeSlice,
    sigma: f64,
) -> TimeSlice {
    let mut out = rho1.clone();
    out.scaled_add(-sigma, b_synthesis);
    out.scaled_add(-sigma, beta_tilde);
    out.scaled_add(sigma, phi1_tilde);
    out.mapv_inplace(|v| v.max(0.0));
    out
}

/// Apply the kinetic prox across the whole cylinder.
///
/// `rho_in` and `m_in` already contain the gradient-step inputs. Node 0 is
/// pinned to `rho_init` (its flux keeps the shrinkage with the pinned
/// density), interior nodes `1..nt` solve the joint prox paired with the
/// flux of the interval they close, and node `nt` gets the terminal
/// update. Returns `(rho, m)` with traces left for the caller to sync.
pub fn prox_density_block(
    rho_in: &ScalarField,
    m_in: &VectorField,
    rho_init: &TimeSlice,
    terminal: TimeSlice,
    sigma: f64,
) -> (ScalarField, VectorField) {
    let (nodes, nx, ny) = rho_in.dim();
    let nt = nodes - 1;
    let mut rho = rho_in.clone();
    let mut m = m_in.clone();

    rho.index_axis_mut(Axis(0), 0).assign(rho_init);
    rho.index_axis_mut(Axis(0), nt).assign(&terminal);

    // interval k pairs with the density at its left node; node 0 is pinned
    // so its flux reduces to the quadratic shrinkage at fixed density
    use rayon::prelude::*;
    let slabs: Vec<(Option<TimeSlice>, ndarray::Array3<f64>)> = (0..nt)
        .into_par_iter()
        .map(|k| {
            let mut mk = m_in.index_axis(Axis(0), k).to_owned();
            if k == 0 {
                for i in 0..nx {
                    for j in 0..ny {
                        let d = rho_init[[i, j]];
                        let scale = d / (d + sigma);
                        mk[[0, i, j]] *= scale;
                        mk[[1, i, j]] *= scale;
                    }
                }
                (None, mk)
            } else {
                let mut rk = TimeSlice::zeros((nx, ny));
                for i in 0..nx {
                    for j in 0..ny {
                        let r = rho_in[[k, i, j]];
                        let w = [mk[[0, i, j]], mk[[1, i, j]]];
                        let (p, mv) = prox_kinetic(r, w, sigma);
                        rk[[i, j]] = p;
                        mk[[0, i, j]] = mv[0];
                        mk[[1, i, j]] = mv[1];
                    }
                }
                (Some(rk), mk)
            }
        })
        .collect();
    for (k, (rk, mk)) in slabs.into_iter().enumerate() {
        if let Some(rk) = rk {
            rho.index_axis_mut(Axis(0), k).assign(&rk);
        }
        m.index_axis_mut(Axis(0), k).assign(&mk);
    }
    (rho, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_flux_is_projection() {
        assert_eq!(prox_kinetic(0.5, [0.0, 0.0], 1.0), (0.5, [0.0, 0.0]));
        assert_eq!(prox_kinetic(-1.0, [0.0, 0.0], 0.3), (0.0, [0.0, 0.0]));
    }

    #[test]
    fn reference_point_matches_cubic() {
        let (rho, m) = prox_kinetic(1.0, [1.0, 0.0], 1.0);
        assert!((rho - 1.1121).abs() <= 1e-4, "{rho}");
        assert!((m[0] - 0.5266).abs() <= 1e-4, "{}", m[0]);
        assert!(m[1] == 0.0);
        // cubic residual
        let resid = (rho - 1.0) * (rho + 1.0) * (rho + 1.0) - 0.5;
        assert!(resid.abs() <= 1e-12);
    }

    #[test]
    fn vacuum_keeps_flux_zero() {
        let (rho, m) = prox_kinetic(-2.0, [0.3, -0.4], 0.5);
        assert_eq!(rho, 0.0);
        assert_eq!(m, [0.0, 0.0]);
    }

    #[test]
    fn cubic_residual_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5000 {
            let r = rng.gen_range(-3.0..3.0);
            let w = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let sigma = rng.gen_range(0.05..2.0);
            let (rho, m) = prox_kinetic(r, w, sigma);
            assert!(rho >= 0.0);
            if rho == 0.0 {
                assert_eq!(m, [0.0, 0.0]);
            } else {
                let w2 = w[0] * w[0] + w[1] * w[1];
                let resid = (rho - r) * (rho + sigma) * (rho + sigma) - sigma * w2 / 2.0;
                assert!(resid.abs() <= 1e-12, "resid {resid}");
            }
        }
    }

    #[test]
    fn beats_grid_search_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let energy = KineticEnergy;
        for _ in 0..200 {
            let r = rng.gen_range(-1.0..2.0);
            let wn = rng.gen_range(0.0..2.0);
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let w = [wn * ang.cos(), wn * ang.sin()];
            let sigma = rng.gen_range(0.1..1.5);
            let (rho, m) = prox_kinetic(r, w, sigma);
            let obj = |p: f64, mv: [f64; 2]| {
                energy.eval(p, mv)
                    + (p - r) * (p - r) / (2.0 * sigma)
                    + ((mv[0] - w[0]).powi(2) + (mv[1] - w[1]).powi(2)) / (2.0 * sigma)
            };
            let best = obj(rho, m);
            // optimal flux is along w; scan magnitudes
            let dir = if wn > 0.0 { [w[0] / wn, w[1] / wn] } else { [1.0, 0.0] };
            for pi in 0..200 {
                let p = (r + 3.0).max(0.0) * pi as f64 / 199.0;
                for mi in 0..200 {
                    let mm = (wn + 1.0) * mi as f64 / 199.0;
                    let cand = obj(p, [mm * dir[0], mm * dir[1]]);
                    assert!(best <= cand + 1e-6, "prox {best} vs grid {cand}");
                }
            }
        }
    }

    #[test]
    fn prox_is_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let sigma = rng.gen_range(0.05..2.0);
            let z1 = (rng.gen_range(-2.0..2.0), [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let z2 = (rng.gen_range(-2.0..2.0), [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let p1 = prox_kinetic(z1.0, z1.1, sigma);
            let p2 = prox_kinetic(z2.0, z2.1, sigma);
            let dp = (p1.0 - p2.0).powi(2)
                + (p1.1[0] - p2.1[0]).powi(2)
                + (p1.1[1] - p2.1[1]).powi(2);
            let dz = (z1.0 - z2.0).powi(2)
                + (z1.1[0] - z2.1[0]).powi(2)
                + (z1.1[1] - z2.1[1]).powi(2);
            assert!(dp.sqrt() <= dz.sqrt() * (1.0 + 1e-10) + 1e-12);
        }
    }

    #[test]
    fn initial_constraint() {
        let slice = TimeSlice::from_elem((4, 4), 0.25);
        assert_eq!(apply_initial_constraint(&slice).unwrap(), slice);
        let mut bad = slice.clone();
        bad[[1, 2]] = -0.1;
        assert!(apply_initial_constraint(&bad).is_err());
    }

    #[test]
    fn terminal_update_arithmetic() {
        let ones = TimeSlice::from_elem((2, 2), 1.0);
        let beta = TimeSlice::from_elem((2, 2), 0.2);
        let phi1 = TimeSlice::from_elem((2, 2), 0.1);
        let zero = TimeSlice::zeros((2, 2));
        let out = terminal_density_update(&ones, &beta, &zero, &phi1, 0.5);
        assert!(out.iter().all(|&v| (v - 0.95).abs() <= 1e-15));
        // identity when all drivers vanish
        let out = terminal_density_update(&ones, &zero, &zero, &zero, 0.5);
        assert_eq!(out, ones);
        // clamp
        let big_beta = TimeSlice::from_elem((2, 2), 10.0);
        let out = terminal_density_update(&ones, &big_beta, &zero, &zero, 0.5);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kinetic_energy_values() {
        let e = KineticEnergy;
        assert_eq!(e.eval(2.0, [2.0, 0.0]), 1.0);
        assert_eq!(e.eval(0.0, [0.0, 0.0]), 0.0);
        assert_eq!(e.eval(0.0, [0.1, 0.0]), f64::INFINITY);
        assert_eq!(e.eval(-0.5, [0.0, 0.0]), f64::INFINITY);
    }

    #[test]
    fn block_prox_pins_boundaries() {
        let grid = crate::grid::SpaceTimeGrid::unit_box(4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rho_in = ScalarField::from_shape_simple_fn(grid.scalar_shape(), || rng.gen_range(-0.5..1.5));
        let m_in = VectorField::from_shape_simple_fn(grid.flux_shape(), || rng.gen_range(-1.0..1.0));
        let rho_init = TimeSlice::from_elem(grid.slice_shape(), 0.25);
        let terminal = TimeSlice::from_elem(grid.slice_shape(), 0.7);
        let (rho, m) = prox_density_block(&rho_in, &m_in, &rho_init, terminal.clone(), 0.4);
        assert_eq!(rho.index_axis(Axis(0), 0).to_owned(), rho_init);
        assert_eq!(rho.index_axis(Axis(0), 3).to_owned(), terminal);
        assert!(rho.iter().all(|&v| v >= 0.0));
        // interval-0 flux is the shrinkage at the pinned density
        let scale = 0.25 / (0.25 + 0.4);
        for i in 0..4 {
            for j in 0..4 {
                assert_relative_eq!(m[[0, 0, i, j]], scale * m_in[[0, 0, i, j]], max_relative = 1e-13);
            }
        }
    }
}

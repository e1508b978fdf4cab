//! Orthonormal cosine basis on Ω, field projections, interaction kernels
//! and their moment matrices.
//!
//! The basis is the tensor product of 1D modes `v_0(x) = 1/sqrt(2)`,
//! `v_p(x) = cos(p pi (x - lo) / w)` on `[lo, lo + w]`, orthonormal in
//! `L^2`. On the midpoint grid the discrete Gram matrix is the identity to
//! round-off for mode indices below `nx`, so projections use plain
//! midpoint quadrature everywhere.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::TimeSlice;
use crate::grid::SpaceTimeGrid;

/// Memory allowed for one kernel-matrix row block in `compute_moment_matrix`.
const CHUNK_BUDGET_BYTES: usize = 256 << 20;

/// Tensor-product cosine basis with a precomputed evaluation table.
#[derive(Debug, Clone)]
pub struct BasisSet {
    /// Number of modes.
    pub r: usize,
    /// 2D multi-indices `(p, q)`, ordered by `p + q` then lexicographically.
    pub modes: Vec<(usize, usize)>,
    /// `eval[i][x1, x2]` = value of mode `i` at the cell center.
    pub eval: Array3<f64>,
    /// 1D mode table `one_d[p][i]` used by separable kernel quadrature.
    pub one_d: Array2<f64>,
    /// Quadrature weight `hx^2`.
    pub weight: f64,
}

impl BasisSet {
    /// Build the first `r` modes on `grid` and verify discrete orthonormality.
    pub fn new(grid: &SpaceTimeGrid, r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::Config("basis needs r >= 1 modes".into()));
        }
        let modes = cosine_mode_order(r);
        let max_index = modes.iter().map(|&(p, q)| p.max(q)).max().unwrap();
        if max_index >= grid.nx {
            return Err(Error::Config(format!(
                "basis mode index {max_index} is not resolvable on nx={} (needs index < nx)",
                grid.nx
            )));
        }
        let nx = grid.nx;
        let width = grid.bounds[0][1] - grid.bounds[0][0];
        let mut one_d = Array2::zeros((max_index + 1, nx));
        for p in 0..=max_index {
            for i in 0..nx {
                let x = grid.center(0, i);
                one_d[[p, i]] = cosine_mode_1d(p, x, grid.bounds[0][0], width);
            }
        }
        let mut eval = Array3::zeros((r, nx, nx));
        for (idx, &(p, q)) in modes.iter().enumerate() {
            for i in 0..nx {
                for j in 0..nx {
                    eval[[idx, i, j]] = one_d[[p, i]] * one_d[[q, j]];
                }
            }
        }
        let basis = Self {
            r,
            modes,
            eval,
            one_d,
            weight: grid.cell_area(),
        };
        let dev = basis.gram_deviation();
        if dev > 1e-10 {
            return Err(Error::Internal(format!(
                "cosine basis lost discrete orthonormality: |G - I|_max = {dev:.3e}"
            )));
        }
        Ok(basis)
    }

    /// Max-norm deviation of the discrete Gram matrix from the identity.
    pub fn gram_deviation(&self) -> f64 {
        let flat = self.flat_eval();
        let mut dev: f64 = 0.0;
        for i in 0..self.r {
            for j in i..self.r {
                let g: f64 = flat
                    .row(i)
                    .iter()
                    .zip(flat.row(j).iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * self.weight;
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((g - target).abs());
            }
        }
        dev
    }

    /// Evaluation table reshaped to `(r, nx * nx)`.
    pub fn flat_eval(&self) -> ndarray::ArrayView2<'_, f64> {
        let (r, nx, _) = self.eval.dim();
        self.eval.view().into_shape_with_order((r, nx * nx)).unwrap()
    }

    /// Coefficients `c_i = sum_x slice(x) zeta_i(x) hx^2`.
    pub fn project(&self, slice: &TimeSlice) -> Array1<f64> {
        let flat = slice.as_slice().expect("contiguous slice");
        let mut out = Array1::zeros(self.r);
        let table = self.flat_eval();
        for i in 0..self.r {
            let row = table.row(i);
            let row = row.as_slice().expect("contiguous row");
            let mut acc = 0.0;
            for (z, v) in row.iter().zip(flat) {
                acc += z * v;
            }
            out[i] = acc * self.weight;
        }
        out
    }

    /// Pointwise synthesis `sum_i c_i zeta_i(x)`, accumulated into `out`
    /// with prefactor `scale`.
    pub fn accumulate_synthesis(&self, coeffs: &[f64], scale: f64, out: &mut TimeSlice) {
        assert_eq!(coeffs.len(), self.r);
        let table = self.flat_eval();
        let flat = out.as_slice_mut().expect("contiguous slice");
        for (i, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let row = table.row(i);
            let row = row.as_slice().expect("contiguous row");
            let f = scale * c;
            for (o, z) in flat.iter_mut().zip(row) {
                *o += f * z;
            }
        }
    }

    pub fn synthesize(&self, coeffs: &[f64]) -> TimeSlice {
        let nx = self.eval.dim().1;
        let mut out = Array2::zeros((nx, nx));
        self.accumulate_synthesis(coeffs, 1.0, &mut out);
        out
    }
}

/// First `r` multi-indices ordered by total index then lexicographically.
pub fn cosine_mode_order(r: usize) -> Vec<(usize, usize)> {
    let mut modes = Vec::with_capacity(r);
    let mut total = 0;
    while modes.len() < r {
        for p in 0..=total {
            modes.push((p, total - p));
            if modes.len() == r {
                break;
            }
        }
        total += 1;
    }
    // the shell loop above emits (p, q) with p ascending == lexicographic
    modes
}

fn cosine_mode_1d(p: usize, x: f64, lo: f64, width: f64) -> f64 {
    if p == 0 {
        (0.5f64).sqrt() * (2.0 / width).sqrt()
    } else {
        (2.0 / width).sqrt() * (p as f64 * std::f64::consts::PI * (x - lo) / width).cos()
    }
}

/// One-sided Gaussian profile: width `delta_minus` for negative arguments,
/// `delta_plus` for nonnegative ones; continuous at 0 with value 1.
pub fn split_gaussian(x: f64, delta_minus: f64, delta_plus: f64) -> f64 {
    let d = if x < 0.0 { delta_minus } else { delta_plus };
    (-x * x / (2.0 * d * d)).exp()
}

/// Closed-form cosine transform of [`split_gaussian`]:
/// `sqrt(pi/2) (d- exp(-2 pi^2 z^2 d-^2) + d+ exp(-2 pi^2 z^2 d+^2))`.
/// Strictly positive, which certifies monotonicity of the induced kernel.
pub fn split_gaussian_cosine_transform(zeta: f64, delta_minus: f64, delta_plus: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let w = -2.0 * pi * pi * zeta * zeta;
    (pi / 2.0).sqrt()
        * (delta_minus * (w * delta_minus * delta_minus).exp()
            + delta_plus * (w * delta_plus * delta_plus).exp())
}

/// Interaction kernel `K(x, y)` of the nonlocal coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `A exp(-|x - y|^2 / (2 delta^2))`.
    SymmetricGaussian { amplitude: f64, delta: f64 },
    /// `A prod_i gamma_{d-,d+}(x_i - y_i)` with per-axis widths
    /// `deltas[i] = [delta_minus, delta_plus]`.
    SeparableAsymmetric {
        amplitude: f64,
        deltas: [[f64; 2]; 2],
    },
    /// `A exp(-(x - y)^T Q (x - y) / (2 delta^2))`.
    QuadraticForm {
        amplitude: f64,
        q: [[f64; 2]; 2],
        delta: f64,
    },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            KernelSpec::SymmetricGaussian { amplitude, delta } => {
                amplitude.is_finite() && *delta > 0.0
            }
            KernelSpec::SeparableAsymmetric { amplitude, deltas } => {
                amplitude.is_finite() && deltas.iter().flatten().all(|&d| d > 0.0)
            }
            KernelSpec::QuadraticForm { amplitude, q, delta } => {
                amplitude.is_finite()
                    && *delta > 0.0
                    && (q[0][1] - q[1][0]).abs() <= 1e-12 * (1.0 + q[0][1].abs())
                    && q[0][0] > 0.0
                    && q[1][1] > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid kernel spec {self:?}")))
        }
    }

    pub fn eval(&self, x: [f64; 2], y: [f64; 2]) -> f64 {
        let d = [x[0] - y[0], x[1] - y[1]];
        match self {
            KernelSpec::SymmetricGaussian { amplitude, delta } => {
                amplitude * (-(d[0] * d[0] + d[1] * d[1]) / (2.0 * delta * delta)).exp()
            }
            KernelSpec::SeparableAsymmetric { amplitude, deltas } => {
                amplitude
                    * split_gaussian(d[0], deltas[0][0], deltas[0][1])
                    * split_gaussian(d[1], deltas[1][0], deltas[1][1])
            }
            KernelSpec::QuadraticForm { amplitude, q, delta } => {
                let quad = d[0] * d[0] * q[0][0]
                    + d[0] * d[1] * (q[0][1] + q[1][0])
                    + d[1] * d[1] * q[1][1];
                amplitude * (-quad / (2.0 * delta * delta)).exp()
            }
        }
    }

    fn separable_profiles(&self) -> Option<(f64, [[f64; 2]; 2])> {
        match self {
            KernelSpec::SymmetricGaussian { amplitude, delta } => {
                Some((*amplitude, [[*delta, *delta]; 2]))
            }
            KernelSpec::SeparableAsymmetric { amplitude, deltas } => Some((*amplitude, *deltas)),
            KernelSpec::QuadraticForm { .. } => None,
        }
    }
}

/// Moment matrix of a kernel against the basis, `k_pq = <K, zeta_p x zeta_q>`,
/// with a cached factorization of `(K + tau I)` for resolvent solves.
#[derive(Debug, Clone)]
pub struct MomentMatrix {
    pub entries: DMatrix<f64>,
    resolvent: Option<ResolventFactor>,
}

#[derive(Debug, Clone)]
struct ResolventFactor {
    tau: f64,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl PartialEq for MomentMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl MomentMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::Config("moment matrix must be square".into()));
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(Error::Internal("moment matrix has non-finite entries".into()));
        }
        Ok(Self {
            entries,
            resolvent: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Factor `(K + tau I)` once so per-node resolvent solves reuse it.
    pub fn prepare_resolvent(&mut self, tau: f64) -> Result<()> {
        let n = self.dim();
        let shifted = &self.entries + DMatrix::identity(n, n) * tau;
        let lu = shifted.lu();
        if lu.determinant().abs() < 1e-300 {
            return Err(Error::Config(format!(
                "(K + tau I) is singular for tau = {tau}"
            )));
        }
        self.resolvent = Some(ResolventFactor { tau, lu });
        Ok(())
    }

    /// Solve `(K + tau I) out = K in`, the resolvent `(I + tau K^-1)^-1`.
    pub fn apply_resolvent(&self, input: &mut [f64], tau: f64) -> Result<()> {
        if tau == 0.0 {
            return Ok(());
        }
        let factor = match &self.resolvent {
            Some(f) if f.tau == tau => f,
            _ => {
                return Err(Error::Internal(format!(
                    "resolvent factorization not prepared for tau = {tau}"
                )))
            }
        };
        let v = nalgebra::DVector::from_column_slice(input);
        let rhs = &self.entries * v;
        let sol = factor
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Config(format!("(K + tau I) solve failed for tau = {tau}")))?;
        input.copy_from_slice(sol.as_slice());
        Ok(())
    }

    /// Smallest eigenvalue of the symmetric part `(K + K^T) / 2`.
    /// `>= -1e-8` certifies the kernel monotone for the solver.
    pub fn monotonicity_check(&self) -> f64 {
        let sym = (&self.entries + self.entries.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.entries[(i, j)] - self.entries[(j, i)]).abs());
            }
        }
        worst
    }

    /// Row-major CSV dump, full-precision decimal.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for i in 0..self.nrows() {
            let row: Vec<String> = (0..self.ncols())
                .map(|j| format!("{}", self.entries[(i, j)]))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    fn nrows(&self) -> usize {
        self.entries.nrows()
    }
    fn ncols(&self) -> usize {
        self.entries.ncols()
    }
}

/// Midpoint-quadrature moment matrix of `kernel` against `basis`.
///
/// Separable kernels factor into two 1D quadratures (`O(nx^2)` work); the
/// general path streams row blocks of the `nx^2 x nx^2` kernel matrix,
/// `chunk_rows` rows at a time, accumulating in a fixed order so the result
/// does not depend on the chunk size.
pub fn compute_moment_matrix(
    kernel: &KernelSpec,
    basis: &BasisSet,
    grid: &SpaceTimeGrid,
    chunk_rows: usize,
) -> Result<MomentMatrix> {
    kernel.validate()?;
    if let Some((amplitude, deltas)) = kernel.separable_profiles() {
        return separable_moment_matrix(amplitude, deltas, basis, grid);
    }
    let nx = grid.nx;
    let n_cells = nx * nx;
    let chunk_rows = chunk_rows.clamp(1, n_cells);
    let bytes = chunk_rows
        .saturating_mul(n_cells)
        .saturating_mul(std::mem::size_of::<f64>());
    if bytes > CHUNK_BUDGET_BYTES {
        return Err(Error::Resource(format!(
            "kernel row block of {chunk_rows} rows needs {} MiB (budget {} MiB); \
             retry with chunk_rows <= {}",
            bytes >> 20,
            CHUNK_BUDGET_BYTES >> 20,
            CHUNK_BUDGET_BYTES / (n_cells * std::mem::size_of::<f64>())
        )));
    }

    let centers: Vec<[f64; 2]> = (0..n_cells)
        .map(|c| [grid.center(0, c / nx), grid.center(1, c % nx)])
        .collect();
    let table = basis.flat_eval();
    let w2 = grid.cell_area();
    let r = basis.r;
    let mut entries = DMatrix::zeros(r, r);
    let mut projected = vec![0.0f64; chunk_rows * r];
    for chunk_start in (0..n_cells).step_by(chunk_rows) {
        let rows = chunk_rows.min(n_cells - chunk_start);
        // project each kernel row onto the basis (the parallel part); the
        // y-sum order inside a row is fixed, so chunking stays bit-stable
        projected[..rows * r]
            .par_chunks_mut(r)
            .enumerate()
            .for_each(|(local, out)| {
                let x = centers[chunk_start + local];
                let mut krow = vec![0.0f64; n_cells];
                for (kv, y) in krow.iter_mut().zip(&centers) {
                    *kv = kernel.eval(x, *y);
                }
                for (q, o) in out.iter_mut().enumerate() {
                    let zrow = table.row(q);
                    let zrow = zrow.as_slice().expect("contiguous row");
                    let mut acc = 0.0;
                    for (kv, z) in krow.iter().zip(zrow) {
                        acc += kv * z;
                    }
                    *o = acc * w2;
                }
            });
        // deterministic accumulation in natural x order
        for local in 0..rows {
            let x_idx = chunk_start + local;
            let wrow = &projected[local * r..(local + 1) * r];
            for p in 0..r {
                let zp = table[[p, x_idx]] * w2;
                if zp == 0.0 {
                    continue;
                }
                for q in 0..r {
                    entries[(p, q)] += zp * wrow[q];
                }
            }
        }
    }
    MomentMatrix::new(entries)
}

fn separable_moment_matrix(
    amplitude: f64,
    deltas: [[f64; 2]; 2],
    basis: &BasisSet,
    grid: &SpaceTimeGrid,
) -> Result<MomentMatrix> {
    let nx = grid.nx;
    let max_index = basis.one_d.nrows() - 1;
    let xs: Vec<f64> = (0..nx).map(|i| grid.center(0, i)).collect();
    let mut axis_moments = Vec::with_capacity(2);
    for axis in 0..2 {
        let [dm, dp] = deltas[axis];
        // m[p][q] = sum_{i,j} gamma(x_i - x_j) v_p(x_i) v_q(x_j) hx^2
        let mut m: DMatrix<f64> = DMatrix::zeros(max_index + 1, max_index + 1);
        let mut gv: DMatrix<f64> = DMatrix::zeros(nx, max_index + 1); // gv[i][q] = sum_j gamma * v_q
        for i in 0..nx {
            for j in 0..nx {
                let g = split_gaussian(xs[i] - xs[j], dm, dp);
                for q in 0..=max_index {
                    gv[(i, q)] += g * basis.one_d[[q, j]];
                }
            }
        }
        for p in 0..=max_index {
            for q in 0..=max_index {
                let mut acc = 0.0;
                for i in 0..nx {
                    acc += basis.one_d[[p, i]] * gv[(i, q)];
                }
                m[(p, q)] = acc * grid.hx * grid.hx;
            }
        }
        axis_moments.push(m);
    }
    let r = basis.r;
    let mut entries = DMatrix::zeros(r, r);
    for (pi, &(p1, p2)) in basis.modes.iter().enumerate() {
        for (qi, &(q1, q2)) in basis.modes.iter().enumerate() {
            entries[(pi, qi)] = amplitude * axis_moments[0][(p1, q1)] * axis_moments[1][(p2, q2)];
        }
    }
    MomentMatrix::new(entries)
}

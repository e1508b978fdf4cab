//! Difference stencils and their exact transposes.
//!
//! Conventions fixed here and used verbatim on both sides of the operator
//! pair, so adjointness holds to round-off:
//!
//! * time: forward difference mapping `nt + 1` nodes to `nt` intervals;
//! * space: forward difference per axis mapping cells to interior faces
//!   (boundary faces omitted: homogeneous no-flux), plus the half-weight
//!   face-to-cell average used to collocate gradients with cell-centered
//!   flux fields.
//!
//! All transposes are with respect to the plain unweighted dot product;
//! quadrature weights are applied by the callers.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

/// `(u(k+1) - u(k)) / ht` on intervals `k = 0..nt`.
pub fn dt_forward(u: &ArrayView3<f64>, ht: f64) -> Array3<f64> {
    let (nodes, nx, ny) = u.dim();
    let nt = nodes - 1;
    let mut out = Array3::zeros((nt, nx, ny));
    for k in 0..nt {
        let lo = u.index_axis(Axis(0), k);
        let hi = u.index_axis(Axis(0), k + 1);
        let mut dst = out.index_axis_mut(Axis(0), k);
        dst.assign(&hi);
        dst.scaled_add(-1.0, &lo);
        dst.mapv_inplace(|v| v / ht);
    }
    out
}

/// Transpose of [`dt_forward`]: interval field to node field.
pub fn dt_forward_transpose(v: &ArrayView3<f64>, ht: f64) -> Array3<f64> {
    let (nt, nx, ny) = v.dim();
    let mut out = Array3::zeros((nt + 1, nx, ny));
    for k in 0..nt {
        let src = v.index_axis(Axis(0), k);
        out.index_axis_mut(Axis(0), k).scaled_add(-1.0 / ht, &src);
        out.index_axis_mut(Axis(0), k + 1).scaled_add(1.0 / ht, &src);
    }
    out
}

/// Forward difference along `axis` onto interior faces:
/// axis 0 gives shape `(nx - 1, ny)`, axis 1 gives `(nx, ny - 1)`.
pub fn grad_faces(u: &ArrayView2<f64>, axis: usize, hx: f64) -> Array2<f64> {
    let (nx, ny) = u.dim();
    match axis {
        0 => {
            let mut out = Array2::zeros((nx - 1, ny));
            for i in 0..nx - 1 {
                for j in 0..ny {
                    out[[i, j]] = (u[[i + 1, j]] - u[[i, j]]) / hx;
                }
            }
            out
        }
        1 => {
            let mut out = Array2::zeros((nx, ny - 1));
            for i in 0..nx {
                for j in 0..ny - 1 {
                    out[[i, j]] = (u[[i, j + 1]] - u[[i, j]]) / hx;
                }
            }
            out
        }
        _ => panic!("axis must be 0 or 1"),
    }
}

/// Transpose of [`grad_faces`]: interior-face field back to cells.
pub fn grad_faces_transpose(v: &ArrayView2<f64>, axis: usize, hx: f64, nx: usize, ny: usize) -> Array2<f64> {
    let mut out = Array2::zeros((nx, ny));
    match axis {
        0 => {
            for i in 0..nx - 1 {
                for j in 0..ny {
                    let f = v[[i, j]] / hx;
                    out[[i + 1, j]] += f;
                    out[[i, j]] -= f;
                }
            }
        }
        1 => {
            for i in 0..nx {
                for j in 0..ny - 1 {
                    let f = v[[i, j]] / hx;
                    out[[i, j + 1]] += f;
                    out[[i, j]] -= f;
                }
            }
        }
        _ => panic!("axis must be 0 or 1"),
    }
    out
}

/// Gradient along `axis` collocated at cell centers: forward differences to
/// interior faces followed by the half-weight average back to cells
/// (boundary cells see only their single interior face).
pub fn grad_cells(u: &ArrayView2<f64>, axis: usize, hx: f64) -> Array2<f64> {
    let (nx, ny) = u.dim();
    let faces = grad_faces(u, axis, hx);
    let mut out = Array2::zeros((nx, ny));
    match axis {
        0 => {
            for i in 0..nx {
                for j in 0..ny {
                    let left = if i > 0 { faces[[i - 1, j]] } else { 0.0 };
                    let right = if i < nx - 1 { faces[[i, j]] } else { 0.0 };
                    out[[i, j]] = 0.5 * (left + right);
                }
            }
        }
        1 => {
            for i in 0..nx {
                for j in 0..ny {
                    let left = if j > 0 { faces[[i, j - 1]] } else { 0.0 };
                    let right = if j < ny - 1 { faces[[i, j]] } else { 0.0 };
                    out[[i, j]] = 0.5 * (left + right);
                }
            }
        }
        _ => panic!("axis must be 0 or 1"),
    }
    out
}

/// Transpose of [`grad_cells`].
pub fn grad_cells_transpose(v: &ArrayView2<f64>, axis: usize, hx: f64) -> Array2<f64> {
    let (nx, ny) = v.dim();
    // transpose of the cell average: face between c and c+1 gets (v_c + v_{c+1}) / 2
    let faces = match axis {
        0 => {
            let mut f = Array2::zeros((nx - 1, ny));
            for i in 0..nx - 1 {
                for j in 0..ny {
                    f[[i, j]] = 0.5 * (v[[i, j]] + v[[i + 1, j]]);
                }
            }
            f
        }
        1 => {
            let mut f = Array2::zeros((nx, ny - 1));
            for i in 0..nx {
                for j in 0..ny - 1 {
                    f[[i, j]] = 0.5 * (v[[i, j]] + v[[i, j + 1]]);
                }
            }
            f
        }
        _ => panic!("axis must be 0 or 1"),
    };
    grad_faces_transpose(&faces.view(), axis, hx, nx, ny)
}

/// Neumann Laplacian `(grad_faces)^T grad_faces` over both axes.
pub fn neumann_laplacian(u: &ArrayView2<f64>, hx: f64) -> Array2<f64> {
    let (nx, ny) = u.dim();
    let mut out = Array2::zeros((nx, ny));
    for axis in 0..2 {
        let g = grad_faces(u, axis, hx);
        out += &grad_faces_transpose(&g.view(), axis, hx, nx, ny);
    }
    out
}

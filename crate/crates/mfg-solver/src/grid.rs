//! Uniform space-time discretization of Ω × [0, 1].
//!
//! The grid owns every index convention used in the crate:
//!
//! * space: `nx` cells per axis with centers `x_i = lo + (i + 1/2) hx`,
//!   fields are sampled at cell centers;
//! * time: `nt` intervals with nodes `t_k = k ht`, `k = 0..=nt`; scalar
//!   fields live on nodes, flux fields on intervals (one slice per
//!   interval, collocated at cell centers);
//! * array layout: `[time, x1, x2]` for scalars, `[interval, axis, x1, x2]`
//!   for fluxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    /// Spatial dimension. Only `d = 2` is supported by the operators.
    pub dim: usize,
    /// Cells per spatial axis.
    pub nx: usize,
    /// Time intervals (nodes are `nt + 1`).
    pub nt: usize,
    /// Per-axis bounds `[lo, hi]`, identical for both axes in the scenarios.
    pub bounds: [[f64; 2]; 2],
    /// Spatial cell spacing.
    pub hx: f64,
    /// Temporal spacing `1 / nt`.
    pub ht: f64,
}

impl SpaceTimeGrid {
    pub fn new(nx: usize, nt: usize, bounds: [[f64; 2]; 2]) -> Result<Self> {
        if nx == 0 || nt == 0 {
            return Err(Error::Config(format!(
                "grid needs nx > 0 and nt > 0, got nx={nx}, nt={nt}"
            )));
        }
        let widths = [bounds[0][1] - bounds[0][0], bounds[1][1] - bounds[1][0]];
        if widths[0] <= 0.0 || widths[1] <= 0.0 {
            return Err(Error::Config(format!("degenerate bounds {bounds:?}")));
        }
        if (widths[0] - widths[1]).abs() > 1e-12 {
            return Err(Error::Config(
                "anisotropic domains are not supported: per-axis widths differ".into(),
            ));
        }
        Ok(Self {
            dim: 2,
            nx,
            nt,
            bounds,
            hx: widths[0] / nx as f64,
            ht: 1.0 / nt as f64,
        })
    }

    /// Standard domain of the experiments: [-1, 1]^2.
    pub fn unit_box(nx: usize, nt: usize) -> Result<Self> {
        Self::new(nx, nt, [[-1.0, 1.0], [-1.0, 1.0]])
    }

    /// Center of cell `i` along `axis`.
    #[inline]
    pub fn center(&self, axis: usize, i: usize) -> f64 {
        self.bounds[axis][0] + (i as f64 + 0.5) * self.hx
    }

    /// Time of node `k`.
    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.ht
    }

    /// Cell area `hx^d`.
    #[inline]
    pub fn cell_area(&self) -> f64 {
        self.hx * self.hx
    }

    /// Index of the time node closest to `t`.
    pub fn nearest_node(&self, t: f64) -> usize {
        let k = (t / self.ht).round();
        (k.max(0.0) as usize).min(self.nt)
    }

    pub fn scalar_shape(&self) -> (usize, usize, usize) {
        (self.nt + 1, self.nx, self.nx)
    }

    pub fn flux_shape(&self) -> (usize, usize, usize, usize) {
        (self.nt, 2, self.nx, self.nx)
    }

    pub fn slice_shape(&self) -> (usize, usize) {
        (self.nx, self.nx)
    }
}

pub mod couplings;
pub mod dynamics;
pub mod elliptic;
pub mod error;
pub mod field;
pub mod grid;
pub mod ops;
pub mod solver;
pub mod spectral;
pub mod stencil;

pub use error::{Error, Result};

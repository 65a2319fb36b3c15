//! Reduced-order modeling of nonlinear evolution PDEs with approximated Lax
//! pairs: decompose the state on Schrödinger eigenfunctions, propagate modes
//! and eigenvalues with a reduced skew-symmetric operator, and reconstruct
//! the solution from squared eigenfunctions.

pub mod driver;
pub mod error;
pub mod lax;
pub mod mesh_fem;
pub mod problems;
pub mod propagation;
pub mod reconstruction;
pub mod spectral;

pub use error::{AlpError, Result};

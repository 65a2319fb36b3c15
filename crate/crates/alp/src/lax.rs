//! Reduced propagator matrix M(u) on the current eigenbasis, and its quality
//! indicators (per-mode energy, Frobenius norm, truncation error).

use nalgebra::DMatrix;

use crate::error::{AlpError, Result};
use crate::mesh_fem::{FemSpace, Field};
use crate::spectral::ModeSet;

/// Skew-symmetric reduced representation of the propagation operator:
/// M_mp = chi <F(u) psi_m, psi_p> / (lambda_p - lambda_m) off the diagonal,
/// zero on the diagonal and on pairs with equal eigenvalues.
#[derive(Debug, Clone)]
pub struct PropagatorMatrix {
    pub entries: DMatrix<f64>,
    pub chi: f64,
    /// Time t^n the matrix was built at.
    pub time_label: f64,
}

impl PropagatorMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }
}

/// Assemble M(u) from the current modes and the nodal field F(u^n).
///
/// The bracket <F(u) psi_m, psi_p> is evaluated as psi_m' W(F(u)) psi_p with
/// one weighted-mass assembly shared by all (m, p). Skew-symmetry is
/// structural: only the upper triangle is computed and mirrored.
pub fn assemble_propagator(
    fem: &FemSpace,
    modes: &ModeSet,
    f_of_u: &Field,
    time_label: f64,
) -> Result<PropagatorMatrix> {
    let n = modes.n_total();
    // W(F(u)) psi_p for all p at once, element-assembled without forming W
    let nh = fem.n_nodes();
    let mut psi = DMatrix::zeros(nh, n);
    for (p, mode) in modes.modes.iter().enumerate() {
        if mode.len() != nh {
            return Err(AlpError::MeshMismatch {
                field_len: mode.len(),
                mesh_len: nh,
            });
        }
        psi.set_column(p, &mode.values);
    }
    let wpsi = fem.apply_weighted_mass(f_of_u, &psi)?;
    let bracket = psi.transpose() * wpsi; // symmetric in exact arithmetic

    let tol = modes.equal_eigenvalue_tol();
    let mut m = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in (a + 1)..n {
            let dl = modes.eigenvalues[b] - modes.eigenvalues[a];
            if dl.abs() <= tol {
                continue;
            }
            // use the symmetrized bracket so the mirrored entries share one value
            let br = 0.5 * (bracket[(a, b)] + bracket[(b, a)]);
            let v = modes.chi * br / dl;
            m[(a, b)] = v;
            m[(b, a)] = -v;
        }
    }
    Ok(PropagatorMatrix {
        entries: m,
        chi: modes.chi,
        time_label,
    })
}

/// Per-mode energy e(psi_m, N_M) = sum_n M_mn^2, an estimate of the L2 norm
/// of the mode's time derivative.
pub fn mode_energy(m: &PropagatorMatrix, mode: usize) -> Result<f64> {
    if mode >= m.dim() {
        return Err(AlpError::InvalidArgument(format!(
            "mode index {mode} out of range 0..{}",
            m.dim()
        )));
    }
    Ok(m.entries.row(mode).iter().map(|v| v * v).sum())
}

/// F_N = sqrt(sum_mp M_mp^2).
pub fn frobenius_norm(m: &PropagatorMatrix) -> f64 {
    m.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn frobenius_norm_leading(m: &PropagatorMatrix, n: usize) -> f64 {
    let mut s = 0.0;
    for a in 0..n {
        for b in 0..n {
            s += m.entries[(a, b)].powi(2);
        }
    }
    s.sqrt()
}

/// Relative Frobenius gap E_F(n_small, N_inf) = (F_Ninf - F_nsmall) / F_Ninf,
/// with F_nsmall taken over the leading principal submatrix of the full
/// propagator built from `modes_full`.
pub fn frobenius_error(
    fem: &FemSpace,
    modes_full: &ModeSet,
    f_of_u: &Field,
    n_small: usize,
) -> Result<f64> {
    if n_small > modes_full.n_total() {
        return Err(AlpError::InvalidArgument(format!(
            "n_small {n_small} exceeds mode count {}",
            modes_full.n_total()
        )));
    }
    let m = assemble_propagator(fem, modes_full, f_of_u, 0.0)?;
    frobenius_error_of(&m, n_small)
}

/// Same gap computed from an already-assembled propagator.
pub fn frobenius_error_of(m: &PropagatorMatrix, n_small: usize) -> Result<f64> {
    if n_small > m.dim() {
        return Err(AlpError::InvalidArgument(format!(
            "n_small {n_small} exceeds matrix dimension {}",
            m.dim()
        )));
    }
    let f_ref = frobenius_norm(m);
    if f_ref == 0.0 {
        return Err(AlpError::Numerical("zero reference Frobenius norm".into()));
    }
    Ok((f_ref - frobenius_norm_leading(m, n_small)) / f_ref)
}

//! Approximated inverse scattering: recover u from the current modes and
//! eigenvalues by solving the small Gram-of-squares linear system.

use nalgebra::{DMatrix, DVector};

use crate::error::{AlpError, Result};
use crate::mesh_fem::{FemSpace, Field};
use crate::spectral::ModeSet;

const CONDITION_LIMIT: f64 = 1e12;

/// Coefficients of the squared-eigenfunction expansion u = sum_k alpha_k phi_k^2.
#[derive(Debug, Clone)]
pub struct ReconstructionCoefficients {
    pub alpha: DVector<f64>,
    /// Condition number estimate of the Gram-of-squares matrix.
    pub condition_estimate: f64,
}

/// Solve sum_k alpha_k <phi_k^2, phi_m^2> = -(lambda_m + <Delta phi_m, phi_m>)/chi
/// for the N_- negative modes, with <Delta phi_m, phi_m> evaluated as the
/// negative stiffness quadratic form (valid for Dirichlet and homogeneous
/// Neumann data).
pub fn solve_alpha(fem: &FemSpace, modes: &ModeSet) -> Result<ReconstructionCoefficients> {
    let n = modes.n_negative;
    if n == 0 {
        return Ok(ReconstructionCoefficients {
            alpha: DVector::zeros(0),
            condition_estimate: 1.0,
        });
    }
    let squares: Vec<Field> = modes.modes[..n]
        .iter()
        .map(|f| Field::new(f.values.component_mul(&f.values)))
        .collect();
    let mut gram = DMatrix::zeros(n, n);
    for k in 0..n {
        for m in k..n {
            let g = fem.l2_inner(&squares[k], &squares[m])?;
            gram[(k, m)] = g;
            gram[(m, k)] = g;
        }
    }
    let mut rhs = DVector::zeros(n);
    for m in 0..n {
        let laplace_bracket = -fem.h1_seminorm_sq(&modes.modes[m])?;
        rhs[m] = -(modes.eigenvalues[m] + laplace_bracket) / modes.chi;
    }

    // condition estimate from the (tiny) symmetric eigendecomposition
    let eig = gram.clone().symmetric_eigen();
    let emax = eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let emin = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let condition_estimate = if emin > 0.0 { emax / emin } else { f64::INFINITY };
    if condition_estimate > CONDITION_LIMIT {
        return Err(AlpError::IllConditioned {
            cond: condition_estimate,
            limit: CONDITION_LIMIT,
        });
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| AlpError::SolveFailure("Gram-of-squares matrix not SPD".into()))?;
    let alpha = chol.solve(&rhs);
    Ok(ReconstructionCoefficients {
        alpha,
        condition_estimate,
    })
}

/// Nodal field sum_p alpha_p phi_p^2, un-shifted by the stored nonnegativity
/// shift (pass 0 when no shift was applied).
pub fn reconstruct_solution(modes: &ModeSet, alpha: &DVector<f64>, shift: f64) -> Result<Field> {
    if alpha.len() != modes.n_negative {
        return Err(AlpError::InvalidArgument(format!(
            "alpha has length {}, N_- is {}",
            alpha.len(),
            modes.n_negative
        )));
    }
    let n = modes.modes.first().map(|f| f.len()).unwrap_or(0);
    let mut out = DVector::from_element(n, shift);
    for (p, &a) in alpha.iter().enumerate() {
        let phi = &modes.modes[p].values;
        for i in 0..n {
            out[i] += a * phi[i] * phi[i];
        }
    }
    Ok(Field::new(out))
}

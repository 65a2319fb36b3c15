//! One-step advancement of eigenvalues (explicit Euler) and modes (truncated
//! exponential of the skew-symmetric propagator), plus the exact-exponential
//! reference step and mass-orthonormal repair.

use nalgebra::DMatrix;

use crate::error::{AlpError, Result};
use crate::lax::PropagatorMatrix;
use crate::mesh_fem::{FemSpace, Field};
use crate::spectral::ModeSet;

/// Which eigenvalue update to use. `Proposition` carries the chi factor of
/// the continuous evolution law; `PaperDiscrete` drops it. The two coincide
/// for chi = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenvalueScheme {
    Proposition,
    PaperDiscrete,
}

/// Diagnostics attached to a mode-propagation step.
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    /// max |Gram - I| in the mass inner product after the step.
    pub gram_deviation: f64,
    /// lambda^{n+1} - lambda^n, filled by the driver.
    pub eigenvalue_increments: Vec<f64>,
    /// Indices whose eigenvalue crossed zero this step, filled by the driver.
    pub promoted_modes: Vec<usize>,
}

/// Explicit Euler update of the eigenvalues:
/// lambda^{n+1}_m = lambda^n_m - dt * chi * <F(u^n) psi_m, psi_m>
/// (the chi factor is dropped under `PaperDiscrete`).
pub fn step_eigenvalues(
    fem: &FemSpace,
    modes: &ModeSet,
    f_of_u: &Field,
    dt: f64,
    scheme: EigenvalueScheme,
) -> Result<Vec<f64>> {
    if dt <= 0.0 {
        return Err(AlpError::InvalidArgument("dt must be positive".into()));
    }
    let factor = match scheme {
        EigenvalueScheme::Proposition => modes.chi,
        EigenvalueScheme::PaperDiscrete => 1.0,
    };
    let n = modes.n_total();
    let nh = fem.n_nodes();
    let mut psi = DMatrix::zeros(nh, n);
    for (p, mode) in modes.modes.iter().enumerate() {
        psi.set_column(p, &mode.values);
    }
    let wpsi = fem.apply_weighted_mass(f_of_u, &psi)?;
    let mut out = Vec::with_capacity(n);
    for m in 0..n {
        let bracket = psi.column(m).dot(&wpsi.column(m));
        out.push(modes.eigenvalues[m] - dt * factor * bracket);
    }
    Ok(out)
}

fn combine_modes(modes: &ModeSet, transfer: &DMatrix<f64>) -> Result<Vec<Field>> {
    let n = modes.n_total();
    if transfer.nrows() != n || transfer.ncols() != n {
        return Err(AlpError::InvalidArgument(format!(
            "transfer matrix is {}x{}, mode set has {n} modes",
            transfer.nrows(),
            transfer.ncols()
        )));
    }
    let nh = modes.modes.first().map(|f| f.len()).unwrap_or(0);
    let mut psi = DMatrix::zeros(nh, n);
    for (p, mode) in modes.modes.iter().enumerate() {
        psi.set_column(p, &mode.values);
    }
    // psi_new_m = sum_p T_mp psi_p  <=>  Psi_new = Psi T^T
    let new = psi * transfer.transpose();
    Ok((0..n).map(|m| Field::new(new.column(m).into())).collect())
}

fn gram_deviation(fem: &FemSpace, fields: &[Field]) -> f64 {
    let n = fields.len();
    let nh = fem.n_nodes();
    let mut psi = DMatrix::zeros(nh, n);
    for (p, f) in fields.iter().enumerate() {
        psi.set_column(p, &f.values);
    }
    let mut mpsi = DMatrix::zeros(nh, n);
    for p in 0..n {
        mpsi.set_column(p, &fem.apply_mass(&fields[p].values));
    }
    let gram = psi.transpose() * mpsi;
    let mut dev = 0.0f64;
    for a in 0..n {
        for b in 0..n {
            let target = if a == b { 1.0 } else { 0.0 };
            dev = dev.max((gram[(a, b)] - target).abs());
        }
    }
    dev
}

/// Advance the modes with the second-order truncation of the exponential,
/// T = I + dt M + dt^2/2 M^2. Orthonormality is perturbed at order dt^4.
pub fn step_modes(
    fem: &FemSpace,
    modes: &ModeSet,
    m: &PropagatorMatrix,
    dt: f64,
) -> Result<(ModeSet, StepReport)> {
    if dt <= 0.0 {
        return Err(AlpError::InvalidArgument("dt must be positive".into()));
    }
    let n = modes.n_total();
    if m.dim() != n {
        return Err(AlpError::InvalidArgument(format!(
            "propagator is {}x{}, mode set has {n} modes",
            m.dim(),
            m.dim()
        )));
    }
    let a = &m.entries;
    let transfer = DMatrix::identity(n, n) + dt * a + (dt * dt / 2.0) * (a * a);
    let new_fields = combine_modes(modes, &transfer)?;
    let report = StepReport {
        gram_deviation: gram_deviation(fem, &new_fields),
        ..Default::default()
    };
    let new_modes = ModeSet {
        chi: modes.chi,
        eigenvalues: modes.eigenvalues.clone(),
        modes: new_fields,
        n_negative: modes.n_negative,
    };
    Ok((new_modes, report))
}

/// Matrix exponential by scaling and squaring with a Taylor series summed to
/// machine precision.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.iter().fold(0.0f64, |m, &v| m.max(v.abs())) * n as f64;
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a / 2f64.powi(s as i32);
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..64 {
        term = (&term * &scaled) / k as f64;
        result += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    for _ in 0..s {
        result = &result * &result;
    }
    result
}

/// Advance the modes with the exact exponential exp(M dt) (to solver
/// tolerance); the exponential of a skew-symmetric matrix is orthogonal, so
/// this preserves the Gram matrix.
pub fn exact_exponential_step(modes: &ModeSet, m: &PropagatorMatrix, dt: f64) -> Result<ModeSet> {
    let n = modes.n_total();
    if m.dim() != n {
        return Err(AlpError::InvalidArgument(format!(
            "propagator is {}x{}, mode set has {n} modes",
            m.dim(),
            m.dim()
        )));
    }
    let transfer = expm(&(dt * &m.entries));
    let new_fields = combine_modes(modes, &transfer)?;
    Ok(ModeSet {
        chi: modes.chi,
        eigenvalues: modes.eigenvalues.clone(),
        modes: new_fields,
        n_negative: modes.n_negative,
    })
}

/// Modified Gram-Schmidt in the mass inner product. Errors if a mode becomes
/// numerically dependent on its predecessors.
pub fn reorthonormalize(fem: &FemSpace, modes: &ModeSet) -> Result<ModeSet> {
    let mut fields: Vec<Field> = modes.modes.clone();
    for m in 0..fields.len() {
        let mut v = fields[m].values.clone();
        for p in 0..m {
            let proj = fields[p].values.dot(&fem.apply_mass(&v));
            v -= proj * &fields[p].values;
        }
        let norm = v.dot(&fem.apply_mass(&v)).max(0.0).sqrt();
        if norm < 1e-8 {
            return Err(AlpError::RankDeficient { mode: m });
        }
        fields[m] = Field::new(v / norm);
    }
    Ok(ModeSet {
        chi: modes.chi,
        eigenvalues: modes.eigenvalues.clone(),
        modes: fields,
        n_negative: modes.n_negative,
    })
}

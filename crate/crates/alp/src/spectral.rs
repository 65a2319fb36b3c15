//! Direct scattering step: generalized Schrödinger eigenproblem, selection of
//! negative-eigenvalue modes, squared-eigenfunction reconstruction of the
//! signal, and calibration of the scattering parameter chi.

use nalgebra::DVector;

use crate::error::{AlpError, Result};
use crate::mesh_fem::{FemSpace, Field};

/// Eigenvalues below this are counted as negative; (-NEGATIVE_TOL, 0) is
/// treated as nonnegative to avoid spurious modes from roundoff.
pub const NEGATIVE_TOL: f64 = 1e-12;

/// Relative spacing below which two eigenvalues are treated as equal
/// (multiplicity guard for the propagator denominator).
pub const MULTIPLICITY_TOL: f64 = 1e-10;

/// Orthonormal eigenfunctions of the Schrödinger operator -Delta - chi*u,
/// sorted by ascending eigenvalue, with the negative/total split.
#[derive(Debug, Clone)]
pub struct ModeSet {
    pub chi: f64,
    /// Eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    /// Mass-orthonormal eigenfunctions, one Field per eigenvalue.
    pub modes: Vec<Field>,
    /// Number of strictly negative eigenvalues among the retained modes.
    pub n_negative: usize,
}

impl ModeSet {
    pub fn n_total(&self) -> usize {
        self.eigenvalues.len()
    }

    /// kappa_m = sqrt(-lambda_m), defined for the negative modes.
    pub fn kappa(&self, m: usize) -> f64 {
        (-self.eigenvalues[m]).max(0.0).sqrt()
    }

    /// Tolerance below which |lambda_p - lambda_m| counts as a multiple eigenvalue.
    pub fn equal_eigenvalue_tol(&self) -> f64 {
        let lmax = self
            .eigenvalues
            .iter()
            .fold(0.0f64, |m, &l| m.max(l.abs()));
        MULTIPLICITY_TOL * lmax.max(1.0)
    }

    /// Max deviation of the Gram matrix from identity in the mass inner product.
    pub fn gram_deviation(&self, fem: &FemSpace) -> Result<f64> {
        let mut dev = 0.0f64;
        for m in 0..self.n_total() {
            for p in m..self.n_total() {
                let g = fem.l2_inner(&self.modes[m], &self.modes[p])?;
                let target = if m == p { 1.0 } else { 0.0 };
                dev = dev.max((g - target).abs());
            }
        }
        Ok(dev)
    }

    fn count_negative(eigenvalues: &[f64]) -> usize {
        eigenvalues.iter().filter(|&&l| l <= -NEGATIVE_TOL).count()
    }

    /// Recount negative eigenvalues against the strict threshold.
    pub fn recount_negative(&mut self) {
        self.n_negative = Self::count_negative(&self.eigenvalues);
    }
}

/// Solve the generalized problem K v - chi W(u) v = lambda M v on the
/// constrained space and return the `n_modes` algebraically smallest
/// eigenpairs, mass-orthonormalized, with a fixed sign convention (nodal
/// entry of largest magnitude positive).
pub fn solve_schrodinger_spectrum(
    fem: &FemSpace,
    u: &Field,
    chi: f64,
    n_modes: usize,
) -> Result<ModeSet> {
    if chi <= 0.0 || !chi.is_finite() {
        return Err(AlpError::InvalidArgument(format!("chi must be positive, got {chi}")));
    }
    let nf = fem.n_free();
    if n_modes == 0 || n_modes > nf {
        return Err(AlpError::InvalidArgument(format!(
            "n_modes must be in 1..={nf}, got {n_modes}"
        )));
    }
    let w = fem.weighted_mass(u)?;
    let a_full = &fem.stiffness - chi * &w;
    let a = fem.restrict_matrix(&a_full);
    let m = fem.restrict_matrix(&fem.mass);

    // Reduce to standard form with the mass Cholesky factor: C = L^-1 A L^-T.
    let chol = m
        .cholesky()
        .ok_or_else(|| AlpError::EigenFailure("mass matrix not SPD".into()))?;
    let l = chol.l();
    let y = l
        .clone()
        .solve_lower_triangular(&a)
        .ok_or_else(|| AlpError::EigenFailure("singular mass Cholesky factor".into()))?;
    let mut c = l
        .clone()
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| AlpError::EigenFailure("singular mass Cholesky factor".into()))?;
    // symmetrize roundoff
    for i in 0..nf {
        for j in (i + 1)..nf {
            let s = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = s;
            c[(j, i)] = s;
        }
    }

    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..nf).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let lt = l.transpose();
    let mut eigenvalues = Vec::with_capacity(n_modes);
    let mut modes = Vec::with_capacity(n_modes);
    for &k in order.iter().take(n_modes) {
        let yk: DVector<f64> = eig.eigenvectors.column(k).into();
        let vk = lt
            .clone()
            .solve_upper_triangular(&yk)
            .ok_or_else(|| AlpError::EigenFailure("back-substitution failed".into()))?;
        let mut full = fem.expand_vector(&vk);
        // normalize in the mass norm and fix the sign
        let norm = (full.transpose() * &fem.mass * &full)[(0, 0)].sqrt();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(AlpError::EigenFailure("zero-norm eigenvector".into()));
        }
        full /= norm;
        let mut best = 0usize;
        for i in 1..full.len() {
            if full[i].abs() > full[best].abs() {
                best = i;
            }
        }
        if full[best] < 0.0 {
            full.neg_mut();
        }
        eigenvalues.push(eig.eigenvalues[k]);
        modes.push(Field::new(full));
    }
    let n_negative = ModeSet::count_negative(&eigenvalues);
    Ok(ModeSet {
        chi,
        eigenvalues,
        modes,
        n_negative,
    })
}

/// Deift-Trubowitz reconstruction from the negative modes:
/// u ~ (4/chi) sum_m sqrt(-lambda_m) psi_m^2, evaluated nodally.
///
/// The factor 4 is the one of the classical reflectionless formula for
/// L2-normalized eigenfunctions (the bound state of -d2/dx2 - 2 sech^2 is
/// phi = sech/sqrt(2) with kappa = 1, and 4 kappa phi^2 recovers 2 sech^2).
pub fn scsa_reconstruct(modes: &ModeSet) -> Field {
    let n = modes.modes.first().map(|f| f.len()).unwrap_or(0);
    let mut out = DVector::zeros(n);
    for m in 0..modes.n_negative {
        let kappa = modes.kappa(m);
        let psi = &modes.modes[m].values;
        for i in 0..n {
            out[i] += kappa * psi[i] * psi[i];
        }
    }
    out *= 4.0 / modes.chi;
    Field::new(out)
}

/// Replace u by u - min(0, min u) so the Schrödinger potential is nonnegative.
/// Returns the shifted field and the applied shift (0 when u >= 0).
pub fn shift_nonnegative(u: &Field) -> (Field, f64) {
    let shift = u.min().min(0.0);
    if shift == 0.0 {
        return (u.clone(), 0.0);
    }
    let shifted = Field::new(u.values.add_scalar(-shift));
    (shifted, shift)
}

fn reconstruction_error(fem: &FemSpace, u0: &Field, modes: &ModeSet) -> Result<f64> {
    let rec = scsa_reconstruct(modes);
    let diff = Field::new(&u0.values - &rec.values);
    fem.l2_norm(&diff)
}

/// Solve the spectrum with enough modes to capture every negative eigenvalue.
fn solve_with_all_negatives(fem: &FemSpace, u: &Field, chi: f64, n_min: usize) -> Result<ModeSet> {
    let nf = fem.n_free();
    let mut n_modes = n_min.clamp(1, nf);
    loop {
        let modes = solve_schrodinger_spectrum(fem, u, chi, n_modes)?;
        if modes.n_negative < n_modes || n_modes == nf {
            return Ok(modes);
        }
        n_modes = (2 * n_modes).min(nf);
    }
}

/// Find the smallest chi in the doubling sequence chi_initial * 2^j whose
/// SCSA reconstruction error is <= epsilon0, then refine with 8 bisection
/// iterations between the bracketing pair. Returns the accepted chi and its
/// mode set.
pub fn calibrate_chi(
    fem: &FemSpace,
    u0: &Field,
    epsilon0: f64,
    chi_initial: f64,
    chi_max: f64,
) -> Result<(f64, ModeSet)> {
    if epsilon0 <= 0.0 {
        return Err(AlpError::InvalidArgument("epsilon0 must be positive".into()));
    }
    if chi_initial <= 0.0 || chi_initial > chi_max {
        return Err(AlpError::InvalidArgument(
            "need 0 < chi_initial <= chi_max".into(),
        ));
    }
    let n_min = 16.min(fem.n_free());
    let evaluate = |chi: f64| -> Result<(ModeSet, f64)> {
        let modes = solve_with_all_negatives(fem, u0, chi, n_min)?;
        let err = reconstruction_error(fem, u0, &modes)?;
        Ok((modes, err))
    };

    let mut chi = chi_initial;
    let (mut best_chi, mut best_err) = (chi_initial, f64::INFINITY);
    let bracket; // (lo fail, hi pass, modes@hi)
    let mut prev_fail = None;
    loop {
        let (modes, err) = evaluate(chi)?;
        if err <= epsilon0 {
            if prev_fail.is_none() {
                // chi_initial already meets the tolerance
                return Ok((chi, modes));
            }
            bracket = (prev_fail.unwrap(), chi, modes);
            break;
        }
        if err < best_err {
            best_err = err;
            best_chi = chi;
        }
        prev_fail = Some(chi);
        if chi >= chi_max {
            return Err(AlpError::CalibrationFailure {
                chi: best_chi,
                error: best_err,
                tol: epsilon0,
            });
        }
        chi = (2.0 * chi).min(chi_max);
    }

    let (mut lo, mut hi, mut hi_modes) = bracket;
    for _ in 0..8 {
        let mid = 0.5 * (lo + hi);
        let (modes, err) = evaluate(mid)?;
        if err <= epsilon0 {
            hi = mid;
            hi_modes = modes;
        } else {
            lo = mid;
        }
    }
    Ok((hi, hi_modes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_fem::{assemble, build_interval_mesh, BoundaryKind};
    use std::f64::consts::PI;

    fn interval_space(a: f64, b: f64, n: usize) -> FemSpace {
        assemble(build_interval_mesh(a, b, n, BoundaryKind::Dirichlet).unwrap()).unwrap()
    }

    #[test]
    fn laplacian_spectrum_on_unit_interval() {
        // u = 0: eigenvalues of -d2/dx2 with Dirichlet BC are (m pi)^2.
        // chi is irrelevant for u = 0 but must be positive.
        let fem = interval_space(0.0, 1.0, 400);
        let zero = Field::zeros(fem.n_nodes());
        let modes = solve_schrodinger_spectrum(&fem, &zero, 1.0, 3).unwrap();
        for (m, &lam) in modes.eigenvalues.iter().enumerate() {
            let exact = ((m + 1) as f64 * PI).powi(2);
            assert!(
                (lam - exact).abs() < 0.01 * exact,
                "mode {m}: {lam} vs {exact}"
            );
        }
        assert_eq!(modes.n_negative, 0);
    }

    #[test]
    fn one_soliton_spectrum() {
        // u0 = 2 sech^2(x): a single bound state at lambda = -1.
        let fem = interval_space(-15.0, 15.0, 500);
        let u0 = Field::from_fn(&fem.mesh, |x, _| 2.0 / x.cosh().powi(2));
        let modes = solve_schrodinger_spectrum(&fem, &u0, 1.0, 10).unwrap();
        assert_eq!(modes.n_negative, 1);
        assert!(
            (modes.eigenvalues[0] + 1.0).abs() <= 5e-3,
            "lambda_1 = {}",
            modes.eigenvalues[0]
        );
    }

    #[test]
    fn one_soliton_reconstruction_error() {
        let fem = interval_space(-15.0, 15.0, 500);
        let u0 = Field::from_fn(&fem.mesh, |x, _| 2.0 / x.cosh().powi(2));
        let modes = solve_schrodinger_spectrum(&fem, &u0, 1.0, 10).unwrap();
        let err = reconstruction_error(&fem, &u0, &modes).unwrap();
        assert!(err <= 1e-3, "reconstruction error {err}");
    }

    #[test]
    fn orthonormality_and_residual() {
        let fem = interval_space(-15.0, 15.0, 300);
        let u0 = Field::from_fn(&fem.mesh, |x, _| 2.0 / x.cosh().powi(2));
        let chi = 3.0;
        let modes = solve_schrodinger_spectrum(&fem, &u0, chi, 8).unwrap();
        assert!(modes.gram_deviation(&fem).unwrap() <= 1e-8);

        // generalized eigen-residual on the constrained space
        let w = fem.weighted_mass(&u0).unwrap();
        let a_full = &fem.stiffness - chi * &w;
        let a = fem.restrict_matrix(&a_full);
        let m = fem.restrict_matrix(&fem.mass);
        for (k, psi) in modes.modes.iter().enumerate() {
            let v = fem.restrict_vector(&psi.values);
            let r = &a * &v - modes.eigenvalues[k] * (&m * &v);
            let scale = (&a * &v).norm().max((&m * &v).norm() * modes.eigenvalues[k].abs());
            assert!(
                r.norm() <= 1e-6 * scale.max(1e-30),
                "mode {k} residual {}",
                r.norm() / scale
            );
        }
    }

    #[test]
    fn mode_count_monotone_in_chi() {
        let fem = interval_space(-10.0, 10.0, 300);
        for u0 in [
            Field::from_fn(&fem.mesh, |x, _| 2.0 / x.cosh().powi(2)),
            Field::from_fn(&fem.mesh, |x, _| (-x * x / 4.0).exp()),
        ] {
            let mut prev = 0;
            for chi in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
                let modes = solve_with_all_negatives(&fem, &u0, chi, 8).unwrap();
                assert!(
                    modes.n_negative >= prev,
                    "N_- dropped from {prev} to {} at chi={chi}",
                    modes.n_negative
                );
                prev = modes.n_negative;
            }
            assert!(prev > 0);
        }
    }

    #[test]
    fn shift_nonnegative_cases() {
        let fem = interval_space(0.0, 1.0, 10);
        let pos = Field::from_fn(&fem.mesh, |x, _| x + 0.5);
        let (s, shift) = shift_nonnegative(&pos);
        assert_eq!(shift, 0.0);
        assert_eq!(s.values, pos.values);

        let neg = Field::new(DVector::from_element(11, -2.0));
        let (s, shift) = shift_nonnegative(&neg);
        assert_eq!(shift, -2.0);
        assert_eq!(s.max(), 0.0);
        assert_eq!(s.min(), 0.0);

        let mixed = Field::from_fn(&fem.mesh, |x, _| x - 0.5);
        let (s, shift) = shift_nonnegative(&mixed);
        assert_eq!(s.min(), 0.0);
        assert!((shift - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn empty_negative_set_reconstructs_zero() {
        let fem = interval_space(0.0, 1.0, 50);
        let zero = Field::zeros(fem.n_nodes());
        let modes = solve_schrodinger_spectrum(&fem, &zero, 1.0, 3).unwrap();
        assert_eq!(modes.n_negative, 0);
        let rec = scsa_reconstruct(&modes);
        assert_eq!(rec.values.amax(), 0.0);
    }

    #[test]
    fn calibrate_returns_initial_when_sufficient() {
        let fem = interval_space(-15.0, 15.0, 500);
        let u0 = Field::from_fn(&fem.mesh, |x, _| 2.0 / x.cosh().powi(2));
        let (chi, modes) = calibrate_chi(&fem, &u0, 1e-3, 1.0, 1024.0).unwrap();
        assert_eq!(chi, 1.0);
        assert_eq!(modes.n_negative, 1);
    }

    #[test]
    fn calibrate_unreachable_tolerance_errors() {
        let fem = interval_space(-10.0, 10.0, 200);
        let u0 = Field::from_fn(&fem.mesh, |x, _| (-x * x).exp());
        let err = calibrate_chi(&fem, &u0, 1e-14, 1.0, 4.0);
        assert!(matches!(err, Err(AlpError::CalibrationFailure { .. })));
    }

    #[test]
    fn fkpp_initial_datum_calibration() {
        // FKPP bumps: chi = 500 gives 4 negative modes; the accepted chi from
        // calibration at eps0 = 1e-3 lands in [250, 1000] with 4..=6 modes.
        let fem = interval_space(0.0, 1.0, 250);
        let u0 = Field::from_fn(&fem.mesh, |x, _| {
            (-100.0 * (x - 0.25) * (x - 0.25)).exp() + (-100.0 * (x - 0.75) * (x - 0.75)).exp()
        });
        let modes = solve_with_all_negatives(&fem, &u0, 500.0, 16).unwrap();
        assert_eq!(modes.n_negative, 4, "chi=500 should retain 4 modes");

        // The accepted chi always meets the tolerance and sits above the last
        // failing doubling point.
        let eps0 = 0.05;
        let (chi, cal_modes) = calibrate_chi(&fem, &u0, eps0, 1.0, 4096.0).unwrap();
        let err = reconstruction_error(&fem, &u0, &cal_modes).unwrap();
        assert!(err <= eps0, "accepted chi {chi} has error {err}");
        assert!(chi > 128.0 && chi <= 256.0, "accepted chi {chi}");
        assert!(cal_modes.n_negative >= 2);
    }

    #[test]
    fn quadrupling_sequence_error_decreases() {
        // The error is not monotone under doubling (oscillation interference
        // when new modes enter) but decreases cleanly per decade.
        let fem = interval_space(0.0, 1.0, 250);
        let u0 = Field::from_fn(&fem.mesh, |x, _| {
            (-100.0 * (x - 0.25) * (x - 0.25)).exp() + (-100.0 * (x - 0.75) * (x - 0.75)).exp()
        });
        let mut prev = f64::INFINITY;
        for chi in [32.0, 128.0, 512.0, 2048.0, 8192.0] {
            let modes = solve_with_all_negatives(&fem, &u0, chi, 16).unwrap();
            let err = reconstruction_error(&fem, &u0, &modes).unwrap();
            assert!(err < prev, "error rose at chi={chi}: {prev} -> {err}");
            prev = err;
        }
    }
}

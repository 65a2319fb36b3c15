//! Experiment driver: configuration parsing, the ALP time loop, error
//! metrics, and CSV/JSON artifact writers.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{AlpError, Result};
use crate::lax::{assemble_propagator, frobenius_error_of, frobenius_norm};
use crate::mesh_fem::{
    assemble, build_interval_mesh, build_rect_union_mesh, load_triangle_mesh, BoundaryKind,
    FemSpace, Field, Mesh,
};
use crate::problems::{
    exact_one_soliton, exact_three_soliton, fkpp_reference_solve, ProblemKind, SolitonData,
};
use crate::propagation::{
    exact_exponential_step, reorthonormalize, step_eigenvalues, step_modes, EigenvalueScheme,
    StepReport,
};
use crate::reconstruction::{reconstruct_solution, solve_alpha};
use crate::spectral::{
    calibrate_chi, shift_nonnegative, solve_schrodinger_spectrum, ModeSet,
    NEGATIVE_TOL,
};

/// Domain discretization request.
#[derive(Debug, Clone)]
pub enum DomainConfig {
    Interval { xmin: f64, xmax: f64, n_elements: usize },
    RectUnion { rects: Vec<(f64, f64, f64, f64)>, n_per_unit: usize },
    Files { node_file: String, element_file: String },
}

/// One Gaussian bump amplitude * exp(-width * |x - center|^2).
#[derive(Debug, Clone, Copy)]
pub struct GaussianTerm {
    pub amplitude: f64,
    pub width: f64,
    pub center: [f64; 2],
}

#[derive(Debug, Clone)]
pub enum InitialCondition {
    OneSoliton { beta: f64 },
    Solitons(SolitonData),
    Gaussians(Vec<GaussianTerm>),
}

#[derive(Debug, Clone, Copy)]
pub enum ChiSpec {
    Fixed(f64),
    Auto { epsilon0: f64, chi_initial: f64, chi_max: f64 },
}

/// Full experiment configuration, read from a flat key = value text file
/// with bracketed section headers.
#[derive(Debug, Clone)]
pub struct AlpConfig {
    pub problem: ProblemKind,
    pub boundary: BoundaryKind,
    pub domain: DomainConfig,
    pub initial: InitialCondition,
    /// Evolve the initial datum with the reference solver before starting
    /// (FKPP only; 0 disables).
    pub prerun_steps: usize,
    pub prerun_dt: f64,
    pub chi: ChiSpec,
    pub n_modes: usize,
    pub dt: f64,
    pub t_final: f64,
    pub scheme: EigenvalueScheme,
    /// Advance modes with exp(dt M) instead of the second-order truncation;
    /// keeps the mode set orthonormal for any dt at the cost of an expm.
    pub exact_exponential: bool,
    pub promotion: bool,
    /// Repair mass-orthonormality of the modes when the Gram deviation of a
    /// step exceeds this.
    pub reorthonormalize_threshold: f64,
    /// Record a solution snapshot every this many steps (0 picks the default:
    /// every step in 1D, every 5 steps in 2D).
    pub snapshot_stride: usize,
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = line[1..line.len() - 1].trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            AlpError::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        map.insert(format!("{section}.{}", k.trim()), v.trim().to_string());
    }
    Ok(map)
}

struct KvReader {
    map: BTreeMap<String, String>,
}

impl KvReader {
    fn req(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| AlpError::Config(format!("missing required key `{key}`")))
    }

    fn opt(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn req_f64(&self, key: &str) -> Result<f64> {
        self.req(key)?
            .parse()
            .map_err(|_| AlpError::Config(format!("key `{key}` is not a number")))
    }

    fn opt_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.opt(key) {
            Some(s) => s
                .parse()
                .map_err(|_| AlpError::Config(format!("key `{key}` is not a number"))),
            None => Ok(default),
        }
    }

    fn req_usize(&self, key: &str) -> Result<usize> {
        self.req(key)?
            .parse()
            .map_err(|_| AlpError::Config(format!("key `{key}` is not an integer")))
    }

    fn opt_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.opt(key) {
            Some(s) => s
                .parse()
                .map_err(|_| AlpError::Config(format!("key `{key}` is not an integer"))),
            None => Ok(default),
        }
    }

    fn opt_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.opt(key) {
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(other) => Err(AlpError::Config(format!(
                "key `{key}` must be true or false, got `{other}`"
            ))),
            None => Ok(default),
        }
    }

    fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.req(key)?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| AlpError::Config(format!("key `{key}` has a non-number entry")))
            })
            .collect()
    }
}

impl AlpConfig {
    pub fn parse(text: &str) -> Result<AlpConfig> {
        let kv = KvReader { map: parse_kv(text)? };

        let boundary = match kv.req("problem.boundary")? {
            "dirichlet" => BoundaryKind::Dirichlet,
            "neumann" => BoundaryKind::Neumann,
            other => {
                return Err(AlpError::Config(format!("unknown boundary kind `{other}`")));
            }
        };
        let problem = match kv.req("problem.kind")? {
            "kdv" => ProblemKind::Kdv,
            "fkpp" => ProblemKind::Fkpp { alpha: kv.req_f64("problem.alpha")? },
            other => {
                return Err(AlpError::Config(format!("unknown problem kind `{other}`")));
            }
        };

        let domain = match kv.req("domain.kind")? {
            "interval" => DomainConfig::Interval {
                xmin: kv.req_f64("domain.xmin")?,
                xmax: kv.req_f64("domain.xmax")?,
                n_elements: kv.req_usize("domain.n_elements")?,
            },
            "rect_union" => {
                let mut rects = Vec::new();
                for part in kv.req("domain.rects")?.split(';') {
                    let vals: Vec<f64> = part
                        .split(',')
                        .map(|s| {
                            s.trim().parse().map_err(|_| {
                                AlpError::Config("domain.rects has a non-number entry".into())
                            })
                        })
                        .collect::<Result<_>>()?;
                    if vals.len() != 4 {
                        return Err(AlpError::Config(
                            "each rect needs xmin,xmax,ymin,ymax".into(),
                        ));
                    }
                    rects.push((vals[0], vals[1], vals[2], vals[3]));
                }
                DomainConfig::RectUnion {
                    rects,
                    n_per_unit: kv.req_usize("domain.n_per_unit")?,
                }
            }
            "files" => DomainConfig::Files {
                node_file: kv.req("domain.node_file")?.to_string(),
                element_file: kv.req("domain.element_file")?.to_string(),
            },
            other => {
                return Err(AlpError::Config(format!("unknown domain kind `{other}`")));
            }
        };

        let initial = match kv.req("initial.kind")? {
            "one_soliton" => InitialCondition::OneSoliton { beta: kv.req_f64("initial.beta")? },
            "solitons" => InitialCondition::Solitons(SolitonData::new(
                kv.f64_list("initial.c")?,
                kv.f64_list("initial.k")?,
            )?),
            "gaussians" => {
                let mut terms = Vec::new();
                for part in kv.req("initial.terms")?.split(';') {
                    let vals: Vec<f64> = part
                        .split(',')
                        .map(|s| {
                            s.trim().parse().map_err(|_| {
                                AlpError::Config("initial.terms has a non-number entry".into())
                            })
                        })
                        .collect::<Result<_>>()?;
                    if vals.len() != 3 && vals.len() != 4 {
                        return Err(AlpError::Config(
                            "each gaussian needs amplitude,width,cx[,cy]".into(),
                        ));
                    }
                    terms.push(GaussianTerm {
                        amplitude: vals[0],
                        width: vals[1],
                        center: [vals[2], if vals.len() == 4 { vals[3] } else { 0.0 }],
                    });
                }
                InitialCondition::Gaussians(terms)
            }
            other => {
                return Err(AlpError::Config(format!("unknown initial kind `{other}`")));
            }
        };

        let chi = match kv.req("alp.chi")? {
            "auto" => ChiSpec::Auto {
                epsilon0: kv.req_f64("alp.epsilon0")?,
                chi_initial: kv.opt_f64("alp.chi_initial", 1.0)?,
                chi_max: kv.opt_f64("alp.chi_max", 1e6)?,
            },
            s => ChiSpec::Fixed(
                s.parse()
                    .map_err(|_| AlpError::Config("alp.chi must be a number or `auto`".into()))?,
            ),
        };
        let scheme = match kv.opt("alp.eigenvalue_scheme") {
            None | Some("proposition") => EigenvalueScheme::Proposition,
            Some("paper-discrete") => EigenvalueScheme::PaperDiscrete,
            Some(other) => {
                return Err(AlpError::Config(format!(
                    "unknown eigenvalue scheme `{other}`"
                )));
            }
        };

        let exact_exponential = match kv.opt("alp.mode_stepping") {
            None | Some("truncated") => false,
            Some("exact-exponential") => true,
            Some(other) => {
                return Err(AlpError::Config(format!("unknown mode stepping `{other}`")));
            }
        };

        let config = AlpConfig {
            problem,
            boundary,
            domain,
            initial,
            prerun_steps: kv.opt_usize("initial.prerun_steps", 0)?,
            prerun_dt: kv.opt_f64("initial.prerun_dt", 0.0)?,
            chi,
            n_modes: kv.req_usize("alp.n_modes")?,
            dt: kv.req_f64("alp.dt")?,
            t_final: kv.req_f64("alp.t_final")?,
            scheme,
            exact_exponential,
            promotion: kv.opt_bool("alp.promotion", true)?,
            reorthonormalize_threshold: kv.opt_f64("alp.reorthonormalize_threshold", 1e-6)?,
            snapshot_stride: kv.opt_usize("alp.snapshot_stride", 0)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dt <= 0.0 || self.t_final <= 0.0 {
            return Err(AlpError::Config("dt and t_final must be positive".into()));
        }
        if self.n_modes < 1 {
            return Err(AlpError::Config("n_modes must be at least 1".into()));
        }
        if let ChiSpec::Auto { epsilon0, .. } = self.chi {
            if epsilon0 <= 0.0 {
                return Err(AlpError::Config("epsilon0 must be positive".into()));
            }
        }
        if self.prerun_steps > 0 {
            if self.prerun_dt <= 0.0 {
                return Err(AlpError::Config("prerun_dt must be positive".into()));
            }
            if matches!(self.problem, ProblemKind::Kdv) {
                return Err(AlpError::Config("prerun is only available for FKPP".into()));
            }
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        ((self.t_final / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn effective_snapshot_stride(&self, mesh: &Mesh) -> usize {
        if self.snapshot_stride > 0 {
            self.snapshot_stride
        } else if mesh.dimension == 1 {
            1
        } else {
            5
        }
    }
}

/// Build the FEM space requested by the configuration.
pub fn build_fem(config: &AlpConfig) -> Result<FemSpace> {
    let mesh = match &config.domain {
        DomainConfig::Interval { xmin, xmax, n_elements } => {
            build_interval_mesh(*xmin, *xmax, *n_elements, config.boundary)?
        }
        DomainConfig::RectUnion { rects, n_per_unit } => {
            build_rect_union_mesh(rects, *n_per_unit, config.boundary)?
        }
        DomainConfig::Files { node_file, element_file } => {
            let nodes = std::fs::read_to_string(node_file)?;
            let elements = std::fs::read_to_string(element_file)?;
            load_triangle_mesh(&nodes, &elements, config.boundary)?
        }
    };
    let fem = assemble(mesh)?;
    config.problem.validate(&fem)?;
    Ok(fem)
}

/// Evaluate the configured initial condition on the mesh, including the
/// optional reference-solver prerun.
pub fn build_initial(config: &AlpConfig, fem: &FemSpace) -> Result<Field> {
    let u0 = match &config.initial {
        InitialCondition::OneSoliton { beta } => {
            if fem.mesh.dimension != 1 {
                return Err(AlpError::Config("soliton data needs a 1D mesh".into()));
            }
            Field::from_fn(&fem.mesh, |x, _| exact_one_soliton(x, 0.0, *beta))
        }
        InitialCondition::Solitons(data) => {
            if fem.mesh.dimension != 1 {
                return Err(AlpError::Config("soliton data needs a 1D mesh".into()));
            }
            let mut vals = DVector::zeros(fem.n_nodes());
            for (i, node) in fem.mesh.nodes.iter().enumerate() {
                vals[i] = exact_three_soliton(node[0], 0.0, data)?;
            }
            Field::new(vals)
        }
        InitialCondition::Gaussians(terms) => Field::from_fn(&fem.mesh, |x, y| {
            terms
                .iter()
                .map(|t| {
                    let dx = x - t.center[0];
                    let dy = y - t.center[1];
                    t.amplitude * (-t.width * (dx * dx + dy * dy)).exp()
                })
                .sum()
        }),
    };
    if config.prerun_steps == 0 {
        return Ok(u0);
    }
    let alpha = match config.problem {
        ProblemKind::Fkpp { alpha } => alpha,
        ProblemKind::Kdv => unreachable!("validated in AlpConfig::validate"),
    };
    let traj = fkpp_reference_solve(fem, &u0, alpha, config.prerun_dt, config.prerun_steps)?;
    Ok(traj.into_iter().last().unwrap())
}

/// Evolving state of the reduced model.
#[derive(Debug, Clone)]
pub struct AlpState {
    pub modes: ModeSet,
    pub shift: f64,
    /// Current reconstructed solution (shift included).
    pub u: Field,
    pub time: f64,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct PromotionEvent {
    pub step: usize,
    pub time: f64,
    pub mode: usize,
}

/// Per-step history of the run; every series has n_steps + 1 entries.
#[derive(Debug, Clone, Default)]
pub struct AlpTrajectory {
    pub times: Vec<f64>,
    pub n_negative: Vec<usize>,
    pub eigenvalues: Vec<Vec<f64>>,
    pub frobenius: Vec<f64>,
    pub gram_deviation: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    /// Relative Frobenius gap E_F(N_M - 1, N_M) of the propagator used at
    /// each step (repeated at index 0 for alignment).
    pub e_frobenius_drop: Vec<f64>,
    pub snapshots: Vec<(usize, Field)>,
    pub promotions: Vec<PromotionEvent>,
}

/// Outcome of initialization: state at t = 0 plus the L2 error (absolute and
/// relative) of the reconstructed datum the run starts from.
pub struct InitReport {
    pub state: AlpState,
    pub initial_error_l2: f64,
    pub initial_error_rel: f64,
}

/// Shift the datum nonnegative, fix or calibrate chi, solve the spectrum for
/// N_M modes and measure the reconstruction error of the initial datum.
pub fn alp_initialize(fem: &FemSpace, u0: &Field, config: &AlpConfig) -> Result<InitReport> {
    let (shifted, shift) = shift_nonnegative(u0);
    let chi = match config.chi {
        ChiSpec::Fixed(chi) => chi,
        ChiSpec::Auto { epsilon0, chi_initial, chi_max } => {
            let (chi, _) = calibrate_chi(fem, &shifted, epsilon0, chi_initial, chi_max)?;
            chi
        }
    };
    let modes = solve_schrodinger_spectrum(fem, &shifted, chi, config.n_modes)?;
    let n0 = fem.l2_norm(u0)?;
    if n0 == 0.0 {
        return Err(AlpError::InvalidArgument("zero initial datum".into()));
    }
    let coeffs = solve_alpha(fem, &modes)?;
    let u = reconstruct_solution(&modes, &coeffs.alpha, shift)?;
    // error of the reconstruction the run actually starts from
    let diff = Field::new(&u.values - &u0.values);
    let initial_error_l2 = fem.l2_norm(&diff)?;
    Ok(InitReport {
        state: AlpState { modes, shift, u, time: 0.0, step: 0 },
        initial_error_l2,
        initial_error_rel: initial_error_l2 / n0,
    })
}

/// Record of one completed step, aligned with the trajectory series.
pub struct StepRecord {
    pub frobenius: f64,
    pub gram_deviation: f64,
    pub e_frobenius_drop: f64,
    pub alpha: Vec<f64>,
    pub promoted: Vec<usize>,
}

/// One ALP step with an externally supplied right-hand side field F(u^n).
pub fn alp_step_with_rhs(
    fem: &FemSpace,
    state: &mut AlpState,
    f_of_u: &Field,
    config: &AlpConfig,
) -> Result<StepRecord> {
    let dt = config.dt;
    let m = assemble_propagator(fem, &state.modes, f_of_u, state.time)?;
    let new_eigs = step_eigenvalues(fem, &state.modes, f_of_u, dt, config.scheme)?;
    let (mut new_modes, report) = if config.exact_exponential {
        let stepped = exact_exponential_step(&state.modes, &m, dt)?;
        let report = StepReport {
            gram_deviation: stepped.gram_deviation(fem)?,
            ..Default::default()
        };
        (stepped, report)
    } else {
        step_modes(fem, &state.modes, &m, dt)?
    };
    new_modes.eigenvalues = new_eigs;
    if report.gram_deviation > config.reorthonormalize_threshold {
        new_modes = reorthonormalize(fem, &new_modes)?;
    }

    let mut promoted = Vec::new();
    if config.promotion {
        while new_modes.n_negative < new_modes.n_total()
            && new_modes.eigenvalues[new_modes.n_negative] < -NEGATIVE_TOL
        {
            promoted.push(new_modes.n_negative);
            new_modes.n_negative += 1;
        }
    }

    let coeffs = solve_alpha(fem, &new_modes)?;
    state.u = reconstruct_solution(&new_modes, &coeffs.alpha, state.shift)?;
    state.modes = new_modes;
    state.time += dt;
    state.step += 1;
    Ok(StepRecord {
        frobenius: frobenius_norm(&m),
        gram_deviation: report.gram_deviation,
        e_frobenius_drop: if m.dim() > 1 {
            frobenius_error_of(&m, m.dim() - 1).unwrap_or(0.0)
        } else {
            0.0
        },
        alpha: coeffs.alpha.iter().copied().collect(),
        promoted,
    })
}

/// One ALP step: evaluate F at the current reduced solution and advance.
pub fn alp_step(fem: &FemSpace, state: &mut AlpState, config: &AlpConfig) -> Result<StepRecord> {
    let f = config.problem.rhs(fem, &state.u)?;
    alp_step_with_rhs(fem, state, &f, config)
}

pub struct RunOutcome {
    pub trajectory: AlpTrajectory,
    pub state: AlpState,
    pub initial_error_l2: f64,
    pub initial_error_rel: f64,
}

/// Full run: initialize, then advance ceil(t_final / dt) steps, recording the
/// trajectory.
pub fn alp_run(fem: &FemSpace, u0: &Field, config: &AlpConfig) -> Result<RunOutcome> {
    let init = alp_initialize(fem, u0, config)?;
    let mut state = init.state;
    let n_steps = config.n_steps();
    let stride = config.effective_snapshot_stride(&fem.mesh);

    let mut traj = AlpTrajectory::default();
    // row 0: the state right after initialization
    let f0 = config.problem.rhs(fem, &state.u)?;
    let m0 = assemble_propagator(fem, &state.modes, &f0, 0.0)?;
    let coeffs0 = solve_alpha(fem, &state.modes)?;
    traj.times.push(0.0);
    traj.n_negative.push(state.modes.n_negative);
    traj.eigenvalues.push(state.modes.eigenvalues.clone());
    traj.frobenius.push(frobenius_norm(&m0));
    traj.gram_deviation.push(state.modes.gram_deviation(fem)?);
    traj.alpha.push(coeffs0.alpha.iter().copied().collect());
    traj.e_frobenius_drop.push(if m0.dim() > 1 {
        frobenius_error_of(&m0, m0.dim() - 1).unwrap_or(0.0)
    } else {
        0.0
    });
    traj.snapshots.push((0, state.u.clone()));

    for step in 1..=n_steps {
        let rec = alp_step(fem, &mut state, config)?;
        traj.times.push(state.time);
        traj.n_negative.push(state.modes.n_negative);
        traj.eigenvalues.push(state.modes.eigenvalues.clone());
        traj.frobenius.push(rec.frobenius);
        traj.gram_deviation.push(rec.gram_deviation);
        traj.alpha.push(rec.alpha.clone());
        traj.e_frobenius_drop.push(rec.e_frobenius_drop);
        for &mode in &rec.promoted {
            traj.promotions.push(PromotionEvent { step, time: state.time, mode });
        }
        if step % stride == 0 || step == n_steps {
            traj.snapshots.push((step, state.u.clone()));
        }
    }
    Ok(RunOutcome {
        trajectory: traj,
        state,
        initial_error_l2: init.initial_error_l2,
        initial_error_rel: init.initial_error_rel,
    })
}

/// ||u - u_ref||_L2 / ||u_ref||_L2.
pub fn metric_l2_relative_error(fem: &FemSpace, u: &Field, u_ref: &Field) -> Result<f64> {
    let nref = fem.l2_norm(u_ref)?;
    if nref == 0.0 {
        return Err(AlpError::InvalidArgument("zero reference norm".into()));
    }
    let diff = Field::new(&u.values - &u_ref.values);
    Ok(fem.l2_norm(&diff)? / nref)
}

/// Peak abscissa of a 1D field: nodal argmax refined by a parabolic fit
/// through the three surrounding nodes.
pub fn peak_position(fem: &FemSpace, u: &Field) -> Result<f64> {
    if fem.mesh.dimension != 1 {
        return Err(AlpError::InvalidArgument("peak position needs a 1D field".into()));
    }
    if u.len() != fem.n_nodes() {
        return Err(AlpError::MeshMismatch { field_len: u.len(), mesh_len: fem.n_nodes() });
    }
    if u.max() - u.min() <= 1e-12 {
        return Err(AlpError::Numerical("flat field has no unique maximum".into()));
    }
    let n = u.len();
    let mut imax = 0;
    for i in 1..n {
        if u.values[i] > u.values[imax] {
            imax = i;
        }
    }
    let x = fem.mesh.nodes[imax][0];
    if imax == 0 || imax == n - 1 {
        return Ok(x);
    }
    let (vl, vc, vr) = (u.values[imax - 1], u.values[imax], u.values[imax + 1]);
    let denom = vl - 2.0 * vc + vr;
    if denom.abs() <= 1e-14 * vc.abs().max(1.0) {
        return Ok(x);
    }
    let h = fem.mesh.nodes[imax + 1][0] - x;
    Ok(x + 0.5 * h * (vl - vr) / denom)
}

/// |argmax(u) - argmax(u_exact)| / travel_distance.
pub fn metric_peak_position_error(
    fem: &FemSpace,
    u: &Field,
    u_exact: &Field,
    travel_distance: f64,
) -> Result<f64> {
    if travel_distance <= 0.0 {
        return Err(AlpError::InvalidArgument("travel distance must be positive".into()));
    }
    Ok((peak_position(fem, u)? - peak_position(fem, u_exact)?).abs() / travel_distance)
}

/// Reference trajectory used by `compare` and sweep error columns.
pub enum ReferenceSolution {
    OneSoliton { beta: f64 },
    Solitons(SolitonData),
    /// Full-order fields at the same times as the ALP run (n_steps + 1).
    Fkpp(Vec<Field>),
}

impl ReferenceSolution {
    /// Reference field at trajectory row `idx` (time = idx * dt).
    pub fn field_at(&self, fem: &FemSpace, idx: usize, dt: f64) -> Result<Field> {
        match self {
            ReferenceSolution::OneSoliton { beta } => {
                let t = idx as f64 * dt;
                Ok(Field::from_fn(&fem.mesh, |x, _| exact_one_soliton(x, t, *beta)))
            }
            ReferenceSolution::Solitons(data) => {
                let t = idx as f64 * dt;
                let mut vals = DVector::zeros(fem.n_nodes());
                for (i, node) in fem.mesh.nodes.iter().enumerate() {
                    vals[i] = exact_three_soliton(node[0], t, data)?;
                }
                Ok(Field::new(vals))
            }
            ReferenceSolution::Fkpp(fields) => fields
                .get(idx)
                .cloned()
                .ok_or_else(|| AlpError::InvalidArgument(format!("no reference at row {idx}"))),
        }
    }
}

/// Build the reference for the configured problem: exact solutions for KdV,
/// the full-order IMEX solve for FKPP.
pub fn build_reference(config: &AlpConfig, fem: &FemSpace, u0: &Field) -> Result<ReferenceSolution> {
    match (&config.problem, &config.initial) {
        (ProblemKind::Kdv, InitialCondition::OneSoliton { beta }) => {
            Ok(ReferenceSolution::OneSoliton { beta: *beta })
        }
        (ProblemKind::Kdv, InitialCondition::Solitons(data)) => {
            Ok(ReferenceSolution::Solitons(data.clone()))
        }
        (ProblemKind::Kdv, _) => Err(AlpError::Config(
            "no reference solution for this KdV initial condition".into(),
        )),
        (ProblemKind::Fkpp { alpha }, _) => Ok(ReferenceSolution::Fkpp(fkpp_reference_solve(
            fem,
            u0,
            *alpha,
            config.dt,
            config.n_steps(),
        )?)),
    }
}

/// Trajectory CSV. When `errors` is given (one row per trajectory row) the
/// optional l2_error / peak_error columns are appended.
pub fn write_trajectory_csv(
    path: &Path,
    traj: &AlpTrajectory,
    n_modes: usize,
    errors: Option<&[(f64, Option<f64>)]>,
) -> Result<()> {
    let mut out = String::new();
    out.push_str("step,time,n_negative");
    for m in 1..=n_modes {
        out.push_str(&format!(",lambda_{m}"));
    }
    out.push_str(",frobenius,gram_deviation");
    if errors.is_some() {
        out.push_str(",l2_error,peak_error");
    }
    out.push('\n');
    for i in 0..traj.times.len() {
        out.push_str(&format!("{},{},{}", i, traj.times[i], traj.n_negative[i]));
        for m in 0..n_modes {
            out.push_str(&format!(",{}", traj.eigenvalues[i][m]));
        }
        out.push_str(&format!(",{},{}", traj.frobenius[i], traj.gram_deviation[i]));
        if let Some(errs) = errors {
            out.push_str(&format!(",{}", errs[i].0));
            match errs[i].1 {
                Some(p) => out.push_str(&format!(",{p}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Field snapshot CSV: node_index, x[, y], value.
pub fn write_snapshot_csv(path: &Path, mesh: &Mesh, field: &Field) -> Result<()> {
    let mut out = String::new();
    if mesh.dimension == 1 {
        out.push_str("node_index,x,value\n");
        for (i, node) in mesh.nodes.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i, node[0], field.values[i]));
        }
    } else {
        out.push_str("node_index,x,y,value\n");
        for (i, node) in mesh.nodes.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", i, node[0], node[1], field.values[i]));
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Summary JSON: config echo, initialization and final errors, promotion
/// events, wall-clock seconds.
#[allow(clippy::too_many_arguments)]
pub fn write_summary_json(
    path: &Path,
    config_text: &str,
    config: &AlpConfig,
    resolved_chi: f64,
    outcome: &RunOutcome,
    final_l2_error: Option<f64>,
    final_peak_error: Option<f64>,
    wall_seconds: f64,
) -> Result<()> {
    let traj = &outcome.trajectory;
    let promotions: Vec<serde_json::Value> = traj
        .promotions
        .iter()
        .map(|p| serde_json::json!({"step": p.step, "time": p.time, "mode": p.mode}))
        .collect();
    let doc = serde_json::json!({
        "config_text": config_text,
        "resolved": {
            "chi": resolved_chi,
            "n_modes": config.n_modes,
            "dt": config.dt,
            "t_final": config.t_final,
            "n_steps": config.n_steps(),
        },
        "initial_error_l2": outcome.initial_error_l2,
        "initial_error_rel": outcome.initial_error_rel,
        "final_l2_error": final_l2_error,
        "final_peak_error": final_peak_error,
        "final_n_negative": outcome.state.modes.n_negative,
        "final_eigenvalues": traj.eigenvalues.last(),
        "promotion_events": promotions,
        "wall_seconds": wall_seconds,
    });
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| AlpError::Numerical(format!("JSON serialization failed: {e}")))?;
    write_atomic(path, text.as_bytes())
}

/// Write through a temp file and rename so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

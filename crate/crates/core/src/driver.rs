//! Time loop, initial data, the homogeneous oracle and the epsilon study.

use crate::chemotaxis::{
    logistic_substep, step_c_unchecked, step_n_unchecked, transport_dt_bound, ReactionParams,
    ScalarStepOptions, StepError,
};
use crate::diagnostics::{
    b0, check_records, mass_bounds, record, select_y_params, CheckContext, DiagnosticsContext,
    DiagnosticsError, DiagnosticsRecord, Violation, YParams,
};
use crate::fluid::{momentum_dt_bound, momentum_step, FluidError, ForcingSpec, MomentumOptions};
use crate::grid::{make_domain, Domain, ScalarField, SimState, VectorField};
use crate::linsolve::SolverError;
use crate::operators::{
    divergence_faces_to_cells, helmholtz_no_slip, project_divergence_free, PoissonSolverConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("invalid parameters: {0}")]
    Config(String),
    #[error("positivity lost at t = {t}: min n = {min:e} < -{tol:e}")]
    PositivityLoss {
        t: f64,
        min: f64,
        tol: f64,
        /// State right after the failing step, for postmortem.
        state: Box<SimState>,
    },
    #[error("solver failure at t = {t}: {source}")]
    Solver { t: f64, source: SolverError },
    #[error("non-finite field value at t = {t}")]
    NonFinite { t: f64 },
}

impl DriverError {
    fn solver(t: f64, source: SolverError) -> Self {
        match source {
            SolverError::NonFinite => DriverError::NonFinite { t },
            source => DriverError::Solver { t, source },
        }
    }
}

/// Initial profile of a scalar field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScalarInit {
    Constant {
        value: f64,
    },
    /// `base + amplitude exp(-|x - centre|^2 / width^2)`.
    Bump {
        base: f64,
        amplitude: f64,
        width: f64,
    },
    /// `base + amplitude xi` with `xi` uniform in `[-1, 1]` per cell.
    Noise {
        base: f64,
        amplitude: f64,
    },
    /// `base + amplitude prod_a cos(modes[a] pi x_a / L_a)`.
    Cosine {
        base: f64,
        amplitude: f64,
        modes: Vec<u32>,
    },
}

impl ScalarInit {
    fn lower_bound(&self) -> f64 {
        match self {
            ScalarInit::Constant { value } => *value,
            ScalarInit::Bump {
                base, amplitude, ..
            } => base + amplitude.min(0.0),
            ScalarInit::Noise { base, amplitude }
            | ScalarInit::Cosine {
                base, amplitude, ..
            } => base - amplitude.abs(),
        }
    }

    fn validate(&self, key: &str, dim: usize) -> Result<(), String> {
        if let ScalarInit::Bump { width, .. } = self {
            if !(*width > 0.0) {
                return Err(format!("{key}.width: must be > 0, got {width}"));
            }
        }
        if let ScalarInit::Cosine { modes, .. } = self {
            if modes.len() != dim {
                return Err(format!(
                    "{key}.modes: need {dim} entries, got {}",
                    modes.len()
                ));
            }
        }
        let lb = self.lower_bound();
        if !(lb > 0.0 && lb.is_finite()) {
            return Err(format!(
                "{key}: initial data must be strictly positive, the lower bound is {lb}"
            ));
        }
        Ok(())
    }

    pub fn build(&self, d: Domain, rng: &mut ChaCha8Rng) -> ScalarField {
        match self {
            ScalarInit::Constant { value } => ScalarField::constant(d, *value),
            ScalarInit::Bump {
                base,
                amplitude,
                width,
            } => {
                let centre: Vec<f64> = d.lengths().iter().map(|l| 0.5 * l).collect();
                ScalarField::from_fn(d, |x| {
                    let r2: f64 = centre.iter().zip(x).map(|(c, x)| (x - c).powi(2)).sum();
                    base + amplitude * (-r2 / (width * width)).exp()
                })
            }
            ScalarInit::Noise { base, amplitude } => {
                let vals = (0..d.cell_count())
                    .map(|_| base + amplitude * rng.gen_range(-1.0..=1.0))
                    .collect();
                ScalarField::from_values(d, vals)
            }
            ScalarInit::Cosine {
                base,
                amplitude,
                modes,
            } => {
                let l = d.lengths().to_vec();
                ScalarField::from_fn(d, |x| {
                    let prod: f64 = (0..l.len())
                        .map(|a| (modes[a] as f64 * PI * x[a] / l[a]).cos())
                        .product();
                    base + amplitude * prod
                })
            }
        }
    }
}

/// Initial velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum VelocityInit {
    #[default]
    Zero,
    /// Smoothed random field, projected and scaled to `||u||_inf = amplitude`.
    Noise { amplitude: f64 },
    /// Single cell in the `(x_0, x_1)` plane from a nodal streamfunction,
    /// discretely divergence-free, scaled to `||u||_inf = amplitude`.
    Vortex { amplitude: f64 },
}

impl VelocityInit {
    pub fn build(
        &self,
        d: Domain,
        rng: &mut ChaCha8Rng,
        solver: &PoissonSolverConfig,
    ) -> Result<VectorField, SolverError> {
        let (raw, amp) = match self {
            VelocityInit::Zero => return Ok(VectorField::zeros(d)),
            VelocityInit::Noise { amplitude } => {
                let mut comps = Vec::with_capacity(d.dim());
                for a in 0..d.dim() {
                    let vals = (0..d.face_count(a))
                        .map(|_| rng.gen_range(-1.0..=1.0))
                        .collect();
                    comps.push(vals);
                }
                let white = VectorField::from_components(d, comps);
                let h = d.h_min();
                let smooth = helmholtz_no_slip(&white, 4.0 * h * h, solver)?;
                (project_divergence_free(&smooth, solver)?, *amplitude)
            }
            VelocityInit::Vortex { amplitude } => (vortex_field(d), *amplitude),
        };
        let m = raw.max_abs();
        Ok(if m > 0.0 { raw.scaled(amp / m) } else { raw })
    }
}

fn vortex_field(d: Domain) -> VectorField {
    let (l0, l1) = (d.lengths()[0], d.lengths()[1]);
    let (h0, h1) = (d.spacing()[0], d.spacing()[1]);
    let psi = |x0: f64, x1: f64| ((PI * x0 / l0).sin() * (PI * x1 / l1).sin()).powi(2);
    VectorField::from_fn(d, |a, x| match a {
        0 => (psi(x[0], x[1] + 0.5 * h1) - psi(x[0], x[1] - 0.5 * h1)) / h1,
        1 => -(psi(x[0] + 0.5 * h0, x[1]) - psi(x[0] - 0.5 * h0, x[1])) / h0,
        _ => 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSpec {
    pub n: ScalarInit,
    pub c: ScalarInit,
    pub u: VelocityInit,
}

impl Default for InitialSpec {
    fn default() -> Self {
        Self {
            n: ScalarInit::Constant { value: 1.0 },
            c: ScalarInit::Constant { value: 1.0 },
            u: VelocityInit::Zero,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeParams {
    pub t_end: f64,
    pub dt_max: f64,
    pub cfl_safety: f64,
    pub sample_every: f64,
}

impl Default for TimeParams {
    fn default() -> Self {
        Self {
            t_end: 1.0,
            dt_max: 1e-2,
            cfl_safety: 0.4,
            sample_every: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsParams {
    pub y_exponent: f64,
    /// Coefficient of the kinetic term in `F`.
    pub k: f64,
    /// Coefficient of `int c^2` in `G`; `None` means `2 B_0 + 1`.
    pub b: Option<f64>,
    pub lp_exponents: Vec<f64>,
    pub z_factor: f64,
    pub mass_slack: f64,
    pub burn_in: f64,
}

impl Default for DiagnosticsParams {
    fn default() -> Self {
        Self {
            y_exponent: 2.0,
            k: 1.0,
            b: None,
            lp_exponents: vec![2.0, 4.0],
            z_factor: 1.05,
            mass_slack: 0.5,
            burn_in: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Flags {
    pub implicit_diffusion: bool,
    pub buoyancy_demeaned: bool,
    /// Transport `c` with the velocity from the start of the step.
    pub c_uses_old_u: bool,
    /// Substep order as a permutation of `"ucn"`.
    pub ordering: String,
    /// Diagnostic switches for consistency tests.
    pub viscous: bool,
    pub reactions: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            implicit_diffusion: false,
            buoyancy_demeaned: false,
            c_uses_old_u: false,
            ordering: "ucn".into(),
            viscous: true,
            reactions: true,
        }
    }
}

fn default_domain() -> Domain {
    make_domain(2, &[1.0, 1.0], &[32, 32]).expect("valid default domain")
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub domain: Domain,
    pub reaction: ReactionParams,
    pub forcing: ForcingSpec,
    pub initial: InitialSpec,
    pub time: TimeParams,
    pub seed: u64,
    pub solver: PoissonSolverConfig,
    pub diagnostics: DiagnosticsParams,
    pub flags: Flags,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            domain: default_domain(),
            reaction: ReactionParams::default(),
            forcing: ForcingSpec::default(),
            initial: InitialSpec::default(),
            time: TimeParams::default(),
            seed: 0,
            solver: PoissonSolverConfig::default(),
            diagnostics: DiagnosticsParams::default(),
            flags: Flags::default(),
        }
    }
}

impl SimParams {
    /// Checks every parameter; messages start with the offending key.
    pub fn validate(&self) -> Result<(), String> {
        let dim = self.domain.dim();
        self.reaction.validate()?;
        self.forcing
            .validate(dim)
            .map_err(|e| format!("forcing: {e}"))?;
        self.initial.n.validate("initial.n", dim)?;
        self.initial.c.validate("initial.c", dim)?;
        if let VelocityInit::Noise { amplitude } | VelocityInit::Vortex { amplitude } =
            self.initial.u
        {
            if !(amplitude >= 0.0 && amplitude.is_finite()) {
                return Err(format!(
                    "initial.u.amplitude: must be >= 0, got {amplitude}"
                ));
            }
        }
        let t = &self.time;
        if !(t.t_end >= 0.0 && t.t_end.is_finite()) {
            return Err(format!("time.t_end: must be >= 0, got {}", t.t_end));
        }
        if !(t.dt_max > 0.0 && t.dt_max.is_finite()) {
            return Err(format!("time.dt_max: must be > 0, got {}", t.dt_max));
        }
        if !(t.cfl_safety > 0.0 && t.cfl_safety <= 1.0) {
            return Err(format!(
                "time.cfl_safety: must lie in (0, 1], got {}",
                t.cfl_safety
            ));
        }
        if !(t.sample_every > 0.0 && t.sample_every.is_finite()) {
            return Err(format!(
                "time.sample_every: must be > 0, got {}",
                t.sample_every
            ));
        }
        self.solver.validate().map_err(|e| format!("solver: {e}"))?;
        let dg = &self.diagnostics;
        if !(dg.y_exponent > 1.0) {
            return Err(format!(
                "diagnostics.y_exponent: must be > 1, got {}",
                dg.y_exponent
            ));
        }
        if !(dg.k > 0.0) {
            return Err(format!("diagnostics.k: must be > 0, got {}", dg.k));
        }
        let b_min = b0(self.reaction.chi, self.reaction.kappa, self.reaction.mu);
        if let Some(b) = dg.b {
            if !(b > b_min) {
                return Err(format!("diagnostics.b: must exceed B_0 = {b_min}, got {b}"));
            }
        }
        if dg
            .lp_exponents
            .iter()
            .any(|p| !(*p >= 1.0 && p.is_finite()))
        {
            return Err("diagnostics.lp_exponents: every exponent must be >= 1".into());
        }
        if !(dg.z_factor >= 1.0) || !(dg.mass_slack > 0.0 && dg.mass_slack <= 1.0) {
            return Err("diagnostics: need z_factor >= 1 and mass_slack in (0, 1]".into());
        }
        if !(dg.burn_in >= 0.0) {
            return Err(format!(
                "diagnostics.burn_in: must be >= 0, got {}",
                dg.burn_in
            ));
        }
        let mut ord: Vec<char> = self.flags.ordering.chars().collect();
        ord.sort_unstable();
        if ord != ['c', 'n', 'u'] {
            return Err(format!(
                "flags.ordering: must be a permutation of \"ucn\", got {:?}",
                self.flags.ordering
            ));
        }
        select_y_params(
            dg.y_exponent,
            self.reaction.chi,
            self.reaction.kappa,
            self.reaction.mu,
            self.domain.volume(),
        )
        .map_err(|e| format!("diagnostics.y_exponent: {e}"))?;
        Ok(())
    }

    pub fn y_params(&self) -> Result<YParams, DiagnosticsError> {
        let r = &self.reaction;
        let mut yp = select_y_params(
            self.diagnostics.y_exponent,
            r.chi,
            r.kappa,
            r.mu,
            self.domain.volume(),
        )?;
        if let Some(b) = self.diagnostics.b {
            yp.b = b;
        }
        yp.k = self.diagnostics.k;
        Ok(yp)
    }

    pub fn diagnostics_context(&self) -> Result<DiagnosticsContext, DiagnosticsError> {
        Ok(DiagnosticsContext {
            chi: self.reaction.chi,
            kappa: self.reaction.kappa,
            mu: self.reaction.mu,
            yp: self.y_params()?,
            lp_exponents: self.diagnostics.lp_exponents.clone(),
        })
    }

    /// Context for [`check_records`] given the initial state.
    pub fn check_context(&self, state0: &SimState) -> Result<CheckContext, DiagnosticsError> {
        let r = &self.reaction;
        let b = self.y_params()?.b;
        let (mass_low, mass_up) = mass_bounds(state0, r.kappa, r.mu, b);
        Ok(CheckContext {
            kappa: r.kappa,
            mu: r.mu,
            b,
            volume: self.domain.volume(),
            mass_low,
            mass_up,
            mass_slack: self.diagnostics.mass_slack,
            z_factor: self.diagnostics.z_factor,
            burn_in: self.diagnostics.burn_in,
        })
    }

    fn momentum_options(&self) -> MomentumOptions {
        MomentumOptions {
            viscous: self.flags.viscous,
            buoyancy_demeaned: self.flags.buoyancy_demeaned,
            solver: self.solver,
        }
    }

    fn scalar_options(&self, pos_tol: f64) -> ScalarStepOptions {
        ScalarStepOptions {
            implicit_diffusion: self.flags.implicit_diffusion,
            solver: self.solver,
            pos_tol,
            reactions: self.flags.reactions,
        }
    }
}

/// Builds `(n_0, c_0, u_0)` with independent random streams per field.
pub fn init_state(params: &SimParams) -> Result<SimState, DriverError> {
    params.validate().map_err(DriverError::Config)?;
    let d = params.domain;
    let rng = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(params.seed);
        r.set_stream(stream);
        r
    };
    let n = params.initial.n.build(d, &mut rng(1));
    let c = params.initial.c.build(d, &mut rng(2));
    let u = params
        .initial
        .u
        .build(d, &mut rng(3), &params.solver)
        .map_err(|e| DriverError::solver(0.0, e))?;
    Ok(SimState {
        n,
        c,
        u,
        p: ScalarField::zeros(d),
        t: 0.0,
        eps: params.reaction.eps,
    })
}

/// Step size from the advective and (explicit) diffusive limits, capped by
/// `dt_max`.
pub fn cfl_dt(state: &SimState, params: &SimParams) -> f64 {
    let bound = transport_dt_bound(state, params.reaction.chi, params.flags.implicit_diffusion)
        .min(momentum_dt_bound(&state.u));
    (params.time.cfl_safety * bound).min(params.time.dt_max)
}

/// One full step with its bookkeeping.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub state: SimState,
    pub violations: Vec<Violation>,
    pub mass_residual: f64,
}

/// Advances by `dt` in the configured substep order, then re-checks the
/// per-step invariants. Positivity loss and solver failures abort; other
/// failed checks are returned as violations.
pub fn advance(
    state: &SimState,
    params: &SimParams,
    dt: f64,
    pos_tol: f64,
) -> Result<StepReport, DriverError> {
    let t0 = state.t;
    let sopts = params.scalar_options(pos_tol);
    let mut st = state.clone();
    let mut violations = Vec::new();
    let mut mass_residual = 0.0;
    let mut div_tol = f64::INFINITY;
    let t1 = t0 + dt;
    let step_err = |e: StepError| match e {
        StepError::Solver(s) => DriverError::solver(t0, s),
        other => DriverError::Config(other.to_string()),
    };
    for which in params.flags.ordering.chars() {
        match which {
            'u' => {
                let m = momentum_step(&st, dt, &params.forcing, &params.momentum_options())
                    .map_err(|e| match e {
                        FluidError::Solver(s) => DriverError::solver(t0, s),
                        other => DriverError::Config(other.to_string()),
                    })?;
                st.u = m.u;
                st.p = m.p;
                div_tol = m.div_tol;
            }
            'c' => {
                let old;
                let view = if params.flags.c_uses_old_u {
                    old = SimState {
                        u: state.u.clone(),
                        ..st.clone()
                    };
                    &old
                } else {
                    &st
                };
                let bound = transport_dt_bound(view, params.reaction.chi, sopts.implicit_diffusion);
                if dt > bound {
                    violations.push(Violation::new(
                        t1,
                        "cfl",
                        format!("c-step dt {dt:e} > {bound:e}"),
                    ));
                }
                let before = st.c.max();
                st.c = step_c_unchecked(view, dt, &sopts).map_err(step_err)?;
                let after = st.c.max();
                if after > before * (1.0 + 1e-12) {
                    violations.push(Violation::new(
                        t1,
                        "sup_c_step_monotone",
                        format!("max c rose from {before:.17e} to {after:.17e}"),
                    ));
                }
            }
            'n' => {
                let bound = transport_dt_bound(&st, params.reaction.chi, sopts.implicit_diffusion);
                if dt > bound {
                    violations.push(Violation::new(
                        t1,
                        "cfl",
                        format!("n-step dt {dt:e} > {bound:e}"),
                    ));
                }
                let out = step_n_unchecked(&st, dt, &params.reaction, &sopts).map_err(step_err)?;
                mass_residual = out.mass_residual;
                let scale = st.n.integral().abs();
                if out.mass_residual > 1e-10 * scale {
                    violations.push(Violation::new(
                        t1,
                        "mass_balance",
                        format!("residual {:e} vs mass {scale:e}", out.mass_residual),
                    ));
                }
                st.n = out.n;
            }
            _ => unreachable!("ordering validated"),
        }
    }
    st.t = t1;
    if !(st.n.is_finite() && st.c.is_finite() && st.u.is_finite() && st.p.is_finite()) {
        return Err(DriverError::NonFinite { t: t1 });
    }
    let min_n = st.n.min();
    if min_n < -pos_tol {
        return Err(DriverError::PositivityLoss {
            t: t1,
            min: min_n,
            tol: pos_tol,
            state: Box::new(st),
        });
    }
    let min_c = st.c.min();
    if min_c < 0.0 {
        violations.push(Violation::new(
            t1,
            "c_nonnegative",
            format!("min c = {min_c:e}"),
        ));
    }
    let div = divergence_faces_to_cells(&st.u).max_abs();
    if div > div_tol {
        violations.push(Violation::new(
            t1,
            "divergence",
            format!("{div:e} > {div_tol:e}"),
        ));
    }
    if !st.u.no_slip_exact() {
        violations.push(Violation::new(
            t1,
            "no_slip",
            "nonzero wall-normal velocity",
        ));
    }
    Ok(StepReport {
        state: st,
        violations,
        mass_residual,
    })
}

const MAX_STEP_HALVINGS: usize = 20;

/// Outcome of a completed run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_state: SimState,
    pub records: Vec<DiagnosticsRecord>,
    pub violations: Vec<Violation>,
    pub wall_time: Duration,
    pub steps: u64,
    pub max_mass_residual: f64,
    /// `sum dt int n c` over consecutive unit windows `[k, k+1)`.
    pub nc_windows: Vec<f64>,
}

impl RunResult {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Driver bookkeeping that, together with the state, fully determines the
/// rest of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bookkeeping {
    pub steps: u64,
    pub next_sample: u64,
    pub anchor: Option<(f64, f64)>,
    pub pos_tol: f64,
    pub max_mass_residual: f64,
    pub window_index: u64,
    pub window_acc: f64,
    pub nc_windows: Vec<f64>,
    pub step_violations: Vec<Violation>,
    /// Initial-data constants for the record checks.
    pub mass_low: f64,
    pub mass_up: f64,
}

/// A resumable run.
pub struct Runner {
    params: SimParams,
    state: SimState,
    book: Bookkeeping,
    records: Vec<DiagnosticsRecord>,
    ctx: DiagnosticsContext,
    started: Instant,
}

impl Runner {
    pub fn new(params: SimParams) -> Result<Self, DriverError> {
        let state = init_state(&params)?;
        let ctx = params
            .diagnostics_context()
            .map_err(|e| DriverError::Config(e.to_string()))?;
        let check = params
            .check_context(&state)
            .map_err(|e| DriverError::Config(e.to_string()))?;
        let book = Bookkeeping {
            steps: 0,
            next_sample: 0,
            anchor: None,
            pos_tol: params.reaction.resolved_pos_tol(&state.n),
            max_mass_residual: 0.0,
            window_index: 0,
            window_acc: 0.0,
            nc_windows: Vec::new(),
            step_violations: Vec::new(),
            mass_low: check.mass_low,
            mass_up: check.mass_up,
        };
        let mut r = Self {
            params,
            state,
            book,
            records: Vec::new(),
            ctx,
            started: Instant::now(),
        };
        r.sample();
        Ok(r)
    }

    /// Rebuilds a runner from checkpointed pieces.
    pub fn from_parts(
        params: SimParams,
        state: SimState,
        book: Bookkeeping,
        records: Vec<DiagnosticsRecord>,
    ) -> Result<Self, DriverError> {
        params.validate().map_err(DriverError::Config)?;
        if *state.domain() != params.domain {
            return Err(DriverError::Config(
                "checkpoint grid differs from its parameters".into(),
            ));
        }
        let ctx = params
            .diagnostics_context()
            .map_err(|e| DriverError::Config(e.to_string()))?;
        Ok(Self {
            params,
            state,
            book,
            records,
            ctx,
            started: Instant::now(),
        })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn bookkeeping(&self) -> &Bookkeeping {
        &self.book
    }

    pub fn records(&self) -> &[DiagnosticsRecord] {
        &self.records
    }

    pub fn is_finished(&self) -> bool {
        self.state.t >= self.params.time.t_end
    }

    fn sample_time(&self, k: u64) -> f64 {
        (k as f64 * self.params.time.sample_every).min(self.params.time.t_end)
    }

    fn sample(&mut self) {
        let mut rec = record(&self.state, &self.ctx, self.book.anchor);
        if self.book.anchor.is_none() {
            if let Some(y) = rec.y_p {
                if y > 0.0 {
                    self.book.anchor = Some((rec.t, y));
                    rec.z_p = Some(y);
                }
            }
        }
        self.records.push(rec);
        self.book.next_sample += 1;
    }

    /// Advances to the next sample time (or `t_end`) and records it.
    pub fn step_to_next_sample(&mut self) -> Result<(), DriverError> {
        if self.is_finished() {
            return Ok(());
        }
        let target = self.sample_time(self.book.next_sample);
        while self.state.t < target {
            let remaining = target - self.state.t;
            let dt_cfl = cfl_dt(&self.state, &self.params);
            let mut dt = dt_cfl.min(remaining);
            if remaining > dt && remaining - dt < 0.25 * dt_cfl {
                // avoid a sliver step right before the sample
                dt = 0.5 * remaining;
            }
            let start = self.state.clone();
            let mut report = advance(&start, &self.params, dt, self.book.pos_tol)?;
            // the bound is taken from the step's start; if the substeps
            // steepen the fields past it, retry with a smaller step
            let mut retries = 0;
            while retries < MAX_STEP_HALVINGS
                && report.violations.iter().any(|v| v.invariant == "cfl")
            {
                dt *= 0.5;
                report = advance(&start, &self.params, dt, self.book.pos_tol)?;
                retries += 1;
            }
            let nc: f64 = start
                .n
                .values()
                .iter()
                .zip(start.c.values())
                .map(|(n, c)| n * c)
                .sum::<f64>()
                * start.domain().cell_volume();
            let window = (start.t + 0.5 * dt).floor().max(0.0) as u64;
            while window > self.book.window_index {
                self.book.nc_windows.push(self.book.window_acc);
                self.book.window_acc = 0.0;
                self.book.window_index += 1;
            }
            self.book.window_acc += dt * nc;
            self.state = report.state;
            if dt == remaining {
                self.state.t = target;
            }
            self.book.steps += 1;
            self.book.max_mass_residual = self.book.max_mass_residual.max(report.mass_residual);
            self.book.step_violations.extend(report.violations);
        }
        self.sample();
        Ok(())
    }

    /// Runs to `t_end` and evaluates every check.
    pub fn finish(mut self) -> Result<RunResult, DriverError> {
        while !self.is_finished() {
            self.step_to_next_sample()?;
        }
        Ok(self.into_result())
    }

    /// Evaluates every check on what has been simulated so far.
    pub fn into_result(self) -> RunResult {
        let mut violations = self.book.step_violations.clone();
        let check = CheckContext {
            kappa: self.params.reaction.kappa,
            mu: self.params.reaction.mu,
            b: self.ctx.yp.b,
            volume: self.params.domain.volume(),
            mass_low: self.book.mass_low,
            mass_up: self.book.mass_up,
            mass_slack: self.params.diagnostics.mass_slack,
            z_factor: self.params.diagnostics.z_factor,
            burn_in: self.params.diagnostics.burn_in,
        };
        violations.extend(check_records(&self.records, Some(&check)));
        let nc = &self.book.nc_windows;
        for (k, w) in nc.windows(2).enumerate() {
            if (k as f64) < self.params.diagnostics.burn_in {
                continue;
            }
            if w[1] > w[0] * (1.0 + 1e-12) {
                violations.push(Violation::new(
                    (k + 1) as f64,
                    "nc_window_decreasing",
                    format!("window integral rose from {:e} to {:e}", w[0], w[1]),
                ));
            }
        }
        RunResult {
            final_state: self.state,
            records: self.records,
            violations,
            wall_time: self.started.elapsed(),
            steps: self.book.steps,
            max_mass_residual: self.book.max_mass_residual,
            nc_windows: self.book.nc_windows,
        }
    }
}

/// Full orchestration: initial data, time loop with diagnostics at the
/// sample cadence, final checks.
pub fn run(params: &SimParams) -> Result<RunResult, DriverError> {
    Runner::new(params.clone())?.finish()
}

// 15-point Gauss-Kronrod rule on [-1, 1]; the odd entries of XGK are the
// embedded 7-point Gauss nodes.
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let x = h * XGK[i];
        let s = f(c - x) + f(c + x);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss-Kronrod quadrature to relative tolerance `rel_tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    let mut parts = vec![(a, b, gk15(&f, a, b))];
    for _ in 0..10_000 {
        let total: f64 = parts.iter().map(|p| p.2 .0).sum();
        let err: f64 = parts.iter().map(|p| p.2 .1).sum();
        if err <= rel_tol * total.abs() || err < 1e-300 {
            break;
        }
        let (i, _) = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.total_cmp(&y.1 .2 .1))
            .expect("nonempty");
        let (lo, hi, _) = parts.swap_remove(i);
        let mid = 0.5 * (lo + hi);
        parts.push((lo, mid, gk15(&f, lo, mid)));
        parts.push((mid, hi, gk15(&f, mid, hi)));
    }
    parts.iter().map(|p| p.2 .0).sum()
}

/// Exact solution of the spatially uniform reduction with `u = 0`:
/// logistic `n`, and `c = c0 exp(-int_0^t ln(1 + eps n)/eps ds)`.
pub fn homogeneous_oracle(
    n0: f64,
    c0: f64,
    eps: f64,
    t: f64,
    kappa: f64,
    mu: f64,
) -> Result<(f64, f64), DriverError> {
    if !(n0 > 0.0 && c0 > 0.0 && eps > 0.0 && mu > 0.0 && kappa >= 0.0 && t >= 0.0) {
        return Err(DriverError::Config(format!(
            "oracle needs n0, c0, eps, mu > 0 and kappa, t >= 0; got n0={n0}, c0={c0}, eps={eps}, mu={mu}, kappa={kappa}, t={t}"
        )));
    }
    let n = |s: f64| logistic_substep(n0, kappa, mu, s);
    let rate = |s: f64| crate::chemotaxis::consumption_unchecked(n(s), eps);
    let consumed = if t > 0.0 {
        integrate(rate, 0.0, t, 1e-12)
    } else {
        0.0
    };
    Ok((n(t), c0 * (-consumed).exp()))
}

/// Final states per epsilon and the successive distances between them.
#[derive(Debug, Clone)]
pub struct EpsStudy {
    pub eps: Vec<f64>,
    pub results: Vec<RunResult>,
    /// `[d_n, d_c, d_u]` between runs `j` and `j + 1`.
    pub distances: Vec<[f64; 3]>,
}

impl EpsStudy {
    /// Whether each field's distance sequence strictly decreases.
    pub fn strictly_decreasing(&self) -> [bool; 3] {
        let mut out = [true; 3];
        for w in self.distances.windows(2) {
            for f in 0..3 {
                out[f] &= w[1][f] < w[0][f];
            }
        }
        out
    }
}

/// Runs the scenario once per epsilon (in parallel) and tabulates the
/// L2 distances between consecutive final states.
pub fn epsilon_study(params: &SimParams, eps_list: &[f64]) -> Result<EpsStudy, DriverError> {
    if eps_list.len() < 3 {
        return Err(DriverError::Config(
            "eps_list needs at least 3 entries".into(),
        ));
    }
    if eps_list.windows(2).any(|w| !(w[1] <= w[0])) {
        return Err(DriverError::Config("eps_list must be nonincreasing".into()));
    }
    let results = eps_list
        .par_iter()
        .map(|&eps| {
            let mut p = params.clone();
            p.reaction.eps = eps;
            run(&p)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let distances = results
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0].final_state, &w[1].final_state);
            [
                a.n.l2_distance(&b.n),
                a.c.l2_distance(&b.c),
                a.u.l2_distance(&b.u),
            ]
        })
        .collect();
    Ok(EpsStudy {
        eps: eps_list.to_vec(),
        results,
        distances,
    })
}

//! Monitored functionals and norms, one [`DiagnosticsRecord`] per sample,
//! plus the offline checks that re-assert the expected structure over a
//! record sequence.

use crate::grid::{ScalarField, SimState};
use crate::operators::{dirichlet_form, gradient_cells_to_faces, gradient_energy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("no theta = 2^-k (k <= {max_k}) satisfies the feasibility condition for p = {p}")]
    InfeasibleParams { p: f64, max_k: u32 },
    #[error("density minimum {min:e} is not positive")]
    NonpositiveDensity { min: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Constants of the weighted `L^p` functional `y = int n^p / (eta - c)^theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YParams {
    pub p: f64,
    pub theta: f64,
    pub eta: f64,
    /// Coefficient of `int c^2` in `G`.
    pub b: f64,
    /// Coefficient of `int |u|^2` in `F`.
    pub k: f64,
    pub k1: f64,
}

const MAX_THETA_EXPONENT: u32 = 60;

/// `B_0 = kappa chi^2 / (2 mu)`.
pub fn b0(chi: f64, kappa: f64, mu: f64) -> f64 {
    kappa * chi * chi / (2.0 * mu)
}

/// Strict form of the `(theta, eta)` feasibility inequality
/// `(2 p theta + chi p (p-1) eta)^2 < 4 p (p-1) theta (1 + theta - chi p eta)`.
pub fn y_feasible(p: f64, chi: f64, theta: f64, eta: f64) -> bool {
    let lhs = (2.0 * p * theta + chi * p * (p - 1.0) * eta).powi(2);
    let rhs = 4.0 * p * (p - 1.0) * theta * (1.0 + theta - chi * p * eta);
    lhs < rhs
}

/// Deterministic choice of the `y` constants: the largest `theta = 2^-k`
/// passing the sufficient condition, then `eta = min{1, theta, 1/(2 p chi)} / 2`
/// (or `1/2` without chemotaxis), `B = 2 B_0 + 1` and `K = 1`.
pub fn select_y_params(
    p: f64,
    chi: f64,
    kappa: f64,
    mu: f64,
    volume: f64,
) -> Result<YParams, DiagnosticsError> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(DiagnosticsError::InvalidArgument(format!(
            "p must be > 1, got {p}"
        )));
    }
    if !(mu > 0.0) || !(volume > 0.0) || !(chi >= 0.0) || !(kappa >= 0.0) {
        return Err(DiagnosticsError::InvalidArgument(format!(
            "need chi, kappa >= 0 and mu, volume > 0; got chi={chi}, kappa={kappa}, mu={mu}, volume={volume}"
        )));
    }
    let sufficient = |t: f64| {
        let a = 4.0 * p * p * t;
        a + a * chi * (p - 1.0) + chi * chi * p * p * (p - 1.0) * (p - 1.0) * t
            < 2.0 * p * (p - 1.0)
    };
    let theta = (0..=MAX_THETA_EXPONENT)
        .map(|k| 0.5f64.powi(k as i32))
        .find(|&t| sufficient(t))
        .ok_or(DiagnosticsError::InfeasibleParams {
            p,
            max_k: MAX_THETA_EXPONENT,
        })?;
    let eta = if chi == 0.0 {
        0.5
    } else {
        0.5 * 1f64.min(theta).min(1.0 / (2.0 * p * chi))
    };
    if !y_feasible(p, chi, theta, eta) {
        return Err(DiagnosticsError::InfeasibleParams {
            p,
            max_k: MAX_THETA_EXPONENT,
        });
    }
    let k1 = p * mu * (eta.powf(theta) / (2f64.powf(theta) * volume)).powf(1.0 / p);
    Ok(YParams {
        p,
        theta,
        eta,
        b: 2.0 * b0(chi, kappa, mu) + 1.0,
        k: 1.0,
        k1,
    })
}

/// Bit flags telling which floors were active while evaluating `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClampFlags(pub u8);

impl ClampFlags {
    pub const N_FLOOR: u8 = 1;
    pub const C_FLOOR: u8 = 2;

    pub fn any(self) -> bool {
        self.0 != 0
    }
}

/// Floors used inside `F` only; the state itself is never modified.
pub fn default_floors(state: &SimState) -> (f64, f64) {
    (
        1e-14 * state.n.max_abs().max(1.0),
        1e-14 * state.c.max_abs().max(1.0),
    )
}

/// Cell-averaged `|grad f|^2` from the face differences.
pub fn cell_gradient_sq(f: &ScalarField) -> Vec<f64> {
    let d = *f.domain();
    let g = gradient_cells_to_faces(f);
    let cs = d.cell_shape();
    let mut out = vec![0.0; d.cell_count()];
    for a in 0..d.dim() {
        let fs = d.face_shape(a);
        let comp = g.component(a);
        for i in 0..cs[0] {
            for j in 0..cs[1] {
                for k in 0..cs[2] {
                    let lo = (i * fs[1] + j) * fs[2] + k;
                    let step = [fs[1] * fs[2], fs[2], 1][a];
                    let hi = lo + step;
                    out[(i * cs[1] + j) * cs[2] + k] += 0.5 * (comp[lo].powi(2) + comp[hi].powi(2));
                }
            }
        }
    }
    out
}

/// Quasi-energy `int n ln n + chi/2 int |grad c|^2 / c + K chi int |u|^2`.
pub fn functional_f(state: &SimState, k: f64, chi: f64, floors: (f64, f64)) -> (f64, ClampFlags) {
    let d = state.domain();
    let mut flags = 0u8;
    let mut ent = 0.0;
    for &v in state.n.values() {
        let s = if v < floors.0 {
            flags |= ClampFlags::N_FLOOR;
            floors.0
        } else {
            v
        };
        ent += s * s.ln();
    }
    let mut fisher = 0.0;
    for (g2, &cv) in cell_gradient_sq(&state.c).iter().zip(state.c.values()) {
        let s = if cv < floors.1 {
            flags |= ClampFlags::C_FLOOR;
            floors.1
        } else {
            cv
        };
        fisher += g2 / s;
    }
    let vol = d.cell_volume();
    let f = ent * vol + 0.5 * chi * fisher * vol + k * chi * 2.0 * state.u.kinetic_energy();
    (f, ClampFlags(flags))
}

/// `G = int n - (kappa/mu) int ln(mu n / kappa) + (B/2) int c^2`; the log
/// term is dropped when `kappa = 0`.
pub fn functional_g(
    state: &SimState,
    kappa: f64,
    mu: f64,
    b: f64,
) -> Result<f64, DiagnosticsError> {
    let vol = state.domain().cell_volume();
    let mut acc = 0.0;
    if kappa > 0.0 {
        let min = state.n.min();
        if !(min > 0.0) {
            return Err(DiagnosticsError::NonpositiveDensity { min });
        }
        let r = kappa / mu;
        for &v in state.n.values() {
            acc += v - r * (v / r).ln();
        }
    } else {
        acc = state.n.sum();
    }
    let c2: f64 = state.c.values().iter().map(|v| v * v).sum();
    Ok((acc + 0.5 * b * c2) * vol)
}

/// `int n^p / (eta - c)^theta`, or `None` outside the regime `||c||_inf <= eta/2`.
pub fn functional_y(state: &SimState, yp: &YParams) -> Option<f64> {
    if state.c.max_abs() > 0.5 * yp.eta {
        return None;
    }
    let s: f64 = state
        .n
        .values()
        .iter()
        .zip(state.c.values())
        .map(|(n, c)| n.abs().powf(yp.p) / (yp.eta - c).powf(yp.theta))
        .sum();
    Some(s * state.domain().cell_volume())
}

/// Closed-form solution of `z' = kappa p z - k1 z^{1 + 1/p}`, `z(T) = yT`.
pub fn comparison_z(
    t: f64,
    t0: f64,
    y_t0: f64,
    yp: &YParams,
    kappa: f64,
) -> Result<f64, DiagnosticsError> {
    if t < t0 {
        return Err(DiagnosticsError::InvalidArgument(format!(
            "t = {t} precedes T = {t0}"
        )));
    }
    if !(y_t0 > 0.0) {
        return Err(DiagnosticsError::InvalidArgument(format!(
            "y(T) must be > 0, got {y_t0}"
        )));
    }
    let p = yp.p;
    let s = t - t0;
    let base = if kappa > 0.0 {
        let a = yp.k1 / (kappa * p);
        (y_t0.powf(-1.0 / p) - a) * (-kappa * s).exp() + a
    } else {
        y_t0.powf(-1.0 / p) + yp.k1 * s / p
    };
    Ok(base.powf(-p))
}

/// Upper envelope of `z` for infinite initial data.
pub fn comparison_z_infinite(t: f64, t0: f64, yp: &YParams, kappa: f64) -> f64 {
    let a = yp.k1 / (kappa * yp.p);
    (a * (-(-kappa * (t - t0)).exp_m1())).powf(-yp.p)
}

/// Everything besides the state that a record needs.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsContext {
    pub chi: f64,
    pub kappa: f64,
    pub mu: f64,
    pub yp: YParams,
    pub lp_exponents: Vec<f64>,
}

/// One sample of every monitored quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub mass_n: f64,
    pub min_n: f64,
    pub max_n: f64,
    pub sup_c: f64,
    pub int_c: f64,
    pub grad_c_sq: f64,
    pub kinetic: f64,
    pub enstrophy_like: f64,
    pub f_energy: f64,
    /// `None` when `G` is undefined (nonpositive density).
    pub g_energy: Option<f64>,
    /// `None` outside the `||c||_inf <= eta/2` regime.
    pub y_p: Option<f64>,
    /// `None` before the comparison anchor exists.
    pub z_p: Option<f64>,
    pub clamp: ClampFlags,
    pub lp_norms_n: Vec<f64>,
    pub lp_norms_u: Vec<f64>,
}

/// Assembles a record. `anchor = (T*, y(T*))` enables `z_p`.
pub fn record(
    state: &SimState,
    ctx: &DiagnosticsContext,
    anchor: Option<(f64, f64)>,
) -> DiagnosticsRecord {
    let (f_energy, clamp) = functional_f(state, ctx.yp.k, ctx.chi, default_floors(state));
    DiagnosticsRecord {
        t: state.t,
        mass_n: state.n.integral(),
        min_n: state.n.min(),
        max_n: state.n.max(),
        sup_c: state.c.max_abs(),
        int_c: state.c.integral(),
        grad_c_sq: gradient_energy(&state.c),
        kinetic: state.u.kinetic_energy(),
        enstrophy_like: dirichlet_form(&state.u),
        f_energy,
        g_energy: functional_g(state, ctx.kappa, ctx.mu, ctx.yp.b).ok(),
        y_p: functional_y(state, &ctx.yp),
        z_p: anchor.and_then(|(t0, y0)| comparison_z(state.t, t0, y0, &ctx.yp, ctx.kappa).ok()),
        clamp,
        lp_norms_n: ctx
            .lp_exponents
            .iter()
            .map(|&p| state.n.lp_norm(p))
            .collect(),
        lp_norms_u: ctx
            .lp_exponents
            .iter()
            .map(|&p| state.u.lp_norm(p))
            .collect(),
    }
}

/// A failed invariant with the sample time that exposed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub t: f64,
    pub invariant: String,
    pub detail: String,
}

impl Violation {
    pub fn new(t: f64, invariant: &str, detail: impl Into<String>) -> Self {
        Self {
            t,
            invariant: invariant.to_string(),
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "t = {:.6}: {}: {}", self.t, self.invariant, self.detail)
    }
}

/// Model constants needed by the parameter-dependent record checks.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckContext {
    pub kappa: f64,
    pub mu: f64,
    pub b: f64,
    pub volume: f64,
    /// Lower Jensen bound on the mass (before slack).
    pub mass_low: f64,
    pub mass_up: f64,
    pub mass_slack: f64,
    pub z_factor: f64,
    pub burn_in: f64,
}

/// Mass envelope `(low, up)` from the initial data: `up` is the logistic
/// comparison cap, `low = V (kappa/mu) exp(-mu G_0 / (kappa V))` from
/// Jensen's inequality and the decay of `G`.
pub fn mass_bounds(state0: &SimState, kappa: f64, mu: f64, b: f64) -> (f64, f64) {
    let v = state0.domain().volume();
    let m0 = state0.n.integral();
    let up = m0.max(kappa * v / mu * 1.1);
    let low = if kappa > 0.0 {
        match functional_g(state0, kappa, mu, b) {
            Ok(g0) => v * kappa / mu * (-mu * g0 / (kappa * v)).exp(),
            Err(_) => 0.0,
        }
    } else {
        0.0
    };
    (low, up)
}

/// Upper bound on the dissipation rate of `G` at one sample, built from
/// CSV columns only so the check can run offline.
fn dissipation_scale(r: &DiagnosticsRecord, ctx: &CheckContext) -> f64 {
    let eq = if ctx.mu > 0.0 {
        ctx.kappa / ctx.mu
    } else {
        0.0
    };
    let dev = (r.max_n - eq).abs().max((r.min_n - eq).abs());
    ctx.mu * ctx.volume * dev * dev + ctx.b * r.grad_c_sq
}

/// Re-asserts the record-level invariants. Checks needing model constants
/// run only when `ctx` is given.
pub fn check_records(records: &[DiagnosticsRecord], ctx: Option<&CheckContext>) -> Vec<Violation> {
    let mut out = Vec::new();
    let Some(first) = records.first() else {
        return out;
    };
    let c_slack = 1e-12 * first.sup_c.max(f64::MIN_POSITIVE);
    let ic_slack = 1e-12 * first.int_c.abs();
    let pos_tol = 1e-12 * first.max_n.abs().max(1.0);
    let z_factor = ctx.map_or(1.05, |c| c.z_factor);
    for r in records {
        let mut vals = vec![
            r.t,
            r.mass_n,
            r.min_n,
            r.max_n,
            r.sup_c,
            r.int_c,
            r.grad_c_sq,
            r.kinetic,
            r.enstrophy_like,
            r.f_energy,
        ];
        vals.extend(r.g_energy);
        vals.extend(r.y_p);
        vals.extend(r.z_p);
        vals.extend(&r.lp_norms_n);
        vals.extend(&r.lp_norms_u);
        if vals.iter().any(|v| !v.is_finite()) {
            out.push(Violation::new(
                r.t,
                "finite",
                "record has a non-finite entry",
            ));
        }
        if r.min_n < -pos_tol {
            out.push(Violation::new(
                r.t,
                "positivity",
                format!("min_n = {:e}", r.min_n),
            ));
        }
        if let (Some(y), Some(z)) = (r.y_p, r.z_p) {
            if y > z_factor * z {
                out.push(Violation::new(
                    r.t,
                    "y_le_z",
                    format!(
                        "y = {y:.12e} exceeds {z_factor} * z = {:.12e}",
                        z_factor * z
                    ),
                ));
            }
        }
    }
    for w in records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if !(b.t > a.t) {
            out.push(Violation::new(
                b.t,
                "time_increasing",
                format!("{} follows {}", b.t, a.t),
            ));
        }
        if b.sup_c > a.sup_c + c_slack {
            out.push(Violation::new(
                b.t,
                "sup_c_nonincreasing",
                format!("sup_c rose from {:.17e} to {:.17e}", a.sup_c, b.sup_c),
            ));
        }
        if b.int_c > a.int_c + ic_slack {
            out.push(Violation::new(
                b.t,
                "int_c_nonincreasing",
                format!("int_c rose from {:.17e} to {:.17e}", a.int_c, b.int_c),
            ));
        }
    }
    let Some(ctx) = ctx else {
        return out;
    };
    let floor = ctx.kappa / ctx.mu * ctx.volume;
    for r in records {
        if let Some(g) = r.g_energy {
            if r.min_n > 0.0 && g < floor * (1.0 - 1e-12) {
                out.push(Violation::new(
                    r.t,
                    "g_lower_bound",
                    format!("G = {g:e} < {floor:e}"),
                ));
            }
        }
        if r.mass_n < ctx.mass_slack * ctx.mass_low || r.mass_n > ctx.mass_up {
            out.push(Violation::new(
                r.t,
                "mass_bounds",
                format!(
                    "mass {:e} outside [{:e}, {:e}]",
                    r.mass_n,
                    ctx.mass_slack * ctx.mass_low,
                    ctx.mass_up
                ),
            ));
        }
    }
    for w in records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.t < ctx.burn_in {
            continue;
        }
        if let (Some(ga), Some(gb)) = (a.g_energy, b.g_energy) {
            let scale = dissipation_scale(a, ctx).max(dissipation_scale(b, ctx));
            let tol = 1e-8 * ga.abs() + 1e-3 * (b.t - a.t) * scale;
            if gb > ga + tol {
                out.push(Violation::new(
                    b.t,
                    "g_nonincreasing",
                    format!("G rose from {ga:.17e} to {gb:.17e} (tol {tol:e})"),
                ));
            }
        }
    }
    let burn_max = records
        .iter()
        .filter(|r| r.t <= ctx.burn_in)
        .map(|r| r.f_energy)
        .fold(f64::NEG_INFINITY, f64::max);
    if burn_max.is_finite() {
        let cap = burn_max + burn_max.abs();
        for r in records.iter().filter(|r| r.t > ctx.burn_in) {
            if r.f_energy > cap {
                out.push(Violation::new(
                    r.t,
                    "f_bounded",
                    format!(
                        "F = {:e} exceeds twice its burn-in maximum {burn_max:e}",
                        r.f_energy
                    ),
                ));
            }
        }
    }
    out
}

//! Bacteria and oxygen substeps: upwind transport, regularized chemotactic
//! flux, diffusion, then exact pointwise reaction (closed-form logistic for
//! `n`, exponential consumption for `c`).

use crate::grid::{strides, ScalarField, SimState, VectorField};
use crate::linsolve::SolverError;
use crate::operators::{
    advect_scalar_upwind_advective, divergence_faces_to_cells, gradient_cells_to_faces,
    helmholtz_neumann, laplacian_neumann, upwind_flux, PoissonSolverConfig,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("time step {dt:e} exceeds the stability bound {bound:e}")]
    CflViolation { dt: f64, bound: f64 },
    #[error("density dropped to {min:e}, below -pos_tol = {tol:e}")]
    PositivityLoss { min: f64, tol: f64 },
    #[error("oxygen maximum grew from {before:e} to {after:e}")]
    MonotonicityLoss { before: f64, after: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReactionParams {
    /// Chemotactic sensitivity, >= 0.
    pub chi: f64,
    /// Growth rate, >= 0.
    pub kappa: f64,
    /// Overcrowding coefficient, > 0.
    pub mu: f64,
    /// Regularization level, > 0.
    pub eps: f64,
    /// Absolute positivity slack. `None` means `1e-12 * max(1, ||n_0||_inf)`,
    /// resolved when the run starts.
    pub pos_tol: Option<f64>,
}

impl Default for ReactionParams {
    fn default() -> Self {
        Self {
            chi: 1.0,
            kappa: 1.0,
            mu: 1.0,
            eps: 1e-3,
            pos_tol: None,
        }
    }
}

impl ReactionParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(format!(
                "reaction.mu: the model needs mu > 0 (chi, kappa >= 0, mu > 0), got {}",
                self.mu
            ));
        }
        if !(self.chi >= 0.0 && self.chi.is_finite()) {
            return Err(format!("reaction.chi: must be >= 0, got {}", self.chi));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(format!("reaction.kappa: must be >= 0, got {}", self.kappa));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(format!("reaction.eps: must be > 0, got {}", self.eps));
        }
        if let Some(t) = self.pos_tol {
            if !(t > 0.0 && t.is_finite()) {
                return Err(format!("reaction.pos_tol: must be > 0, got {t}"));
            }
        }
        Ok(())
    }

    /// Absolute positivity slack for a run started from `n0`.
    pub fn resolved_pos_tol(&self, n0: &ScalarField) -> f64 {
        self.pos_tol
            .unwrap_or_else(|| 1e-12 * n0.max_abs().max(1.0))
    }

    /// Carrying capacity `kappa / mu`.
    pub fn equilibrium(&self) -> f64 {
        self.kappa / self.mu
    }
}

/// Options shared by the scalar substeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarStepOptions {
    pub implicit_diffusion: bool,
    pub solver: PoissonSolverConfig,
    /// Absolute positivity slack for `n`.
    pub pos_tol: f64,
    /// Diagnostic switch: `false` drops growth and consumption.
    pub reactions: bool,
}

/// Regularized consumption `ln(1 + eps n) / eps`.
pub fn consumption_rate(n: f64, eps: f64) -> Result<f64, StepError> {
    if !(n >= 0.0) {
        return Err(StepError::InvalidArgument(format!(
            "n must be >= 0, got {n}"
        )));
    }
    if !(eps > 0.0) {
        return Err(StepError::InvalidArgument(format!(
            "eps must be > 0, got {eps}"
        )));
    }
    Ok(consumption_unchecked(n, eps))
}

#[inline]
pub(crate) fn consumption_unchecked(n: f64, eps: f64) -> f64 {
    let x = eps * n;
    if x < 1e-8 {
        n - 0.5 * eps * n * n
    } else {
        x.ln_1p() / eps
    }
}

/// Saturating mobility `n / (1 + eps n)`, with negative roundoff treated as 0.
#[inline]
pub fn mobility(n: f64, eps: f64) -> f64 {
    let n = n.max(0.0);
    n / (1.0 + eps * n)
}

/// Chemotactic face flux `chi * m(n_up) * grad c` where the mobility is
/// taken from the cell the cells move out of (cells climb the gradient).
pub fn chemotactic_flux(n: &ScalarField, c: &ScalarField, chi: f64, eps: f64) -> VectorField {
    let d = *n.domain();
    let mut g = gradient_cells_to_faces(c);
    let cs = strides(d.cell_shape());
    let nv = n.values();
    for a in 0..d.dim() {
        let fs = d.face_shape(a);
        let comp = g.component_mut(a);
        for i in 0..fs[0] {
            for j in 0..fs[1] {
                for k in 0..fs[2] {
                    let m = [i, j, k][a];
                    let fidx = (i * fs[1] + j) * fs[2] + k;
                    if m == 0 || m == d.cells()[a] {
                        comp[fidx] = 0.0;
                        continue;
                    }
                    let right = i * cs[0] + j * cs[1] + k;
                    let left = right - cs[a];
                    let grad = comp[fidx];
                    let up = if grad > 0.0 { nv[left] } else { nv[right] };
                    comp[fidx] = chi * mobility(up, eps) * grad;
                }
            }
        }
    }
    g
}

/// Largest step for which the explicit parts of the scalar substeps are
/// monotone: the summed outflow fraction of every cell stays <= 1.
pub fn transport_dt_bound(state: &SimState, chi: f64, implicit_diffusion: bool) -> f64 {
    let d = state.domain();
    let dim = d.dim() as f64;
    let h = d.h_min();
    let speed = state.u.max_abs() + chi * gradient_cells_to_faces(&state.c).max_abs();
    let adv = h / (2.0 * dim * speed + 1e-30);
    if implicit_diffusion {
        adv
    } else {
        adv.min(h * h / (2.0 * dim))
    }
}

/// Exact solution of `n' = kappa n - mu n^2` after time `dt`.
#[inline]
pub fn logistic_substep(n: f64, kappa: f64, mu: f64, dt: f64) -> f64 {
    if kappa == 0.0 {
        n / (1.0 + mu * dt * n)
    } else {
        let growth = (kappa * dt).exp_m1();
        kappa * n * (growth + 1.0) / (kappa + mu * n * growth)
    }
}

/// Output of the bacteria substep with its mass bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct NStep {
    pub n: ScalarField,
    /// `int (L(n*) - n*)` over the exact logistic substep.
    pub reaction_mass: f64,
    /// `|Delta int n - reaction_mass|`, which is what the flux terms leave.
    pub mass_residual: f64,
}

pub(crate) fn step_n_unchecked(
    state: &SimState,
    dt: f64,
    params: &ReactionParams,
    opts: &ScalarStepOptions,
) -> Result<NStep, StepError> {
    let n = &state.n;
    let mut flux = chemotactic_flux(n, &state.c, params.chi, state.eps);
    flux.axpy(1.0, &upwind_flux(n, &state.u));
    let transport = divergence_faces_to_cells(&flux);
    let mut star = n.clone();
    star.axpy(-dt, &transport);
    if opts.implicit_diffusion {
        star = helmholtz_neumann(&star, dt, &opts.solver, opts.solver.rel_tol)?;
    } else {
        star.axpy(dt, &laplacian_neumann(n));
    }
    let vol = n.domain().cell_volume();
    let mut out = star.clone();
    let mut reaction = 0.0;
    if opts.reactions {
        for v in out.values_mut() {
            let before = *v;
            *v = logistic_substep(before, params.kappa, params.mu, dt);
            reaction += *v - before;
        }
    }
    let reaction_mass = reaction * vol;
    let mass_residual = ((out.sum() - n.sum()) * vol - reaction_mass).abs();
    Ok(NStep {
        n: out,
        reaction_mass,
        mass_residual,
    })
}

/// Advances the bacteria density by `dt`:
/// `n* = n + dt [Delta n - div(chemotactic flux) - div(u n)]`, then the
/// exact logistic substep.
pub fn step_n(
    state: &SimState,
    dt: f64,
    params: &ReactionParams,
    opts: &ScalarStepOptions,
) -> Result<NStep, StepError> {
    let bound = transport_dt_bound(state, params.chi, opts.implicit_diffusion);
    if dt > bound {
        return Err(StepError::CflViolation { dt, bound });
    }
    let out = step_n_unchecked(state, dt, params, opts)?;
    let min = out.n.min();
    if min < -opts.pos_tol {
        return Err(StepError::PositivityLoss {
            min,
            tol: opts.pos_tol,
        });
    }
    Ok(out)
}

/// Diffusion solves for `c` run tighter than the pressure solve so that
/// the discrete maximum principle is not spoiled by solver error.
const C_DIFFUSION_TOL: f64 = 1e-13;

pub(crate) fn step_c_unchecked(
    state: &SimState,
    dt: f64,
    opts: &ScalarStepOptions,
) -> Result<ScalarField, StepError> {
    let c = &state.c;
    let mut star = c.clone();
    star.axpy(-dt, &advect_scalar_upwind_advective(c, &state.u));
    if opts.implicit_diffusion {
        let tol = opts.solver.rel_tol.min(C_DIFFUSION_TOL);
        star = helmholtz_neumann(&star, dt, &opts.solver, tol)?;
    } else {
        star.axpy(dt, &laplacian_neumann(c));
    }
    if opts.reactions {
        for (cv, nv) in star.values_mut().iter_mut().zip(state.n.values()) {
            *cv *= (-dt * consumption_unchecked(nv.max(0.0), state.eps)).exp();
        }
    }
    Ok(star)
}

/// Advances the oxygen concentration by `dt`: upwind transport and
/// diffusion, then the exact decay `c <- c exp(-dt ln(1 + eps n)/eps)`.
pub fn step_c(
    state: &SimState,
    dt: f64,
    params: &ReactionParams,
    opts: &ScalarStepOptions,
) -> Result<ScalarField, StepError> {
    let bound = transport_dt_bound(state, params.chi, opts.implicit_diffusion);
    if dt > bound {
        return Err(StepError::CflViolation { dt, bound });
    }
    let out = step_c_unchecked(state, dt, opts)?;
    let before = state.c.max();
    let after = out.max();
    if after > before * (1.0 + 1e-12) {
        return Err(StepError::MonotonicityLoss { before, after });
    }
    Ok(out)
}

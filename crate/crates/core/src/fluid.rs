//! Incompressible momentum update on the staggered grid.
//!
//! One step is: Yosida-smooth the transporting velocity, explicit centered
//! conservative advection, implicit viscous solve, buoyancy and external
//! forcing, and a final projection whose potential gives the pressure.

use crate::grid::{strides, Domain, ScalarField, SimState, VectorField};
use crate::linsolve::SolverError;
use crate::operators::{
    dirichlet_form, div_tol, helmholtz_no_slip, project_with_potential, yosida_smooth,
    PoissonSolverConfig,
};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluidError {
    #[error("time step {dt:e} exceeds the advective bound {bound:e}")]
    CflViolation { dt: f64, bound: f64 },
    #[error("forcing: {0}")]
    BadForcing(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Gravitational potential acting through `n grad(Phi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Potential {
    #[default]
    Zero,
    /// `Phi(x) = g . x`, so `grad(Phi) = g` is constant.
    Linear { g: Vec<f64> },
}

/// Spatial profile of the external body force.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ForceProfile {
    /// `e_0 sin(2 pi x_1 / L_1)`.
    #[default]
    Shear,
    /// Single cellular mode with unit peak, tangential to every wall.
    Cellular,
}

/// External body force `f(x, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Force {
    #[default]
    Zero,
    /// `amplitude * profile(x) * exp(-lambda t)`.
    Exponential {
        amplitude: f64,
        lambda: f64,
        #[serde(default)]
        profile: ForceProfile,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ForcingSpec {
    pub phi: Potential,
    pub force: Force,
}

impl ForcingSpec {
    pub fn validate(&self, dim: usize) -> Result<(), FluidError> {
        if let Potential::Linear { g } = &self.phi {
            if g.len() != dim {
                return Err(FluidError::BadForcing(format!(
                    "phi.g has {} entries, domain has dimension {dim}",
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(FluidError::BadForcing("phi.g must be finite".into()));
            }
        }
        if let Force::Exponential {
            amplitude, lambda, ..
        } = self.force
        {
            if !amplitude.is_finite() || !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(FluidError::BadForcing(format!(
                    "force needs finite amplitude and lambda >= 0, got {amplitude}, {lambda}"
                )));
            }
        }
        Ok(())
    }

    /// `||grad Phi||_inf`.
    pub fn grad_phi_max(&self) -> f64 {
        match &self.phi {
            Potential::Zero => 0.0,
            Potential::Linear { g } => g.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        }
    }

    /// Decay rate of the external force, `None` for zero force.
    pub fn force_decay(&self) -> Option<(f64, f64)> {
        match self.force {
            Force::Zero => None,
            Force::Exponential {
                amplitude, lambda, ..
            } => Some((amplitude, lambda)),
        }
    }

    /// Sampled body force at time `t`, zero on wall faces.
    pub fn force_field(&self, d: &Domain, t: f64) -> VectorField {
        match self.force {
            Force::Zero => VectorField::zeros(*d),
            Force::Exponential {
                amplitude,
                lambda,
                profile,
            } => {
                let s = amplitude * (-lambda * t).exp();
                let l = d.lengths().to_vec();
                VectorField::from_fn(*d, |a, x| match profile {
                    ForceProfile::Shear => {
                        if a == 0 {
                            s * (2.0 * PI * x[1] / l[1]).sin()
                        } else {
                            0.0
                        }
                    }
                    ForceProfile::Cellular => {
                        // curl of a streamfunction in the (0, 1) plane
                        let (sx, sy) = ((PI * x[0] / l[0]).sin(), (PI * x[1] / l[1]).sin());
                        let (cx, cy) = ((PI * x[0] / l[0]).cos(), (PI * x[1] / l[1]).cos());
                        match a {
                            0 => s * sx * sx * 2.0 * sy * cy,
                            1 => -s * sy * sy * 2.0 * sx * cx,
                            _ => 0.0,
                        }
                    }
                })
            }
        }
    }

    /// Buoyancy `n grad(Phi)` on interior faces, `n` averaged to the face.
    /// With `demeaned`, the mean of `n` is removed first; the difference is
    /// a pure gradient and only changes the pressure.
    pub fn buoyancy(&self, n: &ScalarField, demeaned: bool) -> VectorField {
        let d = *n.domain();
        let g = match &self.phi {
            Potential::Zero => return VectorField::zeros(d),
            Potential::Linear { g } => g,
        };
        let shift = if demeaned { n.mean() } else { 0.0 };
        let cs = strides(d.cell_shape());
        let nv = n.values();
        let comps = (0..d.dim())
            .map(|a| {
                let fs = d.face_shape(a);
                let mut out = vec![0.0; fs[0] * fs[1] * fs[2]];
                for i in 0..fs[0] {
                    for j in 0..fs[1] {
                        for k in 0..fs[2] {
                            let m = [i, j, k][a];
                            if m == 0 || m == d.cells()[a] {
                                continue;
                            }
                            let right = i * cs[0] + j * cs[1] + k;
                            let left = right - cs[a];
                            out[(i * fs[1] + j) * fs[2] + k] =
                                g[a] * (0.5 * (nv[left] + nv[right]) - shift);
                        }
                    }
                }
                out
            })
            .collect();
        VectorField::from_components(d, comps)
    }
}

/// Switches for the momentum step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentumOptions {
    /// Diagnostic mode: drop the viscous term.
    pub viscous: bool,
    pub buoyancy_demeaned: bool,
    pub solver: PoissonSolverConfig,
}

impl Default for MomentumOptions {
    fn default() -> Self {
        Self {
            viscous: true,
            buoyancy_demeaned: false,
            solver: PoissonSolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumStep {
    pub u: VectorField,
    /// Mean-zero pressure.
    pub p: ScalarField,
    /// The Yosida-smoothed transporting velocity used for advection.
    pub w: VectorField,
    /// Divergence tolerance of the projection, scaled by its input.
    pub div_tol: f64,
}

/// Largest advective step `h / (2 dim ||u||_inf)`.
pub fn momentum_dt_bound(u: &VectorField) -> f64 {
    let d = u.domain();
    d.h_min() / (2.0 * d.dim() as f64 * u.max_abs() + 1e-30)
}

/// `div(w (x) u)` in conservative centered form, evaluated on interior
/// faces. For discretely divergence-free `w` this is skew:
/// `<u, A(w, u)> = 0` up to roundoff.
pub fn momentum_advection(w: &VectorField, u: &VectorField) -> VectorField {
    let d = *u.domain();
    let dim = d.dim();
    let n = d.cells();
    let h = d.spacing();
    let comps = (0..dim)
        .map(|a| {
            let fa = d.face_shape(a);
            let sa = strides(fa);
            let ua = u.component(a);
            let wa = w.component(a);
            let mut out = vec![0.0; fa[0] * fa[1] * fa[2]];
            for i in 0..fa[0] {
                for j in 0..fa[1] {
                    for k in 0..fa[2] {
                        let p = [i, j, k];
                        let m = p[a];
                        if m == 0 || m == n[a] {
                            continue;
                        }
                        let idx = i * sa[0] + j * sa[1] + k;
                        let mut acc = 0.0;
                        // normal direction: fluxes at the two adjacent cell centres
                        {
                            let s = sa[a];
                            let hi = 0.25 * (wa[idx] + wa[idx + s]) * (ua[idx] + ua[idx + s]);
                            let lo = 0.25 * (wa[idx - s] + wa[idx]) * (ua[idx - s] + ua[idx]);
                            acc += (hi - lo) / h[a];
                        }
                        for b in (0..dim).filter(|&b| b != a) {
                            let fb = d.face_shape(b);
                            let sb = strides(fb);
                            let wb = w.component(b);
                            let jb = p[b];
                            // w_b face index with axis a set to `ma` and axis b to `e`
                            let at = |ma: usize, e: usize| {
                                let mut q = p;
                                q[a] = ma;
                                q[b] = e;
                                q[0] * sb[0] + q[1] * sb[1] + q[2]
                            };
                            let edge_w = |e: usize| 0.5 * (wb[at(m - 1, e)] + wb[at(m, e)]);
                            let s = sa[b];
                            let hi = if jb + 1 == n[b] {
                                0.0
                            } else {
                                edge_w(jb + 1) * 0.5 * (ua[idx] + ua[idx + s])
                            };
                            let lo = if jb == 0 {
                                0.0
                            } else {
                                edge_w(jb) * 0.5 * (ua[idx - s] + ua[idx])
                            };
                            acc += (hi - lo) / h[b];
                        }
                        out[idx] = acc;
                    }
                }
            }
            out
        })
        .collect();
    VectorField::from_components(d, comps)
}

/// Advances the velocity by `dt` with density `n` driving buoyancy.
/// The state supplies `u`, `eps` and `t`; the force is sampled at `t`.
pub fn momentum_step(
    state: &SimState,
    dt: f64,
    forcing: &ForcingSpec,
    opts: &MomentumOptions,
) -> Result<MomentumStep, FluidError> {
    let bound = momentum_dt_bound(&state.u);
    if dt > bound {
        return Err(FluidError::CflViolation { dt, bound });
    }
    let d = *state.domain();
    let w = yosida_smooth(&state.u, state.eps, &opts.solver)?;
    let mut v = state.u.clone();
    v.axpy(-dt, &momentum_advection(&w, &state.u));
    if opts.viscous {
        v = helmholtz_no_slip(&v, dt, &opts.solver)?;
    }
    v.axpy(dt, &forcing.buoyancy(&state.n, opts.buoyancy_demeaned));
    v.axpy(dt, &forcing.force_field(&d, state.t));
    let (u, phi) = project_with_potential(&v, &opts.solver)?;
    Ok(MomentumStep {
        u,
        p: phi.scaled(-1.0 / dt),
        w,
        div_tol: div_tol(&v),
    })
}

/// Instantaneous power balance terms: `(-D(u), int n grad(Phi) . u, int f . u)`.
pub fn energy_rates(
    u: &VectorField,
    n: &ScalarField,
    t: f64,
    forcing: &ForcingSpec,
    demeaned: bool,
) -> (f64, f64, f64) {
    let d = u.domain();
    (
        -dirichlet_form(u),
        u.dot(&forcing.buoyancy(n, demeaned)),
        u.dot(&forcing.force_field(d, t)),
    )
}

/// `|dE/dt - (-D + int n grad(Phi).u + int f.u)|` over one step, with the
/// right-hand side averaged between the two end states.
pub fn kinetic_energy_balance(
    before: &SimState,
    after: &SimState,
    dt: f64,
    forcing: &ForcingSpec,
    demeaned: bool,
) -> f64 {
    let lhs = (after.u.kinetic_energy() - before.u.kinetic_energy()) / dt;
    let r0 = energy_rates(&before.u, &before.n, before.t, forcing, demeaned);
    let r1 = energy_rates(&after.u, &after.n, after.t, forcing, demeaned);
    let rhs = 0.5 * ((r0.0 + r0.1 + r0.2) + (r1.0 + r1.1 + r1.2));
    (lhs - rhs).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_domain;
    use crate::operators::{divergence_faces_to_cells, project_divergence_free};

    fn vortex(d: Domain, amp: f64) -> VectorField {
        let raw = VectorField::from_fn(d, |a, x| {
            let (sx, sy) = ((PI * x[0]).sin(), (PI * x[1]).sin());
            let (cx, cy) = ((PI * x[0]).cos(), (PI * x[1]).cos());
            match a {
                0 => amp * sx * sx * sy * cy,
                1 => -amp * sy * sy * sx * cx,
                _ => 0.0,
            }
        });
        project_divergence_free(&raw, &PoissonSolverConfig::default()).unwrap()
    }

    fn state(u: VectorField, n: ScalarField, eps: f64) -> SimState {
        let d = *u.domain();
        SimState {
            c: ScalarField::constant(d, 1.0),
            p: ScalarField::zeros(d),
            n,
            u,
            t: 0.0,
            eps,
        }
    }

    #[test]
    fn advection_is_skew_for_solenoidal_transport() {
        for (dim, cells) in [(2usize, vec![16usize, 12]), (3, vec![8, 6, 10])] {
            let d = make_domain(dim, &vec![1.0; dim], &cells).unwrap();
            let raw = VectorField::from_fn(d, |a, x| {
                (1.0 + a as f64) * (3.0 * x[0] + x[1]).sin() * (2.0 * x[2] + 1.0).cos()
            });
            let tight = PoissonSolverConfig {
                rel_tol: 1e-14,
                ..Default::default()
            };
            let w = project_divergence_free(&raw, &tight).unwrap();
            let u = VectorField::from_fn(d, |a, x| (x[0] * x[1] + a as f64).cos() + x[2]);
            let au = momentum_advection(&w, &u);
            let e = u.dot(&au);
            assert!(e.abs() < 1e-11 * au.l2_norm() * u.l2_norm(), "{dim}d: {e}");
        }
    }

    #[test]
    fn zero_velocity_without_forcing_stays_at_rest() {
        let d = make_domain(2, &[1.0, 1.0], &[16, 16]).unwrap();
        let s = state(VectorField::zeros(d), ScalarField::constant(d, 1.0), 1e-3);
        let out = momentum_step(
            &s,
            1e-2,
            &ForcingSpec::default(),
            &MomentumOptions::default(),
        )
        .unwrap();
        assert_eq!(out.u.max_abs(), 0.0);
        assert!(out.p.max_abs() < 1e-14);
    }

    #[test]
    fn uniform_density_buoyancy_is_absorbed_by_pressure() {
        let d = make_domain(2, &[1.0, 1.0], &[16, 16]).unwrap();
        let forcing = ForcingSpec {
            phi: Potential::Linear { g: vec![0.0, -1.0] },
            force: Force::Zero,
        };
        let s = state(VectorField::zeros(d), ScalarField::constant(d, 2.0), 1e-3);
        let out = momentum_step(&s, 1e-2, &forcing, &MomentumOptions::default()).unwrap();
        assert!(out.u.max_abs() < 1e-10, "{}", out.u.max_abs());
        // hydrostatic balance: grad P = -n grad(Phi) = (0, 2) except next to walls
        let p = out.p.values();
        let ny = 16;
        let dp = (p[5 * ny + 9] - p[5 * ny + 8]) * 16.0;
        assert!((dp - 2.0).abs() < 1e-6, "{dp}");
    }

    #[test]
    fn step_output_is_projected() {
        let d = make_domain(2, &[1.0, 1.0], &[16, 16]).unwrap();
        let forcing = ForcingSpec {
            phi: Potential::Linear { g: vec![0.3, -1.0] },
            force: Force::Exponential {
                amplitude: 0.5,
                lambda: 1.0,
                profile: ForceProfile::Shear,
            },
        };
        let n = ScalarField::from_fn(d, |x| 1.0 + 0.3 * (4.0 * x[0]).sin() * x[1]);
        let s = state(vortex(d, 1.0), n, 1e-3);
        let out = momentum_step(&s, 5e-3, &forcing, &MomentumOptions::default()).unwrap();
        let div = divergence_faces_to_cells(&out.u).max_abs();
        assert!(div <= div_tol(&out.u), "{div}");
        assert!(out.u.no_slip_exact());
        assert!(out.p.mean().abs() < 1e-12);
    }

    #[test]
    fn viscous_decay_energy_balance_is_first_order() {
        let d = make_domain(2, &[1.0, 1.0], &[32, 32]).unwrap();
        let u0 = vortex(d, 0.5);
        let forcing = ForcingSpec::default();
        let res = |dt: f64| {
            let s0 = state(u0.clone(), ScalarField::constant(d, 1.0), 1e-3);
            let out = momentum_step(&s0, dt, &forcing, &MomentumOptions::default()).unwrap();
            let mut s1 = s0.clone();
            s1.u = out.u;
            s1.t = dt;
            kinetic_energy_balance(&s0, &s1, dt, &forcing, false)
        };
        let r: Vec<f64> = [4e-3, 2e-3, 1e-3].iter().map(|&dt| res(dt)).collect();
        for w in r.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.6..2.4).contains(&ratio), "{r:?}");
        }
    }

    #[test]
    fn forcing_free_run_dissipation_matches_energy_drop() {
        let d = make_domain(2, &[1.0, 1.0], &[32, 32]).unwrap();
        let forcing = ForcingSpec::default();
        let mut s = state(vortex(d, 0.5), ScalarField::constant(d, 1.0), 1e-3);
        let e0 = s.u.kinetic_energy();
        let dt = 5e-4;
        let mut dissipated = 0.0;
        for _ in 0..200 {
            let before = dirichlet_form(&s.u);
            s.u = momentum_step(&s, dt, &forcing, &MomentumOptions::default())
                .unwrap()
                .u;
            s.t += dt;
            dissipated += 0.5 * dt * (before + dirichlet_form(&s.u));
        }
        let drop = e0 - s.u.kinetic_energy();
        assert!(drop > 0.0);
        assert!(
            (dissipated - drop).abs() < 0.05 * drop,
            "{dissipated} vs {drop}"
        );
    }

    #[test]
    fn inviscid_mode_nearly_conserves_energy() {
        let d = make_domain(2, &[1.0, 1.0], &[32, 32]).unwrap();
        let forcing = ForcingSpec::default();
        let opts = MomentumOptions {
            viscous: false,
            ..Default::default()
        };
        let mut s = state(vortex(d, 0.5), ScalarField::constant(d, 1.0), 1e-3);
        let e0 = s.u.kinetic_energy();
        for _ in 0..20 {
            s.u = momentum_step(&s, 1e-3, &forcing, &opts).unwrap().u;
        }
        let rel = (s.u.kinetic_energy() - e0).abs() / e0;
        assert!(rel < 1e-4, "{rel}");
    }

    #[test]
    fn cfl_and_forcing_validation() {
        let d = make_domain(2, &[1.0, 1.0], &[16, 16]).unwrap();
        let s = state(vortex(d, 10.0), ScalarField::constant(d, 1.0), 1e-3);
        assert!(matches!(
            momentum_step(
                &s,
                1.0,
                &ForcingSpec::default(),
                &MomentumOptions::default()
            ),
            Err(FluidError::CflViolation { .. })
        ));
        let bad = ForcingSpec {
            phi: Potential::Linear { g: vec![1.0] },
            force: Force::Zero,
        };
        assert!(bad.validate(2).is_err());
        let f = ForcingSpec {
            phi: Potential::Zero,
            force: Force::Exponential {
                amplitude: 2.0,
                lambda: 0.5,
                profile: ForceProfile::Shear,
            },
        };
        let ff = f.force_field(&d, 2.0);
        assert!(ff.no_slip_exact());
        assert!(ff.max_abs() <= 2.0 * (-1.0f64).exp() + 1e-15);
    }
}

//! Second-order finite-difference operators on the MAC grid.
//!
//! The Neumann Laplacian is literally `divergence(gradient(f))`, so the
//! composition identity holds bit for bit. Elliptic solves are direct by
//! default (separation of variables), with matrix-free CG as a fallback.

use crate::grid::{strides, ScalarField, VectorField};
use crate::linsolve::{
    pcg, residual_norm, Layout, Multigrid, ShiftedLaplacian, SolverError, Spectral,
};
use serde::{Deserialize, Serialize};

/// Method used for the elliptic solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    /// Direct solve in the separable eigenbasis, refined by
    /// multigrid-preconditioned CG if the residual test still fails.
    Spectral,
    /// Plain conjugate gradients.
    Cg,
    /// Conjugate gradients preconditioned by a geometric multigrid V-cycle
    /// (cell-centered problems only; face problems fall back to plain CG).
    MgCg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoissonSolverConfig {
    /// Stopping test `||r||_inf <= rel_tol * ||rhs||_inf`.
    pub rel_tol: f64,
    pub max_iter: usize,
    pub method: SolverMethod,
}

impl Default for PoissonSolverConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_iter: 5000,
            method: SolverMethod::Spectral,
        }
    }
}

impl PoissonSolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rel_tol > 0.0 && self.rel_tol <= 1e-4) {
            return Err(format!(
                "rel_tol must lie in (0, 1e-4], got {}",
                self.rel_tol
            ));
        }
        if self.max_iter < 1 {
            return Err("max_iter must be at least 1".into());
        }
        Ok(())
    }
}

/// Divergence tolerance after projection: `1e-9 * ||u||_inf / h_min`,
/// with `u` the field handed to the projection.
pub fn div_tol(u: &VectorField) -> f64 {
    1e-9 * u.max_abs() / u.domain().h_min()
}

/// Centered differences across interior faces; boundary faces get zero.
pub fn gradient_cells_to_faces(f: &ScalarField) -> VectorField {
    let d = *f.domain();
    let cs = strides(d.cell_shape());
    let v = f.values();
    let mut comps = Vec::with_capacity(d.dim());
    for a in 0..d.dim() {
        let fs = d.face_shape(a);
        let inv_h = 1.0 / d.spacing()[a];
        let mut g = vec![0.0; d.face_count(a)];
        for i in 0..fs[0] {
            for j in 0..fs[1] {
                for k in 0..fs[2] {
                    let m = [i, j, k][a];
                    if m == 0 || m == d.cells()[a] {
                        continue;
                    }
                    let right = i * cs[0] + j * cs[1] + k;
                    let left = right - cs[a];
                    g[(i * fs[1] + j) * fs[2] + k] = (v[right] - v[left]) * inv_h;
                }
            }
        }
        comps.push(g);
    }
    VectorField::from_components(d, comps)
}

/// Conservative flux difference of face data into cells.
pub fn divergence_faces_to_cells(flux: &VectorField) -> ScalarField {
    let d = *flux.domain();
    let [n0, n1, n2] = d.cell_shape();
    let mut out = vec![0.0; d.cell_count()];
    for a in 0..d.dim() {
        let fs = d.face_shape(a);
        let fst = strides(fs);
        let inv_h = 1.0 / d.spacing()[a];
        let comp = flux.component(a);
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    let lo = (i * fs[1] + j) * fs[2] + k;
                    let hi = lo + fst[a];
                    out[(i * n1 + j) * n2 + k] += (comp[hi] - comp[lo]) * inv_h;
                }
            }
        }
    }
    ScalarField::from_values(d, out)
}

/// `div(grad f)` with mirrored ghosts (homogeneous Neumann).
pub fn laplacian_neumann(f: &ScalarField) -> ScalarField {
    divergence_faces_to_cells(&gradient_cells_to_faces(f))
}

/// First-order upwind flux `vel * f_upwind` through a face.
#[inline]
pub fn upwind_face_flux(vel: f64, left: f64, right: f64) -> f64 {
    if vel > 0.0 {
        vel * left
    } else {
        vel * right
    }
}

/// Upwind flux `u f` on every face (zero on the walls since `u` is).
pub fn upwind_flux(f: &ScalarField, u: &VectorField) -> VectorField {
    let d = *f.domain();
    let cs = strides(d.cell_shape());
    let v = f.values();
    let mut comps = Vec::with_capacity(d.dim());
    for a in 0..d.dim() {
        let fs = d.face_shape(a);
        let ua = u.component(a);
        let mut flux = vec![0.0; d.face_count(a)];
        for i in 0..fs[0] {
            for j in 0..fs[1] {
                for k in 0..fs[2] {
                    let m = [i, j, k][a];
                    if m == 0 || m == d.cells()[a] {
                        continue;
                    }
                    let fidx = (i * fs[1] + j) * fs[2] + k;
                    let right = i * cs[0] + j * cs[1] + k;
                    let left = right - cs[a];
                    flux[fidx] = upwind_face_flux(ua[fidx], v[left], v[right]);
                }
            }
        }
        comps.push(flux);
    }
    VectorField::from_components(d, comps)
}

/// Conservative upwind transport term `div_h(u f)`; the update is
/// `f_t = -advect_scalar_upwind(f, u)`.
pub fn advect_scalar_upwind(f: &ScalarField, u: &VectorField) -> ScalarField {
    divergence_faces_to_cells(&upwind_flux(f, u))
}

/// Advective form `div_h(u f) - f div_h(u)` of the same upwind scheme. It
/// coincides with [`advect_scalar_upwind`] for discretely solenoidal `u` and
/// gives an update that is a convex combination of neighbours under CFL,
/// whatever the residual divergence left by the projection.
pub fn advect_scalar_upwind_advective(f: &ScalarField, u: &VectorField) -> ScalarField {
    let mut a = advect_scalar_upwind(f, u);
    let div = divergence_faces_to_cells(u);
    for ((ai, fi), di) in a.values_mut().iter_mut().zip(f.values()).zip(div.values()) {
        *ai -= fi * di;
    }
    a
}

/// Solves `op x = b`; `x` carries the initial guess for the Krylov methods.
fn solve_op(
    op: &ShiftedLaplacian,
    cfg: &PoissonSolverConfig,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
) -> Result<(), SolverError> {
    match cfg.method {
        SolverMethod::Cg => pcg(op, None, b, x, tol, cfg.max_iter).map(|_| ()),
        SolverMethod::MgCg => {
            let mg = Multigrid::new(*op);
            pcg(op, mg.as_ref(), b, x, tol, cfg.max_iter).map(|_| ())
        }
        SolverMethod::Spectral => {
            Spectral::new(*op).solve(b, x);
            let bnorm = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if !bnorm.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(SolverError::NonFinite);
            }
            if residual_norm(op, b, x) <= tol * bnorm {
                return Ok(());
            }
            let mg = Multigrid::new(*op);
            pcg(op, mg.as_ref(), b, x, tol, cfg.max_iter).map(|_| ())
        }
    }
}

/// Mean-zero solution of `Delta_h phi = rhs` with homogeneous Neumann data.
pub fn poisson_solve_neumann(
    rhs: &ScalarField,
    cfg: &PoissonSolverConfig,
) -> Result<ScalarField, SolverError> {
    let d = *rhs.domain();
    let max = rhs.max_abs();
    let mean = rhs.mean();
    if mean.abs() > 1e-10 * max {
        return Err(SolverError::IncompatibleRhs { mean, max });
    }
    // -Delta is positive semidefinite
    let op = ShiftedLaplacian {
        layout: Layout::cells(&d),
        sigma: 0.0,
        alpha: 1.0,
    };
    let mut b: Vec<f64> = rhs.values().iter().map(|v| -v).collect();
    let m = b.iter().sum::<f64>() / b.len() as f64;
    b.iter_mut().for_each(|v| *v -= m);
    let mut x = vec![0.0; b.len()];
    solve_op(&op, cfg, &b, &mut x, cfg.rel_tol)?;
    Ok(ScalarField::from_values(d, x))
}

/// Solves `(I - alpha Delta_h) x = b` with Neumann boundaries. The constant
/// mode passes through unchanged, so the discrete integral of `x` equals that
/// of `b` up to roundoff (the Krylov methods start from `x = b`, which keeps
/// every correction at zero sum).
pub fn helmholtz_neumann(
    b: &ScalarField,
    alpha: f64,
    cfg: &PoissonSolverConfig,
    tol: f64,
) -> Result<ScalarField, SolverError> {
    let d = *b.domain();
    let op = ShiftedLaplacian {
        layout: Layout::cells(&d),
        sigma: 1.0,
        alpha,
    };
    let mut x = b.values().to_vec();
    solve_op(&op, cfg, b.values(), &mut x, tol)?;
    Ok(ScalarField::from_values(d, x))
}

/// Solves `(I - alpha Delta_h) w = u` componentwise with zero Dirichlet
/// data for every velocity component.
pub fn helmholtz_no_slip(
    u: &VectorField,
    alpha: f64,
    cfg: &PoissonSolverConfig,
) -> Result<VectorField, SolverError> {
    let d = *u.domain();
    let mut comps = Vec::with_capacity(d.dim());
    for a in 0..d.dim() {
        let op = ShiftedLaplacian {
            layout: Layout::face(&d, a),
            sigma: 1.0,
            alpha,
        };
        let b = u.component(a);
        let mut x = b.to_vec();
        solve_op(&op, cfg, b, &mut x, cfg.rel_tol)?;
        comps.push(x);
    }
    Ok(VectorField::from_components(d, comps))
}

/// Componentwise vector Laplacian with no-slip ghosts.
pub fn vector_laplacian(u: &VectorField) -> VectorField {
    let d = *u.domain();
    let comps = (0..d.dim())
        .map(|a| {
            let layout = Layout::face(&d, a);
            let mut out = vec![0.0; layout.len()];
            layout.laplacian(u.component(a), &mut out);
            out
        })
        .collect();
    VectorField::from_components(d, comps)
}

/// Helmholtz projection returning the divergence-free part together with
/// the potential `phi` (so that `u = P u + grad phi`).
pub fn project_with_potential(
    u: &VectorField,
    cfg: &PoissonSolverConfig,
) -> Result<(VectorField, ScalarField), SolverError> {
    let mut div = divergence_faces_to_cells(u);
    // the flux differences telescope, so any nonzero mean is roundoff
    div.remove_mean();
    let phi = poisson_solve_neumann(&div, cfg)?;
    let grad = gradient_cells_to_faces(&phi);
    let mut out = u.clone();
    out.axpy(-1.0, &grad);
    out.enforce_no_slip();
    Ok((out, phi))
}

/// `u - grad(phi)` with `Delta_h phi = div_h u`.
pub fn project_divergence_free(
    u: &VectorField,
    cfg: &PoissonSolverConfig,
) -> Result<VectorField, SolverError> {
    project_with_potential(u, cfg).map(|(v, _)| v)
}

/// Discrete stand-in for `(1 + eps A)^{-1}`: a screened solve
/// `(I - eps Delta_h) w = u` with no-slip data followed by projection.
pub fn yosida_smooth(
    u: &VectorField,
    eps: f64,
    cfg: &PoissonSolverConfig,
) -> Result<VectorField, SolverError> {
    assert!(eps > 0.0, "yosida_smooth needs eps > 0");
    let w = helmholtz_no_slip(u, eps, cfg)?;
    project_divergence_free(&w, cfg)
}

/// Discrete Dirichlet form `-<u, Delta_h u>`, i.e. `int |grad u|^2`.
pub fn dirichlet_form(u: &VectorField) -> f64 {
    -u.dot(&vector_laplacian(u))
}

/// Discrete `int |grad f|^2` from face differences (boundary faces carry
/// zero gradient).
pub fn gradient_energy(f: &ScalarField) -> f64 {
    let g = gradient_cells_to_faces(f);
    g.dot(&g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_domain, Domain};
    use std::f64::consts::PI;

    fn dom2(n: usize) -> Domain {
        make_domain(2, &[1.0, 1.0], &[n, n]).unwrap()
    }

    fn vortex(d: Domain) -> VectorField {
        // discrete curl of a node stream function vanishing on the walls
        let psi = |x: f64, y: f64| (PI * x).sin().powi(2) * (PI * y).sin().powi(2);
        let h = d.spacing().to_vec();
        VectorField::from_fn(d, |a, x| {
            if a == 0 {
                (psi(x[0], x[1] + 0.5 * h[1]) - psi(x[0], x[1] - 0.5 * h[1])) / h[1]
            } else {
                -(psi(x[0] + 0.5 * h[0], x[1]) - psi(x[0] - 0.5 * h[0], x[1])) / h[0]
            }
        })
    }

    #[test]
    fn constant_kernels() {
        let d = dom2(8);
        let f = ScalarField::constant(d, 3.5);
        assert!(laplacian_neumann(&f).max_abs() == 0.0);
        assert!(gradient_cells_to_faces(&f).max_abs() == 0.0);
        let u = vortex(d);
        assert!(advect_scalar_upwind(&f, &u).max_abs() < 1e-12);
        assert!(advect_scalar_upwind(&f, &VectorField::zeros(d)).max_abs() == 0.0);
        assert!(divergence_faces_to_cells(&VectorField::zeros(d)).max_abs() == 0.0);
    }

    #[test]
    fn gradient_of_linear_profile_and_symmetry() {
        let d = dom2(8);
        let f = ScalarField::from_fn(d, |x| 2.0 * x[0] - x[1]);
        let g = gradient_cells_to_faces(&f);
        for idx in 0..d.face_count(0) {
            if !d.is_boundary_face(0, idx) {
                assert!((g.component(0)[idx] - 2.0).abs() < 1e-12);
            }
        }
        let sym = ScalarField::from_fn(d, |x| (x[0] - 0.5).powi(2));
        let g = gradient_cells_to_faces(&sym);
        let fs = d.face_shape(0);
        for i in 0..fs[0] {
            for j in 0..fs[1] {
                let a = g.component(0)[i * fs[1] + j];
                let b = g.component(0)[(fs[0] - 1 - i) * fs[1] + j];
                assert!((a + b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn laplacian_is_conservative_and_composed() {
        let d = dom2(16);
        let f = ScalarField::from_fn(d, |x| (3.0 * x[0]).sin() * (x[1] * x[1] + 1.0).ln());
        let lap = laplacian_neumann(&f);
        assert!(lap.integral().abs() < 1e-12 * f.max_abs() * d.volume() * 16.0 * 16.0);
        let direct = divergence_faces_to_cells(&gradient_cells_to_faces(&f));
        assert_eq!(lap, direct);
    }

    #[test]
    fn laplacian_cos_mode_second_order() {
        let err = |n: usize| {
            let d = dom2(n);
            let f = ScalarField::from_fn(d, |x| (PI * x[0]).cos());
            let lap = laplacian_neumann(&f);
            lap.values()
                .iter()
                .enumerate()
                .map(|(i, v)| (v + PI * PI * (PI * d.cell_center(i)[0]).cos()).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(16), err(32));
        let order = (e1 / e2).log2();
        assert!((order - 2.0).abs() < 0.1, "order {order}");
    }

    #[test]
    fn poisson_inverse_identity_and_errors() {
        let d = dom2(16);
        let cfg = PoissonSolverConfig::default();
        let zero = poisson_solve_neumann(&ScalarField::zeros(d), &cfg).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let f = ScalarField::from_fn(d, |x| (x[0] * 2.0).exp() * x[1]);
        let mut fm = f.clone();
        fm.remove_mean();
        let rhs = laplacian_neumann(&f);
        let phi = poisson_solve_neumann(&rhs, &cfg).unwrap();
        let diff = phi.add(&fm.scaled(-1.0)).max_abs();
        assert!(diff < 1e-7 * fm.max_abs(), "{diff}");
        assert!(matches!(
            poisson_solve_neumann(&ScalarField::constant(d, 1.0), &cfg),
            Err(SolverError::IncompatibleRhs { .. })
        ));
        let plain = PoissonSolverConfig {
            method: SolverMethod::Cg,
            ..cfg
        };
        let phi2 = poisson_solve_neumann(&rhs, &plain).unwrap();
        assert!(phi2.add(&fm.scaled(-1.0)).max_abs() < 1e-7 * fm.max_abs());
        let starved = PoissonSolverConfig {
            max_iter: 1,
            method: SolverMethod::Cg,
            ..cfg
        };
        assert!(matches!(
            poisson_solve_neumann(&rhs, &starved),
            Err(SolverError::NoConvergence { .. })
        ));
    }

    #[test]
    fn projection_properties() {
        let d = dom2(24);
        let cfg = PoissonSolverConfig::default();
        let u = VectorField::from_fn(d, |a, x| {
            if a == 0 {
                (x[1] * 3.0).sin() + x[0]
            } else {
                (x[0] * 2.0).cos() * x[1]
            }
        });
        let p = project_divergence_free(&u, &cfg).unwrap();
        assert!(p.no_slip_exact());
        assert!(divergence_faces_to_cells(&p).max_abs() <= div_tol(&u));
        assert!(p.l2_norm() <= u.l2_norm() * (1.0 + 10.0 * cfg.rel_tol));
        let pp = project_divergence_free(&p, &cfg).unwrap();
        assert!(pp.l2_distance(&p) <= 2.0 * cfg.rel_tol * p.l2_norm() * 100.0);
        // a gradient of an interior bump is annihilated
        let phi = ScalarField::from_fn(d, |x| {
            let r2 = (x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2);
            (-r2 / 0.02).exp()
        });
        let g = gradient_cells_to_faces(&phi);
        let pg = project_divergence_free(&g, &cfg).unwrap();
        assert!(pg.max_abs() < 1e-8 * g.max_abs());
        // solenoidal input is a fixed point
        let v = vortex(d);
        let pv = project_divergence_free(&v, &cfg).unwrap();
        assert!(pv.l2_distance(&v) < 1e-9 * v.l2_norm());
    }

    #[test]
    fn yosida_limits() {
        let d = dom2(16);
        let cfg = PoissonSolverConfig::default();
        let v = vortex(d);
        let w = yosida_smooth(&v, 1e-12, &cfg).unwrap();
        assert!(w.l2_distance(&v) < 1e-8 * v.l2_norm());
        let z = yosida_smooth(&VectorField::zeros(d), 0.1, &cfg).unwrap();
        assert_eq!(z.max_abs(), 0.0);
        let s = yosida_smooth(&v, 0.1, &cfg).unwrap();
        assert!(s.l2_norm() < v.l2_norm());
    }

    #[test]
    fn upwind_conserves() {
        let d = dom2(12);
        let f = ScalarField::from_fn(d, |x| 1.0 + x[0] * x[1]);
        let a = advect_scalar_upwind(&f, &vortex(d));
        assert!(a.sum().abs() < 1e-12 * a.max_abs() * 144.0);
    }
}

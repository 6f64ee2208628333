//! Matrix-free stencils and Krylov solvers shared by the discrete operators.
//!
//! Every array handled here is a padded 3D block. Each axis carries one of
//! three boundary treatments:
//!
//! * `CellNeumann` - cell-centered, mirrored ghost (zero normal flux);
//! * `CellWall` - cell-centered, antisymmetric ghost (zero value on the wall);
//! * `FaceWall` - face nodes including both walls, wall nodes fixed at zero.

use crate::grid::{strides, Domain};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(
        "right-hand side is incompatible with the Neumann problem (mean {mean:e}, max {max:e})"
    )]
    IncompatibleRhs { mean: f64, max: f64 },
    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("non-finite values encountered in the solver")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum AxisKind {
    CellNeumann,
    CellWall,
    FaceWall,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub dim: usize,
    pub shape: [usize; 3],
    pub strides: [usize; 3],
    pub kinds: [AxisKind; 3],
    pub inv_h2: [f64; 3],
}

impl Layout {
    pub fn cells(d: &Domain) -> Self {
        Self::build(d, d.cell_shape(), [AxisKind::CellNeumann; 3])
    }

    /// Layout of velocity component `axis` with no-slip walls.
    pub fn face(d: &Domain, axis: usize) -> Self {
        let mut kinds = [AxisKind::CellWall; 3];
        kinds[axis] = AxisKind::FaceWall;
        Self::build(d, d.face_shape(axis), kinds)
    }

    fn build(d: &Domain, shape: [usize; 3], kinds: [AxisKind; 3]) -> Self {
        let mut inv_h2 = [0.0; 3];
        for (a, v) in inv_h2.iter_mut().enumerate().take(d.dim()) {
            let h = d.spacing()[a];
            *v = 1.0 / (h * h);
        }
        Self {
            dim: d.dim(),
            shape,
            strides: strides(shape),
            kinds,
            inv_h2,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    fn has_fixed_nodes(&self) -> bool {
        self.kinds[..self.dim].contains(&AxisKind::FaceWall)
    }

    /// Zeroes wall nodes of every `FaceWall` axis.
    pub fn zero_fixed(&self, v: &mut [f64]) {
        for a in 0..self.dim {
            if self.kinds[a] != AxisKind::FaceWall {
                continue;
            }
            let n = self.shape[a];
            let s = self.strides[a];
            let outer = v.len() / (n * s);
            for o in 0..outer {
                let base = o * n * s;
                for q in 0..s {
                    v[base + q] = 0.0;
                    v[base + (n - 1) * s + q] = 0.0;
                }
            }
        }
    }

    /// Five/seven-point Laplacian: `out = Delta_h x`.
    pub fn laplacian(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..self.dim {
            let n = self.shape[a];
            let s = self.strides[a];
            let w = self.inv_h2[a];
            let outer = x.len() / (n * s);
            let kind = self.kinds[a];
            for o in 0..outer {
                let base = o * n * s;
                for l in 0..n {
                    let row = base + l * s;
                    let first = l == 0;
                    let last = l == n - 1;
                    for q in 0..s {
                        let i = row + q;
                        let xi = x[i];
                        let term = match kind {
                            AxisKind::FaceWall => {
                                if first || last {
                                    0.0
                                } else {
                                    x[i - s] + x[i + s] - 2.0 * xi
                                }
                            }
                            AxisKind::CellNeumann => {
                                let left = if first { xi } else { x[i - s] };
                                let right = if last { xi } else { x[i + s] };
                                left + right - 2.0 * xi
                            }
                            AxisKind::CellWall => {
                                let left = if first { -xi } else { x[i - s] };
                                let right = if last { -xi } else { x[i + s] };
                                left + right - 2.0 * xi
                            }
                        };
                        out[i] += w * term;
                    }
                }
            }
        }
        if self.has_fixed_nodes() {
            self.zero_fixed(out);
        }
    }

    /// Coarsened layout (factor 2 per axis) when every axis allows it.
    /// Only cell-centered Neumann layouts are coarsened.
    fn coarsen(&self) -> Option<Self> {
        if self.kinds[..self.dim]
            .iter()
            .any(|k| *k != AxisKind::CellNeumann)
        {
            return None;
        }
        let mut shape = self.shape;
        let mut inv_h2 = self.inv_h2;
        for a in 0..self.dim {
            if !self.shape[a].is_multiple_of(2) || self.shape[a] < 4 {
                return None;
            }
            shape[a] /= 2;
            inv_h2[a] /= 4.0;
        }
        Some(Self {
            dim: self.dim,
            shape,
            strides: strides(shape),
            kinds: self.kinds,
            inv_h2,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn remove_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Operator `sigma * I - alpha * Delta_h` on a layout.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ShiftedLaplacian {
    pub layout: Layout,
    pub sigma: f64,
    pub alpha: f64,
}

impl ShiftedLaplacian {
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.layout.laplacian(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.sigma * xi - self.alpha * *o;
        }
        if self.layout.has_fixed_nodes() {
            self.layout.zero_fixed(out);
        }
    }

    /// Singular when there is no shift and every axis is Neumann.
    pub fn is_singular(&self) -> bool {
        self.sigma == 0.0
            && self.layout.kinds[..self.layout.dim]
                .iter()
                .all(|k| *k == AxisKind::CellNeumann)
    }
}

/// Geometric multigrid V-cycle for cell-centered Neumann layouts,
/// symmetric so that it can precondition CG.
pub(crate) struct Multigrid {
    levels: Vec<ShiftedLaplacian>,
}

const COARSE_SWEEPS: usize = 30;
const MAX_COARSE_CELLS: usize = 512;

impl Multigrid {
    pub fn new(op: ShiftedLaplacian) -> Option<Self> {
        let mut levels = vec![op];
        while let Some(c) = levels.last().unwrap().layout.coarsen() {
            // Galerkin coarse operator for piecewise-constant transfers
            let prev = *levels.last().unwrap();
            let children = (1usize << c.dim) as f64;
            levels.push(ShiftedLaplacian {
                layout: c,
                sigma: prev.sigma * children,
                alpha: prev.alpha * 2.0 * children,
            });
            if c.len() <= 64 {
                break;
            }
        }
        if levels.len() < 2 || levels.last().unwrap().layout.len() > MAX_COARSE_CELLS {
            return None;
        }
        Some(Self { levels })
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        self.vcycle(0, r, z);
    }

    fn vcycle(&self, level: usize, b: &[f64], x: &mut [f64]) {
        let op = &self.levels[level];
        x.iter_mut().for_each(|v| *v = 0.0);
        if level + 1 == self.levels.len() {
            let mut rhs = b.to_vec();
            if op.is_singular() {
                remove_mean(&mut rhs);
            }
            for _ in 0..COARSE_SWEEPS {
                gauss_seidel(op, x, &rhs, true);
                gauss_seidel(op, x, &rhs, false);
            }
            if op.is_singular() {
                remove_mean(x);
            }
            return;
        }
        gauss_seidel(op, x, b, true);
        let mut r = vec![0.0; x.len()];
        op.apply(x, &mut r);
        r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
        let coarse = &self.levels[level + 1];
        let rc = restrict(&op.layout, &coarse.layout, &r);
        let mut ec = vec![0.0; rc.len()];
        self.vcycle(level + 1, &rc, &mut ec);
        prolong_add(&op.layout, &coarse.layout, &ec, x);
        gauss_seidel(op, x, b, false);
    }
}

/// Lexicographic Gauss-Seidel sweep on a cell-centered Neumann layout.
fn gauss_seidel(op: &ShiftedLaplacian, x: &mut [f64], b: &[f64], forward: bool) {
    let l = &op.layout;
    let [n0, n1, n2] = l.shape;
    let [s0, s1, _] = l.strides;
    let dim = l.dim;
    let w = l.inv_h2;
    let visit = |x: &mut [f64], i: usize, j: usize, k: usize| {
        let idx = i * s0 + j * s1 + k;
        let mut diag = op.sigma;
        let mut off = 0.0;
        let coords = [i, j, k];
        let ns = [n0, n1, n2];
        let ss = l.strides;
        for a in 0..dim {
            let m = coords[a];
            if m > 0 {
                off += w[a] * x[idx - ss[a]];
                diag += op.alpha * w[a];
            }
            if m + 1 < ns[a] {
                off += w[a] * x[idx + ss[a]];
                diag += op.alpha * w[a];
            }
        }
        x[idx] = (b[idx] + op.alpha * off) / diag;
    };
    if forward {
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    visit(x, i, j, k);
                }
            }
        }
    } else {
        for i in (0..n0).rev() {
            for j in (0..n1).rev() {
                for k in (0..n2).rev() {
                    visit(x, i, j, k);
                }
            }
        }
    }
}

/// Sum over the 2^dim children (transpose of piecewise-constant prolongation).
fn restrict(fine: &Layout, coarse: &Layout, r: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; coarse.len()];
    let [c0, c1, c2] = coarse.shape;
    let fs = fine.strides;
    let cs = coarse.strides;
    let third = fine.dim == 3;
    for i in 0..c0 {
        for j in 0..c1 {
            for k in 0..c2 {
                let mut s = 0.0;
                for di in 0..2 {
                    for dj in 0..2 {
                        let kk = if third { 2 } else { 1 };
                        for dk in 0..kk {
                            let fk = if third { 2 * k + dk } else { k };
                            s += r[(2 * i + di) * fs[0] + (2 * j + dj) * fs[1] + fk];
                        }
                    }
                }
                out[i * cs[0] + j * cs[1] + k] = s;
            }
        }
    }
    out
}

fn prolong_add(fine: &Layout, coarse: &Layout, e: &[f64], x: &mut [f64]) {
    let [c0, c1, c2] = coarse.shape;
    let fs = fine.strides;
    let cs = coarse.strides;
    let third = fine.dim == 3;
    for i in 0..c0 {
        for j in 0..c1 {
            for k in 0..c2 {
                let v = e[i * cs[0] + j * cs[1] + k];
                for di in 0..2 {
                    for dj in 0..2 {
                        let kk = if third { 2 } else { 1 };
                        for dk in 0..kk {
                            let fk = if third { 2 * k + dk } else { k };
                            x[(2 * i + di) * fs[0] + (2 * j + dj) * fs[1] + fk] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Orthonormal eigenbasis of the 1D second-difference operator along one
/// axis, restricted to the free nodes.
struct AxisBasis {
    offset: usize,
    /// `modes[k * m + i]` is entry `i` of eigenvector `k`.
    modes: Vec<f64>,
    /// Eigenvalues of `-Delta_1d`, nonnegative.
    eig: Vec<f64>,
}

impl AxisBasis {
    fn new(kind: AxisKind, shape: usize, inv_h2: f64) -> Self {
        use std::f64::consts::PI;
        let (offset, m, n) = match kind {
            AxisKind::FaceWall => (1, shape - 2, shape - 1),
            _ => (0, shape, shape),
        };
        let nf = n as f64;
        let mut modes = vec![0.0; m * m];
        let mut eig = vec![0.0; m];
        for k in 0..m {
            let (wave, norm) = match kind {
                AxisKind::CellNeumann => (k, if k == 0 { 1.0 / nf } else { 2.0 / nf }),
                AxisKind::CellWall => (k + 1, if k + 1 == n { 1.0 / nf } else { 2.0 / nf }),
                AxisKind::FaceWall => (k + 1, 2.0 / nf),
            };
            let norm = norm.sqrt();
            let theta = wave as f64 * PI / nf;
            eig[k] = 4.0 * inv_h2 * (0.5 * theta).sin().powi(2);
            for i in 0..m {
                modes[k * m + i] = norm
                    * match kind {
                        AxisKind::CellNeumann => (theta * (i as f64 + 0.5)).cos(),
                        AxisKind::CellWall => (theta * (i as f64 + 0.5)).sin(),
                        AxisKind::FaceWall => (theta * (i + 1) as f64).sin(),
                    };
            }
        }
        Self { offset, modes, eig }
    }

    fn len(&self) -> usize {
        self.eig.len()
    }
}

/// Direct solver for `sigma I - alpha Delta_h` by separation of variables:
/// dense per-axis transforms into the analytic eigenbasis, a diagonal
/// solve, and the transposed transforms back.
pub(crate) struct Spectral {
    op: ShiftedLaplacian,
    axes: Vec<AxisBasis>,
}

impl Spectral {
    pub fn new(op: ShiftedLaplacian) -> Self {
        let l = &op.layout;
        let axes = (0..l.dim)
            .map(|a| AxisBasis::new(l.kinds[a], l.shape[a], l.inv_h2[a]))
            .collect();
        Self { op, axes }
    }

    fn transform(&self, v: &mut [f64], axis: usize, inverse: bool) {
        let l = &self.op.layout;
        let basis = &self.axes[axis];
        let m = basis.len();
        let n = l.shape[axis];
        let s = l.strides[axis];
        let outer = v.len() / (n * s);
        let mut line = vec![0.0; m];
        let mut out = vec![0.0; m];
        for o in 0..outer {
            for q in 0..s {
                let base = o * n * s + q + basis.offset * s;
                for (i, x) in line.iter_mut().enumerate() {
                    *x = v[base + i * s];
                }
                if inverse {
                    out.iter_mut().for_each(|x| *x = 0.0);
                    for (k, &c) in line.iter().enumerate() {
                        let row = &basis.modes[k * m..(k + 1) * m];
                        for (y, &e) in out.iter_mut().zip(row) {
                            *y += c * e;
                        }
                    }
                } else {
                    for (k, y) in out.iter_mut().enumerate() {
                        let row = &basis.modes[k * m..(k + 1) * m];
                        *y = row.iter().zip(&line).map(|(e, x)| e * x).sum();
                    }
                }
                for (i, &y) in out.iter().enumerate() {
                    v[base + i * s] = y;
                }
            }
        }
    }

    /// Solves into `x`; for the singular Neumann operator the constant mode
    /// of `b` is dropped and the result has zero mean.
    pub fn solve(&self, b: &[f64], x: &mut [f64]) {
        let l = &self.op.layout;
        x.copy_from_slice(b);
        if l.has_fixed_nodes() {
            l.zero_fixed(x);
        }
        for a in 0..l.dim {
            self.transform(x, a, false);
        }
        let [n0, n1, n2] = l.shape;
        let off = |a: usize| self.axes.get(a).map_or(0, |b| b.offset);
        let eig = |a: usize, i: usize| self.axes.get(a).map_or(0.0, |b| b.eig[i - b.offset]);
        let lim = |a: usize, n: usize| self.axes.get(a).map_or(n, |b| b.offset + b.len());
        for i in off(0)..lim(0, n0) {
            for j in off(1)..lim(1, n1) {
                for k in off(2)..lim(2, n2) {
                    let idx = i * l.strides[0] + j * l.strides[1] + k;
                    let lam = self.op.sigma + self.op.alpha * (eig(0, i) + eig(1, j) + eig(2, k));
                    x[idx] = if lam == 0.0 { 0.0 } else { x[idx] / lam };
                }
            }
        }
        for a in 0..l.dim {
            self.transform(x, a, true);
        }
    }
}

/// Max-norm residual `||b - op x||_inf`, deflated for singular operators.
pub(crate) fn residual_norm(op: &ShiftedLaplacian, b: &[f64], x: &[f64]) -> f64 {
    let mut r = vec![0.0; b.len()];
    op.apply(x, &mut r);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    if op.is_singular() {
        remove_mean(&mut r);
    }
    if op.layout.has_fixed_nodes() {
        op.layout.zero_fixed(&mut r);
    }
    max_abs(&r)
}

/// Outcome of a converged solve.
#[derive(Debug, Clone, Copy)]
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Preconditioned CG on `op x = b` with a max-norm stopping test
/// `||b - op x||_inf <= tol * ||b||_inf`. `x` holds the initial guess.
/// Singular (pure Neumann) operators are handled by deflating the
/// constant mode from the residual and the iterate.
pub(crate) fn pcg(
    op: &ShiftedLaplacian,
    precond: Option<&Multigrid>,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<SolveStats, SolverError> {
    let singular = op.is_singular();
    let fixed = op.layout.has_fixed_nodes();
    let bnorm = max_abs(b);
    if !bnorm.is_finite() {
        return Err(SolverError::NonFinite);
    }
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats {
            iterations: 0,
            residual: 0.0,
        });
    }
    if fixed {
        op.layout.zero_fixed(x);
    }
    let n = b.len();
    let mut r = vec![0.0; n];
    op.apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    if singular {
        remove_mean(&mut r);
    }
    if fixed {
        op.layout.zero_fixed(&mut r);
    }
    let mut rnorm = max_abs(&r);
    if rnorm <= tol * bnorm {
        if singular {
            remove_mean(x);
        }
        return Ok(SolveStats {
            iterations: 0,
            residual: rnorm / bnorm,
        });
    }
    let mut z = vec![0.0; n];
    let precondition = |r: &[f64], z: &mut [f64]| match precond {
        Some(mg) => {
            mg.apply(r, z);
            if singular {
                remove_mean(z);
            }
        }
        None => z.copy_from_slice(r),
    };
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=max_iter {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || pap <= 0.0 {
            if !pap.is_finite() {
                return Err(SolverError::NonFinite);
            }
            // breakdown: the residual is already at roundoff level
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if singular {
            remove_mean(&mut r);
        }
        rnorm = max_abs(&r);
        if rnorm <= tol * bnorm {
            if singular {
                remove_mean(x);
            }
            return Ok(SolveStats {
                iterations: it,
                residual: rnorm / bnorm,
            });
        }
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    // recompute the true residual before giving up
    op.apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    if singular {
        remove_mean(&mut r);
    }
    let true_res = max_abs(&r) / bnorm;
    if true_res <= tol {
        if singular {
            remove_mean(x);
        }
        return Ok(SolveStats {
            iterations: max_iter,
            residual: true_res,
        });
    }
    Err(SolverError::NoConvergence {
        iterations: max_iter,
        residual: true_res,
    })
}

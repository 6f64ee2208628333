//! Rectangular box domain, MAC staggered layout and the field containers.
//!
//! Scalars (`n`, `c`, pressure) live at cell centers; velocity component `a`
//! lives on the faces normal to axis `a`. Storage is row-major with the last
//! axis fastest. A 2D domain is stored as a 3D array whose third extent is 1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("dimension must be 2 or 3, got {0}")]
    BadDimension(usize),
    #[error("expected {expected} entries for `{what}`, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("domain length along axis {axis} must be positive and finite, got {value}")]
    NonpositiveLength { axis: usize, value: f64 },
    #[error("axis {axis} needs at least 4 cells, got {value}")]
    TooFewCells { axis: usize, value: usize },
}

/// Axis-aligned box `[0, L_0] x ... x [0, L_{dim-1}]` with a uniform grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainSpec", into = "DomainSpec")]
pub struct Domain {
    dim: usize,
    lengths: [f64; MAX_DIM],
    cells: [usize; MAX_DIM],
    spacing: [f64; MAX_DIM],
}

/// Serialized form of a [`Domain`]; the spacing is derived on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub dim: usize,
    pub lengths: Vec<f64>,
    pub cells: Vec<usize>,
}

impl TryFrom<DomainSpec> for Domain {
    type Error = GridError;

    fn try_from(s: DomainSpec) -> Result<Self, GridError> {
        Domain::new(s.dim, &s.lengths, &s.cells)
    }
}

impl From<Domain> for DomainSpec {
    fn from(d: Domain) -> Self {
        Self {
            dim: d.dim(),
            lengths: d.lengths().to_vec(),
            cells: d.cells().to_vec(),
        }
    }
}

/// Builds a domain after validating the geometry.
pub fn make_domain(dim: usize, lengths: &[f64], cells: &[usize]) -> Result<Domain, GridError> {
    Domain::new(dim, lengths, cells)
}

impl Domain {
    pub fn new(dim: usize, lengths: &[f64], cells: &[usize]) -> Result<Self, GridError> {
        if dim != 2 && dim != 3 {
            return Err(GridError::BadDimension(dim));
        }
        if lengths.len() != dim {
            return Err(GridError::LengthMismatch {
                what: "lengths",
                expected: dim,
                got: lengths.len(),
            });
        }
        if cells.len() != dim {
            return Err(GridError::LengthMismatch {
                what: "cells",
                expected: dim,
                got: cells.len(),
            });
        }
        let mut l = [1.0; MAX_DIM];
        let mut n = [1usize; MAX_DIM];
        let mut h = [1.0; MAX_DIM];
        for axis in 0..dim {
            let value = lengths[axis];
            if !(value > 0.0 && value.is_finite()) {
                return Err(GridError::NonpositiveLength { axis, value });
            }
            if cells[axis] < 4 {
                return Err(GridError::TooFewCells {
                    axis,
                    value: cells[axis],
                });
            }
            l[axis] = value;
            n[axis] = cells[axis];
            h[axis] = value / cells[axis] as f64;
        }
        Ok(Self {
            dim,
            lengths: l,
            cells: n,
            spacing: h,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths[..self.dim]
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells[..self.dim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.dim]
    }

    pub fn h_min(&self) -> f64 {
        self.spacing().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// |Omega|.
    pub fn volume(&self) -> f64 {
        self.lengths().iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    pub fn cell_count(&self) -> usize {
        self.cells().iter().product()
    }

    /// Padded 3D extents of the cell array.
    pub fn cell_shape(&self) -> [usize; 3] {
        self.cells
    }

    /// Padded 3D extents of the face array normal to `axis`.
    pub fn face_shape(&self, axis: usize) -> [usize; 3] {
        let mut s = self.cells;
        s[axis] += 1;
        s
    }

    pub fn face_count(&self, axis: usize) -> usize {
        self.face_shape(axis).iter().product()
    }

    /// Row-major flat index of cell `(i, j, k)`; `k` must be 0 in 2D.
    #[inline]
    pub fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.cells[1] + j) * self.cells[2] + k
    }

    /// Center of the cell with flat index `idx`.
    pub fn cell_center(&self, idx: usize) -> [f64; 3] {
        let s = self.cells;
        let k = idx % s[2];
        let j = (idx / s[2]) % s[1];
        let i = idx / (s[1] * s[2]);
        let mut x = [0.0; 3];
        for (axis, m) in [i, j, k].into_iter().enumerate().take(self.dim) {
            x[axis] = (m as f64 + 0.5) * self.spacing[axis];
        }
        x
    }

    /// Position of face `idx` of the component normal to `axis`.
    pub fn face_center(&self, axis: usize, idx: usize) -> [f64; 3] {
        let s = self.face_shape(axis);
        let k = idx % s[2];
        let j = (idx / s[2]) % s[1];
        let i = idx / (s[1] * s[2]);
        let mut x = [0.0; 3];
        for (b, m) in [i, j, k].into_iter().enumerate().take(self.dim) {
            let off = if b == axis { 0.0 } else { 0.5 };
            x[b] = (m as f64 + off) * self.spacing[b];
        }
        x
    }

    /// Whether face `idx` normal to `axis` lies on the boundary.
    pub fn is_boundary_face(&self, axis: usize, idx: usize) -> bool {
        let s = self.face_shape(axis);
        let stride: usize = s[axis + 1..].iter().product();
        let m = (idx / stride) % s[axis];
        m == 0 || m == self.cells[axis]
    }
}

pub(crate) fn strides(shape: [usize; 3]) -> [usize; 3] {
    [shape[1] * shape[2], shape[2], 1]
}

/// Boundary treatment attached to a scalar field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalarBc {
    HomogeneousNeumann,
}

/// Boundary treatment attached to a velocity field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VectorBc {
    NoSlip,
}

/// Cell-centered scalar with homogeneous Neumann boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    domain: Domain,
    values: Vec<f64>,
    bc: ScalarBc,
}

impl ScalarField {
    pub fn zeros(domain: Domain) -> Self {
        Self::constant(domain, 0.0)
    }

    pub fn constant(domain: Domain, value: f64) -> Self {
        Self {
            domain,
            values: vec![value; domain.cell_count()],
            bc: ScalarBc::HomogeneousNeumann,
        }
    }

    /// Samples `f` at every cell center.
    pub fn from_fn(domain: Domain, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..domain.cell_count())
            .map(|idx| f(domain.cell_center(idx)))
            .collect();
        Self {
            domain,
            values,
            bc: ScalarBc::HomogeneousNeumann,
        }
    }

    /// Wraps raw cell values; panics if the length does not match the grid.
    pub fn from_values(domain: Domain, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), domain.cell_count(), "cell count mismatch");
        Self {
            domain,
            values,
            bc: ScalarBc::HomogeneousNeumann,
        }
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn bc(&self) -> ScalarBc {
        self.bc
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Midpoint-rule integral over the domain.
    pub fn integral(&self) -> f64 {
        self.sum() * self.domain.cell_volume()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Discrete `L^p` norm, `p >= 1`.
    pub fn lp_norm(&self, p: f64) -> f64 {
        let s: f64 = self.values.iter().map(|v| v.abs().powf(p)).sum();
        (s * self.domain.cell_volume()).powf(1.0 / p)
    }

    /// Discrete `L^2` distance to another field on the same grid.
    pub fn l2_distance(&self, other: &Self) -> f64 {
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (s * self.domain.cell_volume()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        debug_assert_eq!(self.domain, other.domain);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    /// Subtracts the discrete mean in place.
    pub fn remove_mean(&mut self) {
        let m = self.mean();
        self.values.iter_mut().for_each(|v| *v -= m);
    }
}

/// Face-staggered vector field. Component `a` holds one value per face
/// normal to axis `a`, boundary faces included (and held at zero).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    domain: Domain,
    comps: Vec<Vec<f64>>,
    bc: VectorBc,
}

impl VectorField {
    pub fn zeros(domain: Domain) -> Self {
        let comps = (0..domain.dim())
            .map(|a| vec![0.0; domain.face_count(a)])
            .collect();
        Self {
            domain,
            comps,
            bc: VectorBc::NoSlip,
        }
    }

    /// Samples each component at its face positions; boundary-normal faces
    /// are set to zero regardless of `f`.
    pub fn from_fn(domain: Domain, f: impl Fn(usize, [f64; 3]) -> f64) -> Self {
        let mut out = Self::zeros(domain);
        for a in 0..domain.dim() {
            for (idx, v) in out.comps[a].iter_mut().enumerate() {
                if !domain.is_boundary_face(a, idx) {
                    *v = f(a, domain.face_center(a, idx));
                }
            }
        }
        out
    }

    /// Wraps raw face arrays; panics on a shape mismatch.
    pub fn from_components(domain: Domain, comps: Vec<Vec<f64>>) -> Self {
        assert_eq!(comps.len(), domain.dim(), "component count mismatch");
        for (a, c) in comps.iter().enumerate() {
            assert_eq!(c.len(), domain.face_count(a), "face count mismatch");
        }
        Self {
            domain,
            comps,
            bc: VectorBc::NoSlip,
        }
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn bc(&self) -> VectorBc {
        self.bc
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.comps[axis]
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [f64] {
        &mut self.comps[axis]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.comps
    }

    pub fn max_abs(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Discrete inner product with dual-cell weights `h^dim`.
    pub fn dot(&self, other: &Self) -> f64 {
        let s: f64 = self
            .comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        s * self.domain.cell_volume()
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn l2_distance(&self, other: &Self) -> f64 {
        let mut d = self.clone();
        d.axpy(-1.0, other);
        d.l2_norm()
    }

    /// Discrete `L^p` norm of the face values.
    pub fn lp_norm(&self, p: f64) -> f64 {
        let s: f64 = self
            .comps
            .iter()
            .flat_map(|c| c.iter())
            .map(|v| v.abs().powf(p))
            .sum();
        (s * self.domain.cell_volume()).powf(1.0 / p)
    }

    /// `1/2 * sum |u|^2` over faces.
    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.dot(self)
    }

    pub fn is_finite(&self) -> bool {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .all(|v| v.is_finite())
    }

    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.comps.iter_mut().zip(&other.comps) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.comps
            .iter_mut()
            .flat_map(|c| c.iter_mut())
            .for_each(|v| *v *= alpha);
        out
    }

    /// True when every boundary-normal face is exactly zero.
    pub fn no_slip_exact(&self) -> bool {
        (0..self.domain.dim()).all(|a| {
            self.comps[a]
                .iter()
                .enumerate()
                .all(|(idx, v)| !self.domain.is_boundary_face(a, idx) || *v == 0.0)
        })
    }

    pub fn enforce_no_slip(&mut self) {
        let d = self.domain;
        for a in 0..d.dim() {
            zero_face_boundary(&d, a, &mut self.comps[a]);
        }
    }
}

/// Zeroes the two boundary planes of a face array normal to `axis`.
pub(crate) fn zero_face_boundary(d: &Domain, axis: usize, v: &mut [f64]) {
    let shape = d.face_shape(axis);
    let st = strides(shape);
    let n = shape[axis];
    let outer = v.len() / (n * st[axis]);
    for o in 0..outer {
        let base = o * n * st[axis];
        for q in 0..st[axis] {
            v[base + q] = 0.0;
            v[base + (n - 1) * st[axis] + q] = 0.0;
        }
    }
}

/// `(n, c, u, P, t)` together with the regularization level.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub n: ScalarField,
    pub c: ScalarField,
    pub u: VectorField,
    pub p: ScalarField,
    pub t: f64,
    pub eps: f64,
}

impl SimState {
    pub fn domain(&self) -> &Domain {
        self.n.domain()
    }
}

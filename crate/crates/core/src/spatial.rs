//! Conforming Q1/Q2 Lagrange finite elements on structured quadrilateral
//! meshes.
//!
//! Every integral in the crate (system assembly, norms, free energy and the
//! energy diagnostics) goes through the same per-cell quadrature data and
//! the same field evaluation kernel, [`FeSpace::evaluate_at_quadrature`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::linalg::SparseMatrix;
use crate::mesh::{BoundaryTag, CellSide, Mesh, MeshError};
use crate::par::{self, Execution};
use crate::physics::{EnergyParams, FluidModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialError {
    #[error("unsupported polynomial degree {0} (expected 1 or 2)")]
    InvalidDegree(usize),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("field has {got} values, space has {expected} dofs")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value produced while assembling the {0} system")]
    NonFinite(&'static str),
    #[error("time-step weight must be positive, got {0}")]
    NonPositiveStep(f64),
}

/// Tensor Gauss–Legendre rule on the reference cell `[0, 1]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

/// Gauss–Legendre points and weights on `[0, 1]`.
pub fn gauss_1d(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w): (&[f64], &[f64]) = match n {
        1 => (&[0.0], &[2.0]),
        2 => {
            let a = 1.0 / 3f64.sqrt();
            return map_unit(&[-a, a], &[1.0, 1.0]);
        }
        3 => {
            let a = (3.0f64 / 5.0).sqrt();
            return map_unit(&[-a, 0.0, a], &[5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0]);
        }
        4 => {
            let r = (6.0f64 / 5.0).sqrt() * 2.0 / 7.0;
            let (a, b) = ((3.0 / 7.0 - r).sqrt(), (3.0 / 7.0 + r).sqrt());
            let s = 30f64.sqrt() / 36.0;
            return map_unit(&[-b, -a, a, b], &[0.5 - s, 0.5 + s, 0.5 + s, 0.5 - s]);
        }
        5 => {
            let r = 2.0 * (10.0f64 / 7.0).sqrt();
            let (a, b) = ((5.0 - r).sqrt() / 3.0, (5.0 + r).sqrt() / 3.0);
            let s = 13.0 * 70f64.sqrt();
            let (wa, wb) = ((322.0 + s) / 900.0, (322.0 - s) / 900.0);
            return map_unit(&[-b, -a, 0.0, a, b], &[wb, wa, 128.0 / 225.0, wa, wb]);
        }
        _ => panic!("Gauss rule with {n} points not tabulated"),
    };
    map_unit(x, w)
}

fn map_unit(x: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (x.iter().map(|v| 0.5 * (v + 1.0)).collect(), w.iter().map(|v| 0.5 * v).collect())
}

impl QuadratureRule {
    pub fn gauss(n: usize) -> Self {
        let (x, w) = gauss_1d(n);
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                points.push([x[i], x[j]]);
                weights.push(w[i] * w[j]);
            }
        }
        QuadratureRule { points, weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        QuadratureRule::gauss(3)
    }
}

/// 1D Lagrange basis of degree `p` on equispaced nodes `k/p`.
fn lagrange_1d(p: usize, x: f64) -> (Vec<f64>, Vec<f64>) {
    let z: Vec<f64> = (0..=p).map(|k| k as f64 / p as f64).collect();
    let mut val = vec![0.0; p + 1];
    let mut der = vec![0.0; p + 1];
    for k in 0..=p {
        let mut v = 1.0;
        for m in 0..=p {
            if m != k {
                v *= (x - z[m]) / (z[k] - z[m]);
            }
        }
        val[k] = v;
        let mut d = 0.0;
        for r in 0..=p {
            if r == k {
                continue;
            }
            let mut t = 1.0 / (z[k] - z[r]);
            for m in 0..=p {
                if m != k && m != r {
                    t *= (x - z[m]) / (z[k] - z[m]);
                }
            }
            d += t;
        }
        der[k] = d;
    }
    (val, der)
}

/// Tensor basis values and reference gradients at `(ξ, η)`; local index
/// `a + (p+1) b`.
fn reference_basis(p: usize, xi: f64, eta: f64) -> (Vec<f64>, Vec<[f64; 2]>) {
    let (vx, dx) = lagrange_1d(p, xi);
    let (vy, dy) = lagrange_1d(p, eta);
    let n = p + 1;
    let mut val = vec![0.0; n * n];
    let mut grad = vec![[0.0; 2]; n * n];
    for b in 0..n {
        for a in 0..n {
            val[a + n * b] = vx[a] * vy[b];
            grad[a + n * b] = [dx[a] * vy[b], vx[a] * dy[b]];
        }
    }
    (val, grad)
}

/// Bilinear geometry map: physical point and Jacobian `[[x_ξ, x_η], [y_ξ, y_η]]`.
fn geometry(v: &[[f64; 2]; 4], xi: f64, eta: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = [(1.0 - xi) * (1.0 - eta), xi * (1.0 - eta), xi * eta, (1.0 - xi) * eta];
    let mut x = [0.0; 2];
    for k in 0..4 {
        x[0] += n[k] * v[k][0];
        x[1] += n[k] * v[k][1];
    }
    let mut jac = [[0.0; 2]; 2];
    for d in 0..2 {
        jac[d][0] = (v[1][d] - v[0][d]) * (1.0 - eta) + (v[2][d] - v[3][d]) * eta;
        jac[d][1] = (v[3][d] - v[0][d]) * (1.0 - xi) + (v[2][d] - v[1][d]) * xi;
    }
    (x, jac)
}

fn physical_gradients(jac: &[[f64; 2]; 2], ref_grads: &[[f64; 2]]) -> (f64, Vec<[f64; 2]>) {
    let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
    let g = ref_grads
        .iter()
        .map(|g| {
            [
                (jac[1][1] * g[0] - jac[1][0] * g[1]) / det,
                (-jac[0][1] * g[0] + jac[0][0] * g[1]) / det,
            ]
        })
        .collect();
    (det, g)
}

/// Quadrature data of one boundary edge.
#[derive(Debug, Clone)]
pub struct EdgeGeometry {
    pub cell: usize,
    pub side: CellSide,
    pub tag: BoundaryTag,
    /// Outward unit normal.
    pub normal: [f64; 2],
    pub points: Vec<[f64; 2]>,
    /// Quadrature weights including the edge length.
    pub weights: Vec<f64>,
    shape: Vec<f64>,
    grads: Vec<[f64; 2]>,
}

/// Degree-of-freedom vector of one scalar unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(space: &FeSpace) -> Self {
        Field {
            values: vec![0.0; space.n_dofs()],
        }
    }

    pub fn constant(space: &FeSpace, c: f64) -> Self {
        Field {
            values: vec![c; space.n_dofs()],
        }
    }

    pub fn from_values(space: &FeSpace, values: Vec<f64>) -> Result<Self, SpatialError> {
        if values.len() != space.n_dofs() {
            return Err(SpatialError::LengthMismatch {
                expected: space.n_dofs(),
                got: values.len(),
            });
        }
        Ok(Field { values })
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(space: &FeSpace, f: impl Fn(f64, f64) -> f64) -> Self {
        Field {
            values: space.dof_coords().iter().map(|x| f(x[0], x[1])).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `a·self + b·other`, dof-wise.
    pub fn combine(&self, a: f64, other: &Field, b: f64) -> Field {
        Field {
            values: self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect(),
        }
    }

    pub fn sub(&self, other: &Field) -> Field {
        self.combine(1.0, other, -1.0)
    }
}

/// Field values and gradients at every quadrature point, indexed by
/// `cell * nq + q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadValues {
    pub values: Vec<f64>,
    pub grads: Vec<[f64; 2]>,
}

/// Field values and gradients at every boundary-edge quadrature point,
/// indexed by `edge * nq_edge + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeValues {
    pub values: Vec<f64>,
    pub grads: Vec<[f64; 2]>,
}

/// Integrand coefficients at one quadrature point of the generic form
/// `(m u, v) + (d ∇u, ∇v) = (f, v) + (g, ∇v)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QpCoefficients {
    pub mass: f64,
    pub diffusion: f64,
    pub source: f64,
    pub flux: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
}

struct Pattern {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    /// Position in the CSR value array of each local `(i, j)` pair, per cell.
    scatter: Vec<usize>,
}

pub struct FeSpace {
    mesh: Arc<Mesh>,
    degree: usize,
    nloc: usize,
    n_dofs: usize,
    cell_dofs: Vec<usize>,
    dof_coords: Vec<[f64; 2]>,
    rule: QuadratureRule,
    shape: Vec<f64>,
    jxw: Vec<f64>,
    qp_points: Vec<[f64; 2]>,
    grads: Vec<[f64; 2]>,
    edge_rule: (Vec<f64>, Vec<f64>),
    edges: Vec<EdgeGeometry>,
    tag_dofs: BTreeMap<BoundaryTag, Vec<usize>>,
    pattern: Pattern,
    /// Cell id at each lattice position, `None` for removed cells.
    cell_at: Vec<Option<usize>>,
    exec: Execution,
}

impl fmt::Debug for FeSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeSpace")
            .field("degree", &self.degree)
            .field("cells", &self.mesh.num_cells())
            .field("dofs", &self.n_dofs)
            .finish()
    }
}

impl FeSpace {
    /// Lagrange space of `degree` 1 or 2 with the default 3×3 Gauss rule.
    pub fn new(mesh: Arc<Mesh>, degree: usize) -> Result<Self, SpatialError> {
        Self::with_quadrature(mesh, degree, QuadratureRule::default())
    }

    pub fn with_quadrature(mesh: Arc<Mesh>, degree: usize, rule: QuadratureRule) -> Result<Self, SpatialError> {
        if !(1..=2).contains(&degree) {
            return Err(SpatialError::InvalidDegree(degree));
        }
        let p = degree;
        let n1 = p + 1;
        let nloc = n1 * n1;
        let grid = mesh.grid().clone();
        let (lx, ly) = (p * grid.nx + 1, p * grid.ny + 1);

        // Number the used lattice points lexicographically.
        let mut used = vec![false; lx * ly];
        for c in 0..mesh.num_cells() {
            let (i, j) = mesh.cell_lattice(c);
            for b in 0..n1 {
                for a in 0..n1 {
                    used[(p * j + b) * lx + p * i + a] = true;
                }
            }
        }
        let mut lattice_dof = vec![usize::MAX; lx * ly];
        let mut dof_coords = Vec::new();
        for (lin, &u) in used.iter().enumerate() {
            if u {
                lattice_dof[lin] = dof_coords.len();
                let (pi, pj) = (lin % lx, lin / lx);
                dof_coords.push([
                    grid.origin[0] + pi as f64 * grid.spacing[0] / p as f64,
                    grid.origin[1] + pj as f64 * grid.spacing[1] / p as f64,
                ]);
            }
        }
        let n_dofs = dof_coords.len();

        let mut cell_dofs = Vec::with_capacity(mesh.num_cells() * nloc);
        let mut cell_at = vec![None; grid.nx * grid.ny];
        for c in 0..mesh.num_cells() {
            let (i, j) = mesh.cell_lattice(c);
            cell_at[j * grid.nx + i] = Some(c);
            for b in 0..n1 {
                for a in 0..n1 {
                    cell_dofs.push(lattice_dof[(p * j + b) * lx + p * i + a]);
                }
            }
        }

        // Reference basis at the quadrature points.
        let nq = rule.len();
        let mut shape = Vec::with_capacity(nq * nloc);
        let mut ref_grads = Vec::with_capacity(nq);
        for pt in &rule.points {
            let (v, g) = reference_basis(p, pt[0], pt[1]);
            shape.extend_from_slice(&v);
            ref_grads.push(g);
        }

        let mut jxw = Vec::with_capacity(mesh.num_cells() * nq);
        let mut qp_points = Vec::with_capacity(mesh.num_cells() * nq);
        let mut grads = Vec::with_capacity(mesh.num_cells() * nq * nloc);
        for c in 0..mesh.num_cells() {
            let v = mesh.cell_vertices(c);
            for (q, pt) in rule.points.iter().enumerate() {
                let (x, jac) = geometry(&v, pt[0], pt[1]);
                let (det, g) = physical_gradients(&jac, &ref_grads[q]);
                jxw.push(det * rule.weights[q]);
                qp_points.push(x);
                grads.extend_from_slice(&g);
            }
        }

        let edge_rule = gauss_1d(3);
        let mut edges = Vec::with_capacity(mesh.boundary_edges().len());
        let mut tag_dofs: BTreeMap<BoundaryTag, Vec<usize>> = BTreeMap::new();
        for e in mesh.boundary_edges() {
            let v = mesh.cell_vertices(e.cell);
            let (pa, pb) = (mesh.nodes()[e.nodes[0]], mesh.nodes()[e.nodes[1]]);
            let len = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
            let normal = [(pb[1] - pa[1]) / len, -(pb[0] - pa[0]) / len];
            let mut eg = EdgeGeometry {
                cell: e.cell,
                side: e.side,
                tag: e.tag,
                normal,
                points: Vec::new(),
                weights: Vec::new(),
                shape: Vec::new(),
                grads: Vec::new(),
            };
            for (k, &t) in edge_rule.0.iter().enumerate() {
                let (xi, eta) = match e.side {
                    CellSide::Bottom => (t, 0.0),
                    CellSide::Right => (1.0, t),
                    CellSide::Top => (1.0 - t, 1.0),
                    CellSide::Left => (0.0, 1.0 - t),
                };
                let (vals, rg) = reference_basis(p, xi, eta);
                let (x, jac) = geometry(&v, xi, eta);
                let (_, g) = physical_gradients(&jac, &rg);
                eg.points.push(x);
                eg.weights.push(edge_rule.1[k] * len);
                eg.shape.extend_from_slice(&vals);
                eg.grads.extend_from_slice(&g);
            }
            let dofs = tag_dofs.entry(e.tag).or_default();
            for (a, b) in side_local_indices(p, e.side) {
                dofs.push(cell_dofs[e.cell * nloc + a + n1 * b]);
            }
            edges.push(eg);
        }
        for d in tag_dofs.values_mut() {
            d.sort_unstable();
            d.dedup();
        }

        let pattern = build_pattern(n_dofs, nloc, &cell_dofs);

        Ok(FeSpace {
            mesh,
            degree,
            nloc,
            n_dofs,
            cell_dofs,
            dof_coords,
            rule,
            shape,
            jxw,
            qp_points,
            grads,
            edge_rule,
            edges,
            tag_dofs,
            pattern,
            cell_at,
            exec: Execution::default(),
        })
    }

    /// Sets how cell loops are executed. Results do not depend on it.
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn set_execution(&mut self, exec: Execution) {
        self.exec = exec;
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> Arc<Mesh> {
        Arc::clone(&self.mesh)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn dofs_per_cell(&self) -> usize {
        self.nloc
    }

    pub fn cell_dofs(&self, cell: usize) -> &[usize] {
        &self.cell_dofs[cell * self.nloc..(cell + 1) * self.nloc]
    }

    pub fn dof_coords(&self) -> &[[f64; 2]] {
        &self.dof_coords
    }

    pub fn quadrature(&self) -> &QuadratureRule {
        &self.rule
    }

    /// Quadrature points per cell.
    pub fn nq(&self) -> usize {
        self.rule.len()
    }

    /// Quadrature points per boundary edge.
    pub fn nq_edge(&self) -> usize {
        self.edge_rule.0.len()
    }

    /// Jacobian-weighted quadrature weights, indexed by `cell * nq + q`.
    pub fn jxw(&self) -> &[f64] {
        &self.jxw
    }

    /// Physical quadrature points, indexed by `cell * nq + q`.
    pub fn quadrature_points(&self) -> &[[f64; 2]] {
        &self.qp_points
    }

    pub fn boundary_edges(&self) -> &[EdgeGeometry] {
        &self.edges
    }

    /// Sorted dofs lying on edges with `tag`.
    pub fn boundary_dofs(&self, tag: BoundaryTag) -> Result<&[usize], SpatialError> {
        self.tag_dofs
            .get(&tag)
            .map(|v| v.as_slice())
            .ok_or(SpatialError::Mesh(MeshError::UnknownTag(tag)))
    }

    fn check(&self, field: &Field) -> Result<(), SpatialError> {
        if field.len() != self.n_dofs {
            return Err(SpatialError::LengthMismatch {
                expected: self.n_dofs,
                got: field.len(),
            });
        }
        Ok(())
    }

    /// Values and gradients of `field` at every quadrature point. This is
    /// the single evaluation kernel behind assembly, norms and energies.
    pub fn evaluate_at_quadrature(&self, field: &Field) -> QuadValues {
        assert_eq!(field.len(), self.n_dofs, "field does not belong to this space");
        let nq = self.nq();
        let nloc = self.nloc;
        let per_cell = par::map_indexed(self.exec, self.mesh.num_cells(), |c| {
            let dofs = self.cell_dofs(c);
            let mut out = Vec::with_capacity(nq);
            for q in 0..nq {
                let sh = &self.shape[q * nloc..(q + 1) * nloc];
                let gr = &self.grads[(c * nq + q) * nloc..(c * nq + q + 1) * nloc];
                let mut v = 0.0;
                let mut g = [0.0; 2];
                for i in 0..nloc {
                    let u = field.values[dofs[i]];
                    v += sh[i] * u;
                    g[0] += gr[i][0] * u;
                    g[1] += gr[i][1] * u;
                }
                out.push((v, g));
            }
            out
        });
        let mut values = Vec::with_capacity(self.jxw.len());
        let mut grads = Vec::with_capacity(self.jxw.len());
        for (v, g) in per_cell.into_iter().flatten() {
            values.push(v);
            grads.push(g);
        }
        QuadValues { values, grads }
    }

    /// Values and gradients of `field` at every boundary-edge quadrature
    /// point.
    pub fn evaluate_on_edges(&self, field: &Field) -> EdgeValues {
        assert_eq!(field.len(), self.n_dofs, "field does not belong to this space");
        let nloc = self.nloc;
        let mut values = Vec::with_capacity(self.edges.len() * self.nq_edge());
        let mut grads = Vec::with_capacity(values.capacity());
        for e in &self.edges {
            let dofs = self.cell_dofs(e.cell);
            for k in 0..self.nq_edge() {
                let sh = &e.shape[k * nloc..(k + 1) * nloc];
                let gr = &e.grads[k * nloc..(k + 1) * nloc];
                let mut v = 0.0;
                let mut g = [0.0; 2];
                for i in 0..nloc {
                    let u = field.values[dofs[i]];
                    v += sh[i] * u;
                    g[0] += gr[i][0] * u;
                    g[1] += gr[i][1] * u;
                }
                values.push(v);
                grads.push(g);
            }
        }
        EdgeValues { values, grads }
    }

    /// `Σ_q w_q f(q)` over all cell quadrature points, with `f` receiving
    /// the global quadrature index.
    pub fn integrate(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.jxw.iter().enumerate().map(|(gq, w)| w * f(gq)).sum()
    }

    /// Evaluates `field` at an arbitrary point of the domain.
    pub fn evaluate_point(&self, field: &Field, x: f64, y: f64) -> Option<f64> {
        let g = self.mesh.grid();
        let fx = (x - g.origin[0]) / g.spacing[0];
        let fy = (y - g.origin[1]) / g.spacing[1];
        let tol = 1e-12;
        if fx < -tol || fy < -tol || fx > g.nx as f64 + tol || fy > g.ny as f64 + tol {
            return None;
        }
        let i = (fx.floor().max(0.0) as usize).min(g.nx - 1);
        let j = (fy.floor().max(0.0) as usize).min(g.ny - 1);
        // On a shared edge, prefer whichever neighbouring cell exists.
        let candidates = [(i, j), (i.saturating_sub(1), j), (i, j.saturating_sub(1)), (i.saturating_sub(1), j.saturating_sub(1))];
        for (ci, cj) in candidates {
            let xi = fx - ci as f64;
            let eta = fy - cj as f64;
            if !(-tol..=1.0 + tol).contains(&xi) || !(-tol..=1.0 + tol).contains(&eta) {
                continue;
            }
            if let Some(c) = self.cell_at[cj * g.nx + ci] {
                let (vals, _) = reference_basis(self.degree, xi, eta);
                let dofs = self.cell_dofs(c);
                return Some(vals.iter().zip(dofs).map(|(v, &d)| v * field.values[d]).sum());
            }
        }
        None
    }

    /// Assembles the generic form cell by cell. Element contributions are
    /// computed in parallel (per the space's execution mode) and summed into
    /// the fixed pattern in cell order, so the result does not depend on
    /// the execution mode.
    pub fn assemble_form<F>(&self, coeff: F) -> LinearSystem
    where
        F: Fn(usize) -> QpCoefficients + Sync,
    {
        let nq = self.nq();
        let nloc = self.nloc;
        let locals = par::map_indexed(self.exec, self.mesh.num_cells(), |c| {
            let mut ke = vec![0.0; nloc * nloc];
            let mut fe = vec![0.0; nloc];
            for q in 0..nq {
                let gq = c * nq + q;
                let k = coeff(gq);
                let w = self.jxw[gq];
                let sh = &self.shape[q * nloc..(q + 1) * nloc];
                let gr = &self.grads[gq * nloc..(gq + 1) * nloc];
                for i in 0..nloc {
                    fe[i] += w * (k.source * sh[i] + k.flux[0] * gr[i][0] + k.flux[1] * gr[i][1]);
                    for j in 0..nloc {
                        // Operand order keeps the element matrix bitwise symmetric.
                        let mass = k.mass * (sh[i] * sh[j]);
                        let stiff = k.diffusion * (gr[i][0] * gr[j][0] + gr[i][1] * gr[j][1]);
                        ke[i * nloc + j] += w * (mass + stiff);
                    }
                }
            }
            (ke, fe)
        });
        let mut matrix = SparseMatrix::with_pattern(
            self.n_dofs,
            self.pattern.row_ptr.clone(),
            self.pattern.col_idx.clone(),
        );
        let mut rhs = vec![0.0; self.n_dofs];
        {
            let vals = matrix.values_mut();
            for (c, (ke, fe)) in locals.iter().enumerate() {
                let dofs = self.cell_dofs(c);
                let scatter = &self.pattern.scatter[c * nloc * nloc..(c + 1) * nloc * nloc];
                for (k, &pos) in scatter.iter().enumerate() {
                    vals[pos] += ke[k];
                }
                for i in 0..nloc {
                    rhs[dofs[i]] += fe[i];
                }
            }
        }
        LinearSystem { matrix, rhs }
    }

    /// Adds `∫_e g φ_i ds` over the boundary edges carrying one of `tags`.
    /// `g` receives the edge index and the edge quadrature index.
    pub fn add_edge_load(&self, rhs: &mut [f64], tags: &[BoundaryTag], g: impl Fn(usize, usize) -> f64) {
        let nloc = self.nloc;
        for (ei, e) in self.edges.iter().enumerate() {
            if !tags.contains(&e.tag) {
                continue;
            }
            let dofs = self.cell_dofs(e.cell);
            for k in 0..self.nq_edge() {
                let gv = g(ei, k) * e.weights[k];
                let sh = &e.shape[k * nloc..(k + 1) * nloc];
                for i in 0..nloc {
                    rhs[dofs[i]] += gv * sh[i];
                }
            }
        }
    }
}

fn side_local_indices(p: usize, side: CellSide) -> Vec<(usize, usize)> {
    (0..=p)
        .map(|t| match side {
            CellSide::Bottom => (t, 0),
            CellSide::Right => (p, t),
            CellSide::Top => (t, p),
            CellSide::Left => (0, t),
        })
        .collect()
}

fn build_pattern(n_dofs: usize, nloc: usize, cell_dofs: &[usize]) -> Pattern {
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_dofs];
    for dofs in cell_dofs.chunks(nloc) {
        for &i in dofs {
            rows[i].extend_from_slice(dofs);
        }
    }
    let mut row_ptr = Vec::with_capacity(n_dofs + 1);
    let mut col_idx = Vec::new();
    row_ptr.push(0);
    for r in &mut rows {
        r.sort_unstable();
        r.dedup();
        col_idx.extend_from_slice(r);
        row_ptr.push(col_idx.len());
    }
    let mut scatter = Vec::with_capacity(cell_dofs.len() * nloc);
    for dofs in cell_dofs.chunks(nloc) {
        for &i in dofs {
            let row = &col_idx[row_ptr[i]..row_ptr[i + 1]];
            for &j in dofs {
                scatter.push(row_ptr[i] + row.binary_search(&j).expect("pattern covers cell couplings"));
            }
        }
    }
    Pattern {
        row_ptr,
        col_idx,
        scatter,
    }
}

/// Symmetric elimination of prescribed dofs: constrained rows and columns
/// become identity, the right-hand side absorbs the known values and the
/// resulting stored zeros are pruned.
pub fn apply_dirichlet(system: &mut LinearSystem, dofs: &[usize], values: &[f64]) {
    assert_eq!(dofs.len(), values.len());
    if dofs.is_empty() {
        return;
    }
    let n = system.matrix.dim();
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for (&d, &v) in dofs.iter().zip(values) {
        fixed[d] = Some(v);
    }
    let row_ptr = system.matrix.row_ptr().to_vec();
    let col_idx = system.matrix.col_idx().to_vec();
    let vals = system.matrix.values_mut();
    for row in 0..n {
        let range = row_ptr[row]..row_ptr[row + 1];
        match fixed[row] {
            Some(g) => {
                for k in range {
                    vals[k] = if col_idx[k] == row { 1.0 } else { 0.0 };
                }
                system.rhs[row] = g;
            }
            None => {
                for k in range {
                    if let Some(g) = fixed[col_idx[k]] {
                        system.rhs[row] -= vals[k] * g;
                        vals[k] = 0.0;
                    }
                }
            }
        }
    }
    system.matrix.prune_zeros();
}

pub type ScalarFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Prescribed boundary value, possibly depending on position and time.
#[derive(Clone)]
pub enum BoundaryValue {
    Constant(f64),
    Function(ScalarFn),
}

impl BoundaryValue {
    pub fn eval(&self, x: f64, y: f64, t: f64) -> f64 {
        match self {
            BoundaryValue::Constant(c) => *c,
            BoundaryValue::Function(f) => f(x, y, t),
        }
    }
}

impl fmt::Debug for BoundaryValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryValue::Constant(c) => write!(f, "Constant({c})"),
            BoundaryValue::Function(_) => f.write_str("Function"),
        }
    }
}

/// Boundary conditions of the pressure/saturation pair. Edges not listed
/// under a Dirichlet tag carry zero natural flux, except that tags in
/// `outflow` keep the aqueous advective flux `⟨λ_a κ ∇p · n, w⟩` in the
/// saturation equation.
#[derive(Clone, Debug, Default)]
pub struct BoundaryConditions {
    pub pressure: Vec<(BoundaryTag, BoundaryValue)>,
    pub saturation: Vec<(BoundaryTag, BoundaryValue)>,
    pub outflow: Vec<BoundaryTag>,
    /// Pins one pressure dof when no pressure Dirichlet data is given.
    pub pressure_reference: Option<(usize, f64)>,
}

impl BoundaryConditions {
    /// Dirichlet data everywhere from the given exact fields.
    pub fn dirichlet_all(pressure: ScalarFn, saturation: ScalarFn) -> Self {
        BoundaryConditions {
            pressure: vec![(BoundaryTag::DirichletAll, BoundaryValue::Function(pressure))],
            saturation: vec![(BoundaryTag::DirichletAll, BoundaryValue::Function(saturation))],
            outflow: Vec::new(),
            pressure_reference: None,
        }
    }

    /// Injection on Γ1, production on Γ4, no flow elsewhere.
    pub fn quarter_five_spot() -> Self {
        BoundaryConditions {
            pressure: vec![
                (BoundaryTag::Gamma1, BoundaryValue::Constant(3e5)),
                (BoundaryTag::Gamma4, BoundaryValue::Constant(1e5)),
            ],
            saturation: vec![(BoundaryTag::Gamma1, BoundaryValue::Constant(0.7))],
            outflow: vec![BoundaryTag::Gamma4],
            pressure_reference: None,
        }
    }

    /// Closed system; the pressure level is fixed by pinning dof 0 to 0.
    pub fn no_flow() -> Self {
        BoundaryConditions {
            pressure_reference: Some((0, 0.0)),
            ..Default::default()
        }
    }

    fn collect(
        space: &FeSpace,
        list: &[(BoundaryTag, BoundaryValue)],
        t: f64,
    ) -> Result<(Vec<usize>, Vec<f64>), SpatialError> {
        let mut seen = vec![false; space.n_dofs()];
        let mut dofs = Vec::new();
        let mut values = Vec::new();
        for (tag, value) in list {
            for &d in space.boundary_dofs(*tag)? {
                if !seen[d] {
                    seen[d] = true;
                    let x = space.dof_coords()[d];
                    dofs.push(d);
                    values.push(value.eval(x[0], x[1], t));
                }
            }
        }
        Ok((dofs, values))
    }

    pub fn pressure_dirichlet(&self, space: &FeSpace, t: f64) -> Result<(Vec<usize>, Vec<f64>), SpatialError> {
        let (mut dofs, mut values) = Self::collect(space, &self.pressure, t)?;
        if let Some((d, v)) = self.pressure_reference {
            if !dofs.contains(&d) {
                dofs.push(d);
                values.push(v);
            }
        }
        Ok((dofs, values))
    }

    pub fn saturation_dirichlet(&self, space: &FeSpace, t: f64) -> Result<(Vec<usize>, Vec<f64>), SpatialError> {
        Self::collect(space, &self.saturation, t)
    }

    /// Writes the Dirichlet values of both unknowns at time `t` into the
    /// given fields.
    pub fn impose(&self, space: &FeSpace, p: &mut Field, s: &mut Field, t: f64) -> Result<(), SpatialError> {
        let (dp, vp) = self.pressure_dirichlet(space, t)?;
        for (d, v) in dp.into_iter().zip(vp) {
            p.values[d] = v;
        }
        let (ds, vs) = self.saturation_dirichlet(space, t)?;
        for (d, v) in ds.into_iter().zip(vs) {
            s.values[d] = v;
        }
        Ok(())
    }
}

/// Source terms `q` (total) and `q_a` (aqueous).
#[derive(Clone, Default)]
pub struct Sources {
    pub q: Option<ScalarFn>,
    pub q_a: Option<ScalarFn>,
}

impl fmt::Debug for Sources {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Sources")
            .field("q", &self.q.is_some())
            .field("q_a", &self.q_a.is_some())
            .finish()
    }
}

impl Sources {
    pub fn none() -> Self {
        Sources::default()
    }

    /// `(q, q_a)` at every quadrature point at time `t`.
    pub fn at_quadrature(&self, space: &FeSpace, t: f64) -> (Vec<f64>, Vec<f64>) {
        let eval = |f: &Option<ScalarFn>| match f {
            Some(f) => space.quadrature_points().iter().map(|x| f(x[0], x[1], t)).collect(),
            None => vec![0.0; space.jxw().len()],
        };
        (eval(&self.q), eval(&self.q_a))
    }
}

/// Per-quadrature-point coefficients of the pressure equation
/// `(λκ∇p, ∇v) = (q, v) + (λ_a κ ∇p_c, ∇v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureCoefficients {
    /// `λκ`.
    pub mobility: Vec<f64>,
    /// `λ_a κ ∇p_c`.
    pub capillary_flux: Vec<[f64; 2]>,
}

impl PressureCoefficients {
    /// Coefficients frozen at the saturation `s`.
    pub fn frozen(space: &FeSpace, model: &FluidModel, s: &QuadValues) -> Self {
        let nq = space.nq();
        let n = s.values.len();
        let mut mobility = Vec::with_capacity(n);
        let mut capillary_flux = Vec::with_capacity(n);
        for gq in 0..n {
            let kappa = space.mesh().permeability(gq / nq);
            let sv = s.values[gq];
            let g = s.grads[gq];
            let la = model.lambda_aqueous(sv);
            mobility.push(kappa * (model.lambda_liquid(sv) + la));
            let c = kappa * la * model.dpc(sv);
            capillary_flux.push([c * g[0], c * g[1]]);
        }
        PressureCoefficients {
            mobility,
            capillary_flux,
        }
    }
}

/// Per-quadrature-point coefficients of the saturation equation
/// `(φ c s, w) + (K_a ∇s, ∇w) = (q_a, w) + (φ c s_hist, w) − (B_a ∇p, ∇w)
///  + ⟨B_a ∇p·n, w⟩_outflow`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationCoefficients {
    /// `φ c`, with `c = 1/(θτ)` for θ-steps and `3/(2τ)` for BDF2.
    pub mass: f64,
    /// `s_hist` at quadrature points.
    pub history: Vec<f64>,
    /// `K_a = −λ_a κ p_c'`.
    pub diffusion: Vec<f64>,
    /// `B_a = λ_a κ`.
    pub advection: Vec<f64>,
    /// `B_a` at boundary-edge quadrature points.
    pub edge_advection: Vec<f64>,
}

impl SaturationCoefficients {
    /// Coefficients frozen at `s`, with mass rate `c` and history values.
    pub fn frozen(
        space: &FeSpace,
        model: &FluidModel,
        s: &QuadValues,
        s_edges: &EdgeValues,
        rate: f64,
        history: Vec<f64>,
    ) -> Result<Self, SpatialError> {
        if rate <= 0.0 || !rate.is_finite() {
            return Err(SpatialError::NonPositiveStep(rate));
        }
        let nq = space.nq();
        let mut diffusion = Vec::with_capacity(s.values.len());
        let mut advection = Vec::with_capacity(s.values.len());
        for (gq, &sv) in s.values.iter().enumerate() {
            let b = space.mesh().permeability(gq / nq) * model.lambda_aqueous(sv);
            advection.push(b);
            diffusion.push(-b * model.dpc(sv));
        }
        let neq = space.nq_edge();
        let edge_advection = s_edges
            .values
            .iter()
            .enumerate()
            .map(|(k, &sv)| space.mesh().permeability(space.boundary_edges()[k / neq].cell) * model.lambda_aqueous(sv))
            .collect();
        Ok(SaturationCoefficients {
            mass: model.porosity * rate,
            history,
            diffusion,
            advection,
            edge_advection,
        })
    }
}

/// Pressure system with Dirichlet data at `t` applied.
pub fn assemble_pressure_with(
    space: &FeSpace,
    coeffs: &PressureCoefficients,
    q: &[f64],
    bc: &BoundaryConditions,
    t: f64,
) -> Result<LinearSystem, SpatialError> {
    let mut sys = space.assemble_form(|gq| QpCoefficients {
        mass: 0.0,
        diffusion: coeffs.mobility[gq],
        source: q[gq],
        flux: coeffs.capillary_flux[gq],
    });
    if sys.rhs.iter().any(|v| !v.is_finite()) || sys.matrix.values().iter().any(|v| !v.is_finite()) {
        return Err(SpatialError::NonFinite("pressure"));
    }
    let (dofs, values) = bc.pressure_dirichlet(space, t)?;
    apply_dirichlet(&mut sys, &dofs, &values);
    Ok(sys)
}

/// Saturation system with Dirichlet data at `t` applied.
pub fn assemble_saturation_with(
    space: &FeSpace,
    coeffs: &SaturationCoefficients,
    p_new: &QuadValues,
    p_new_edges: &EdgeValues,
    q_a: &[f64],
    bc: &BoundaryConditions,
    t: f64,
) -> Result<LinearSystem, SpatialError> {
    let mut sys = space.assemble_form(|gq| {
        let b = coeffs.advection[gq];
        let g = p_new.grads[gq];
        QpCoefficients {
            mass: coeffs.mass,
            diffusion: coeffs.diffusion[gq],
            source: q_a[gq] + coeffs.mass * coeffs.history[gq],
            flux: [-b * g[0], -b * g[1]],
        }
    });
    if !bc.outflow.is_empty() {
        let neq = space.nq_edge();
        space.add_edge_load(&mut sys.rhs, &bc.outflow, |e, k| {
            let n = space.boundary_edges()[e].normal;
            let g = p_new_edges.grads[e * neq + k];
            coeffs.edge_advection[e * neq + k] * (g[0] * n[0] + g[1] * n[1])
        });
    }
    if sys.rhs.iter().any(|v| !v.is_finite()) || sys.matrix.values().iter().any(|v| !v.is_finite()) {
        return Err(SpatialError::NonFinite("saturation"));
    }
    let (dofs, values) = bc.saturation_dirichlet(space, t)?;
    apply_dirichlet(&mut sys, &dofs, &values);
    Ok(sys)
}

/// Pressure system with coefficients frozen at `s_frozen` and sources at `t`.
pub fn assemble_pressure(
    space: &FeSpace,
    model: &FluidModel,
    s_frozen: &Field,
    sources: &Sources,
    bc: &BoundaryConditions,
    t: f64,
) -> Result<LinearSystem, SpatialError> {
    space.check(s_frozen)?;
    let coeffs = PressureCoefficients::frozen(space, model, &space.evaluate_at_quadrature(s_frozen));
    let (q, _) = sources.at_quadrature(space, t);
    assemble_pressure_with(space, &coeffs, &q, bc, t)
}

/// Implicit-Euler saturation system over a step of length `theta_tau`
/// with coefficients frozen at `s_frozen`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_saturation(
    space: &FeSpace,
    model: &FluidModel,
    s_frozen: &Field,
    s_prev: &Field,
    p_new: &Field,
    theta_tau: f64,
    sources: &Sources,
    bc: &BoundaryConditions,
    t: f64,
) -> Result<LinearSystem, SpatialError> {
    space.check(s_frozen)?;
    space.check(s_prev)?;
    space.check(p_new)?;
    if theta_tau.is_nan() || theta_tau <= 0.0 {
        return Err(SpatialError::NonPositiveStep(theta_tau));
    }
    let coeffs = SaturationCoefficients::frozen(
        space,
        model,
        &space.evaluate_at_quadrature(s_frozen),
        &space.evaluate_on_edges(s_frozen),
        1.0 / theta_tau,
        space.evaluate_at_quadrature(s_prev).values,
    )?;
    let (_, q_a) = sources.at_quadrature(space, t);
    assemble_saturation_with(
        space,
        &coeffs,
        &space.evaluate_at_quadrature(p_new),
        &space.evaluate_on_edges(p_new),
        &q_a,
        bc,
        t,
    )
}

/// `‖u_h − u‖_{L²(Ω)}` by quadrature.
pub fn l2_error(space: &FeSpace, field: &Field, exact: impl Fn(f64, f64) -> f64) -> f64 {
    let qv = space.evaluate_at_quadrature(field);
    let pts = space.quadrature_points();
    space
        .integrate(|gq| {
            let d = qv.values[gq] - exact(pts[gq][0], pts[gq][1]);
            d * d
        })
        .sqrt()
}

pub fn l2_norm(space: &FeSpace, field: &Field) -> f64 {
    let qv = space.evaluate_at_quadrature(field);
    space.integrate(|gq| qv.values[gq] * qv.values[gq]).sqrt()
}

/// `‖a − b‖_{L²(Ω)}`.
pub fn l2_distance(space: &FeSpace, a: &Field, b: &Field) -> f64 {
    l2_norm(space, &a.sub(b))
}

/// Free energy density summed with the cell quadrature:
/// `Σ_q w_q φ F(s(x_q))`.
pub fn energy_from_quadrature(space: &FeSpace, params: &EnergyParams, porosity: f64, s: &QuadValues) -> f64 {
    space.integrate(|gq| porosity * params.free_energy(s.values[gq]))
}

/// `E(s) = ∫_Ω φ F(s) dx`.
pub fn energy_integral(space: &FeSpace, params: &EnergyParams, porosity: f64, s: &Field) -> f64 {
    energy_from_quadrature(space, params, porosity, &space.evaluate_at_quadrature(s))
}

/// Legacy-VTK dump of dof fields. Q2 cells are split into four linear
/// sub-quads so every dof is a point.
pub fn write_vtk(space: &FeSpace, fields: &[(&str, &Field)], mut w: impl Write) -> io::Result<()> {
    let p = space.degree();
    let n1 = p + 1;
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "twophase fields")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {} double", space.n_dofs())?;
    for x in space.dof_coords() {
        writeln!(w, "{:.12e} {:.12e} 0", x[0], x[1])?;
    }
    let ncells = space.mesh().num_cells() * p * p;
    writeln!(w, "CELLS {} {}", ncells, ncells * 5)?;
    for c in 0..space.mesh().num_cells() {
        let d = space.cell_dofs(c);
        for b in 0..p {
            for a in 0..p {
                let idx = |a: usize, b: usize| d[a + n1 * b];
                writeln!(w, "4 {} {} {} {}", idx(a, b), idx(a + 1, b), idx(a + 1, b + 1), idx(a, b + 1))?;
            }
        }
    }
    writeln!(w, "CELL_TYPES {ncells}")?;
    for _ in 0..ncells {
        writeln!(w, "9")?;
    }
    writeln!(w, "POINT_DATA {}", space.n_dofs())?;
    for (name, f) in fields {
        writeln!(w, "SCALARS {name} double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for v in &f.values {
            writeln!(w, "{v:.12e}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{self, Factorization};
    use crate::physics::{CapillaryModel, RelativePermeability};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_space(n: usize, p: usize) -> FeSpace {
        FeSpace::new(Arc::new(Mesh::unit_square(n).unwrap()), p).unwrap()
    }

    /// Poisson problem `−Δu = f` with Dirichlet data from `u`.
    fn solve_poisson(space: &FeSpace, u: &(dyn Fn(f64, f64) -> f64 + Sync), f: &(dyn Fn(f64, f64) -> f64 + Sync)) -> Field {
        let pts = space.quadrature_points();
        let mut sys = space.assemble_form(|gq| QpCoefficients {
            diffusion: 1.0,
            source: f(pts[gq][0], pts[gq][1]),
            ..Default::default()
        });
        let dofs = space.boundary_dofs(BoundaryTag::DirichletAll).unwrap().to_vec();
        let values: Vec<f64> = dofs.iter().map(|&d| u(space.dof_coords()[d][0], space.dof_coords()[d][1])).collect();
        apply_dirichlet(&mut sys, &dofs, &values);
        assert_eq!(sys.matrix.max_asymmetry(), 0.0);
        let (x, report) = linalg::solve(&sys.matrix, &sys.rhs).unwrap();
        assert_eq!(report.factorization, Factorization::Cholesky);
        Field { values: x }
    }

    #[test]
    fn gauss_rules_integrate_polynomials() {
        for n in 1..=5 {
            let (x, w) = gauss_1d(n);
            for k in 0..2 * n {
                let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
                assert!((integral - 1.0 / (k as f64 + 1.0)).abs() < 1e-14, "n={n} k={k}");
            }
        }
        let r = QuadratureRule::default();
        assert_eq!(r.len(), 9);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dof_counts() {
        assert_eq!(unit_space(4, 1).n_dofs(), 25);
        assert_eq!(unit_space(4, 2).n_dofs(), 81);
        let q5 = FeSpace::new(Arc::new(Mesh::quarter_five_spot(20).unwrap()), 2).unwrap();
        // Each removed corner cell drops the 4 of its 9 lattice points not
        // shared with a kept cell.
        assert_eq!(q5.n_dofs(), 41 * 41 - 2 * 4);
        assert!(q5.boundary_dofs(BoundaryTag::Gamma1).unwrap().len() == 5);
    }

    #[test]
    fn patch_test_reproduces_polynomials() {
        let s1 = unit_space(5, 1);
        let u1 = |x: f64, y: f64| 1.0 + 2.0 * x - y + 3.0 * x * y;
        let f1 = |_: f64, _: f64| 0.0;
        let sol = solve_poisson(&s1, &u1, &f1);
        for (d, x) in s1.dof_coords().iter().enumerate() {
            assert!((sol.values[d] - u1(x[0], x[1])).abs() < 1e-12);
        }

        let s2 = unit_space(4, 2);
        let u2 = |x: f64, y: f64| 1.0 + 2.0 * x - y + 0.5 * x * x + x * y - y * y;
        let f2 = |_: f64, _: f64| 1.0;
        let sol = solve_poisson(&s2, &u2, &f2);
        for (d, x) in s2.dof_coords().iter().enumerate() {
            assert!((sol.values[d] - u2(x[0], x[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_convergence_orders() {
        use std::f64::consts::PI;
        let u = |x: f64, y: f64| (PI * x).sin() * (PI * y).sin() + x * x;
        let f = |x: f64, y: f64| 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin() - 2.0;
        for (p, lo) in [(1usize, 1.9), (2, 2.9)] {
            let errs: Vec<f64> = [4, 8, 16]
                .iter()
                .map(|&n| {
                    let space = unit_space(n, p);
                    let sol = solve_poisson(&space, &u, &f);
                    l2_error(&space, &sol, u)
                })
                .collect();
            let rate = (errs[1] / errs[2]).log2();
            assert!(rate > lo && rate < lo + 0.35, "degree {p}: rate {rate} errs {errs:?}");
        }
    }

    #[test]
    fn quadratic_pressure_order_two() {
        // λκ constant, quadratic exact pressure.
        let u = |x: f64, y: f64| x * x + 0.5 * y * y - x * y;
        let f = |_: f64, _: f64| -3.0;
        let errs: Vec<f64> = [4, 8, 16]
            .iter()
            .map(|&n| {
                let space = unit_space(n, 1);
                let sol = solve_poisson(&space, &u, &f);
                l2_error(&space, &sol, u)
            })
            .collect();
        let rate = (errs[1] / errs[2]).log2();
        assert!((rate - 2.0).abs() < 0.1, "{rate}");
    }

    #[test]
    fn pressure_system_symmetric_positive_definite() {
        let space = unit_space(6, 2);
        let model = FluidModel::manufactured();
        let s = Field::interpolate(&space, |x, y| 0.2 + 0.3 * x * y);
        let bc = BoundaryConditions::dirichlet_all(Arc::new(|_, _, _| 1.0), Arc::new(|_, _, _| 0.5));
        let sys = assemble_pressure(&space, &model, &s, &Sources::none(), &bc, 0.0).unwrap();
        assert_eq!(sys.matrix.max_asymmetry(), 0.0);
        assert!(sys.matrix.values().iter().all(|&v| v != 0.0));
        let (_, report) = linalg::solve(&sys.matrix, &sys.rhs).unwrap();
        assert_eq!(report.factorization, Factorization::Cholesky);
    }

    #[test]
    fn pure_mass_identity() {
        let space = unit_space(5, 1);
        let mut model = FluidModel::manufactured();
        model.capillary = CapillaryModel::Linear {
            intercept: 0.0,
            slope: 0.0,
        };
        model.relperm = RelativePermeability::Constant {
            liquid: 1.0,
            aqueous: 0.0,
        };
        let s_prev = Field::interpolate(&space, |x, y| 0.3 + 0.1 * (3.0 * x).sin() * y);
        let p = Field::interpolate(&space, |x, y| x + y * y);
        let sys = assemble_saturation(
            &space,
            &model,
            &s_prev,
            &s_prev,
            &p,
            0.1,
            &Sources::none(),
            &BoundaryConditions::default(),
            0.0,
        )
        .unwrap();
        let (s, _) = linalg::solve(&sys.matrix, &sys.rhs).unwrap();
        for (a, b) in s.iter().zip(&s_prev.values) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(assemble_saturation(&space, &model, &s_prev, &s_prev, &p, 0.0, &Sources::none(), &BoundaryConditions::default(), 0.0).is_err());
    }

    #[test]
    fn stiffness_rows_sum_to_zero() {
        let space = unit_space(4, 2);
        let sys = space.assemble_form(|gq| QpCoefficients {
            diffusion: 1.0 + gq as f64 * 1e-3,
            ..Default::default()
        });
        for row in 0..space.n_dofs() {
            let (_, vals) = sys.matrix.row(row);
            let sum: f64 = vals.iter().sum();
            assert!(sum.abs() < 1e-12, "row {row}: {sum}");
        }
    }

    #[test]
    fn dirichlet_elimination() {
        let space = unit_space(3, 1);
        let sys0 = space.assemble_form(|_| QpCoefficients {
            mass: 1.0,
            diffusion: 1.0,
            source: 1.0,
            ..Default::default()
        });
        let mut sys = sys0.clone();
        apply_dirichlet(&mut sys, &[], &[]);
        assert_eq!(sys, sys0);

        apply_dirichlet(&mut sys, &[5], &[2.5]);
        let (x, _) = linalg::solve(&sys.matrix, &sys.rhs).unwrap();
        assert_eq!(x[5], 2.5);
        assert_eq!(sys.matrix.max_asymmetry(), 0.0);
        let (cols, vals) = sys.matrix.row(5);
        assert_eq!((cols, vals), (&[5usize][..], &[1.0][..]));
    }

    #[test]
    fn norms() {
        let space = unit_space(4, 1);
        let zero = Field::zeros(&space);
        assert_eq!(l2_error(&space, &zero, |_, _| 0.0), 0.0);
        let c = Field::constant(&space, -3.0);
        assert!((l2_error(&space, &c, |_, _| 0.0) - 3.0).abs() < 1e-14);
        let rect = FeSpace::new(Arc::new(Mesh::rectangle(2.0, 3.0, 3, 4, 1.0).unwrap()), 2).unwrap();
        let c = Field::constant(&rect, 0.5);
        assert!((l2_norm(&rect, &c) - 0.5 * 6f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn interpolation_orders() {
        let u = |x: f64, y: f64| (2.0 * x).sin() * (1.0 + y).exp();
        for p in [1usize, 2] {
            let e: Vec<f64> = [4, 8, 16]
                .iter()
                .map(|&n| {
                    let s = unit_space(n, p);
                    l2_error(&s, &Field::interpolate(&s, u), u)
                })
                .collect();
            let rate = (e[1] / e[2]).log2();
            assert!((rate - (p as f64 + 1.0)).abs() < 0.1, "p={p} rate={rate}");
        }
    }

    #[test]
    fn energy_integral_values() {
        let g = EnergyParams::new(1.368, 0.0, 0.0);
        let space = unit_space(4, 1);
        let s = Field::constant(&space, 0.5);
        let e = energy_integral(&space, &g, 0.2, &s);
        assert!((e - (-0.231_622_534_300_600_5)).abs() < 1e-13);
        assert_eq!(energy_integral(&space, &EnergyParams::zero(), 0.2, &s), 0.0);
        let other = unit_space(7, 2);
        let e2 = energy_integral(&other, &g, 0.2, &Field::constant(&other, 0.5));
        assert!((e - e2).abs() < 1e-14);
    }

    #[test]
    fn quadrature_evaluation() {
        let space = unit_space(3, 2);
        let lin = Field::interpolate(&space, |x, y| 2.0 * x - 3.0 * y + 1.0);
        let qv = space.evaluate_at_quadrature(&lin);
        for (gq, g) in qv.grads.iter().enumerate() {
            assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] + 3.0).abs() < 1e-12);
            let x = space.quadrature_points()[gq];
            assert!((qv.values[gq] - (2.0 * x[0] - 3.0 * x[1] + 1.0)).abs() < 1e-13);
        }
        let c = space.evaluate_at_quadrature(&Field::constant(&space, 4.0));
        assert!(c.grads.iter().all(|g| g[0].abs() < 1e-12 && g[1].abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Field {
            values: (0..space.n_dofs()).map(|_| rng.random::<f64>()).collect(),
        };
        let qv = space.evaluate_at_quadrature(&r);
        let h = 1e-6;
        for gq in [0, 7, 40, 80] {
            let x = space.quadrature_points()[gq];
            let fx = (space.evaluate_point(&r, x[0] + h, x[1]).unwrap() - space.evaluate_point(&r, x[0] - h, x[1]).unwrap()) / (2.0 * h);
            let fy = (space.evaluate_point(&r, x[0], x[1] + h).unwrap() - space.evaluate_point(&r, x[0], x[1] - h).unwrap()) / (2.0 * h);
            assert!((qv.grads[gq][0] - fx).abs() < 1e-6 && (qv.grads[gq][1] - fy).abs() < 1e-6);
            assert!((space.evaluate_point(&r, x[0], x[1]).unwrap() - qv.values[gq]).abs() < 1e-13);
        }
    }

    #[test]
    fn edge_normals_and_lengths() {
        let space = FeSpace::new(Arc::new(Mesh::quarter_five_spot(20).unwrap()), 2).unwrap();
        let mut perimeter = 0.0;
        for e in space.boundary_edges() {
            perimeter += e.weights.iter().sum::<f64>();
            let n = e.normal;
            assert!((n[0] * n[0] + n[1] * n[1] - 1.0).abs() < 1e-14);
        }
        assert!((perimeter - 400.0).abs() < 1e-10);
        // Divergence theorem: ∫_∂Ω x n_x ds = |Ω|.
        let x = Field::interpolate(&space, |x, _| x);
        let ev = space.evaluate_on_edges(&x);
        let mut flux = 0.0;
        for (ei, e) in space.boundary_edges().iter().enumerate() {
            for k in 0..space.nq_edge() {
                flux += e.weights[k] * ev.values[ei * 3 + k] * e.normal[0];
                assert!((ev.grads[ei * 3 + k][0] - 1.0).abs() < 1e-12);
            }
        }
        assert!((flux - space.mesh().area()).abs() < 1e-8);
    }

    #[test]
    fn parallel_matches_serial() {
        let mesh = Arc::new(Mesh::unit_square(12).unwrap());
        let serial = FeSpace::new(Arc::clone(&mesh), 2).unwrap().with_execution(Execution::Serial);
        let parallel = FeSpace::new(mesh, 2).unwrap().with_execution(Execution::Parallel);
        let model = FluidModel::manufactured();
        let s = Field::interpolate(&serial, |x, y| 0.3 + 0.2 * x * y);
        let bc = BoundaryConditions::dirichlet_all(Arc::new(|_, _, _| 0.0), Arc::new(|_, _, _| 0.3));
        let a = assemble_pressure(&serial, &model, &s, &Sources::none(), &bc, 0.0).unwrap();
        let b = assemble_pressure(&parallel, &model, &s, &Sources::none(), &bc, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vtk_fields() {
        let space = unit_space(2, 2);
        let f = Field::constant(&space, 1.0);
        let mut buf = Vec::new();
        write_vtk(&space, &[("s", &f)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("POINTS 25 double"));
        assert!(text.contains("CELLS 16 80"));
        assert!(text.contains("POINT_DATA 25"));
    }
}

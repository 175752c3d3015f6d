//! Structured quadrilateral meshes with tagged boundaries and per-cell
//! permeability.
//!
//! Meshes are tensor-product grids over a rectangle from which whole cells
//! may be removed (the cut corners of the quarter-five-spot domain). Cells
//! keep their lattice position so finite element spaces of any degree can
//! number their degrees of freedom on a refined lattice.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

/// Side length of the quarter-five-spot square, in meters.
pub const Q5SPOT_SIDE: f64 = 100.0;
/// Side length of each removed corner square, in meters.
pub const Q5SPOT_CORNER: f64 = 5.0;
/// Background permeability of the quarter-five-spot medium, m².
pub const Q5SPOT_KAPPA: f64 = 5.0e-8;
/// Permeability inside the low-permeability block, m².
pub const Q5SPOT_KAPPA_LOW: f64 = 5.0e-11;
/// Low-permeability block `[25, 50] x [25, 50]`.
pub const Q5SPOT_LOW_BLOCK: [f64; 2] = [25.0, 50.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid mesh dimensions: {0}")]
    InvalidDimensions(String),
    #[error("corner squares of {corner} m do not align with cell size {cell_size} m")]
    MisalignedCorner { corner: f64, cell_size: f64 },
    #[error("boundary tag {0} does not occur on this mesh")]
    UnknownTag(BoundaryTag),
    #[error("mesh invariant violated: {0}")]
    Invalid(String),
}

/// Label attached to every boundary edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundaryTag {
    /// Whole boundary of a rectangle (manufactured-solution runs).
    DirichletAll,
    /// Cut corner at the origin (injection).
    Gamma1,
    /// Bottom side `y = 0`.
    Gamma2,
    /// Right side `x = 100`.
    Gamma3,
    /// Cut corner at `(100, 100)` (production).
    Gamma4,
    /// Top side `y = 100`.
    Gamma5,
    /// Left side `x = 0`.
    Gamma6,
}

impl BoundaryTag {
    pub const QUARTER_FIVE_SPOT: [BoundaryTag; 6] = [
        BoundaryTag::Gamma1,
        BoundaryTag::Gamma2,
        BoundaryTag::Gamma3,
        BoundaryTag::Gamma4,
        BoundaryTag::Gamma5,
        BoundaryTag::Gamma6,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoundaryTag::DirichletAll => "dirichlet_all",
            BoundaryTag::Gamma1 => "gamma1",
            BoundaryTag::Gamma2 => "gamma2",
            BoundaryTag::Gamma3 => "gamma3",
            BoundaryTag::Gamma4 => "gamma4",
            BoundaryTag::Gamma5 => "gamma5",
            BoundaryTag::Gamma6 => "gamma6",
        }
    }
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Side of a cell in counter-clockwise order starting at the bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellSide {
    Bottom,
    Right,
    Top,
    Left,
}

impl CellSide {
    pub const ALL: [CellSide; 4] = [CellSide::Bottom, CellSide::Right, CellSide::Top, CellSide::Left];

    /// Local corner indices `(a, b)` of the side, counter-clockwise.
    pub fn corners(self) -> (usize, usize) {
        match self {
            CellSide::Bottom => (0, 1),
            CellSide::Right => (1, 2),
            CellSide::Top => (2, 3),
            CellSide::Left => (3, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryEdge {
    /// End nodes, oriented counter-clockwise with respect to the owning cell.
    pub nodes: [usize; 2],
    pub cell: usize,
    pub side: CellSide,
    pub tag: BoundaryTag,
}

/// Lattice description of the underlying tensor-product grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub origin: [f64; 2],
    pub spacing: [f64; 2],
    pub nx: usize,
    pub ny: usize,
}

/// Realized geometry of a cut corner after aligning it with the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerCut {
    pub requested: f64,
    pub realized: f64,
    /// Removed cells along each side of the corner square.
    pub cells_per_side: usize,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<[f64; 2]>,
    cells: Vec<[usize; 4]>,
    boundary_edges: Vec<BoundaryEdge>,
    cell_permeability: Vec<f64>,
    grid: Grid,
    /// Lattice position `(i, j)` of each cell.
    cell_lattice: Vec<(usize, usize)>,
}

impl Mesh {
    /// Builds an `nx` by `ny` grid of `[0, x_extent] x [0, y_extent]` with
    /// uniform permeability and every boundary edge tagged
    /// [`BoundaryTag::DirichletAll`].
    pub fn rectangle(x_extent: f64, y_extent: f64, nx: usize, ny: usize, kappa: f64) -> Result<Self, MeshError> {
        check_dims(x_extent, y_extent, nx, ny)?;
        if kappa <= 0.0 || !kappa.is_finite() {
            return Err(MeshError::InvalidDimensions(format!("permeability {kappa} must be positive")));
        }
        let grid = Grid {
            origin: [0.0, 0.0],
            spacing: [x_extent / nx as f64, y_extent / ny as f64],
            nx,
            ny,
        };
        Self::from_grid(grid, |_, _| true, |_| kappa, |_, _| BoundaryTag::DirichletAll)
    }

    /// Unit square with `n` cells per side and unit permeability.
    pub fn unit_square(n: usize) -> Result<Self, MeshError> {
        Self::rectangle(1.0, 1.0, n, n, 1.0)
    }

    /// Quarter-five-spot domain `[0,100]² \ ([0,5]² ∪ [95,100]²)` with
    /// `n_per_side` cells per side. The 5 m corner squares must align with
    /// cell edges.
    pub fn quarter_five_spot(n_per_side: usize) -> Result<Self, MeshError> {
        if n_per_side == 0 {
            return Err(MeshError::InvalidDimensions("n_per_side must be positive".into()));
        }
        let h = Q5SPOT_SIDE / n_per_side as f64;
        let ratio = Q5SPOT_CORNER / h;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(MeshError::MisalignedCorner { corner: Q5SPOT_CORNER, cell_size: h });
        }
        Ok(Self::quarter_five_spot_snapped(n_per_side)?.0)
    }

    /// Quarter-five-spot domain where the corner squares are snapped to the
    /// nearest cell boundary (at least one cell). Returns the realized cut.
    pub fn quarter_five_spot_snapped(n_per_side: usize) -> Result<(Self, CornerCut), MeshError> {
        if n_per_side == 0 {
            return Err(MeshError::InvalidDimensions("n_per_side must be positive".into()));
        }
        let n = n_per_side;
        let h = Q5SPOT_SIDE / n as f64;
        let k = ((Q5SPOT_CORNER / h).round() as usize).max(1);
        if 2 * k >= n {
            return Err(MeshError::InvalidDimensions(format!("{n} cells per side leave no interior")));
        }
        let cut = CornerCut {
            requested: Q5SPOT_CORNER,
            realized: k as f64 * h,
            cells_per_side: k,
        };
        let grid = Grid {
            origin: [0.0, 0.0],
            spacing: [h, h],
            nx: n,
            ny: n,
        };
        let c = cut.realized;
        let far = Q5SPOT_SIDE - c;
        let tol = 1e-9 * Q5SPOT_SIDE;
        let mesh = Self::from_grid(
            grid,
            |i, j| !((i < k && j < k) || (i >= n - k && j >= n - k)),
            |center| {
                let [lo, hi] = Q5SPOT_LOW_BLOCK;
                if center[0] > lo && center[0] < hi && center[1] > lo && center[1] < hi {
                    Q5SPOT_KAPPA_LOW
                } else {
                    Q5SPOT_KAPPA
                }
            },
            |mid, _normal| {
                let [x, y] = mid;
                if ((x - c).abs() < tol && y < c) || ((y - c).abs() < tol && x < c) {
                    BoundaryTag::Gamma1
                } else if ((x - far).abs() < tol && y > far) || ((y - far).abs() < tol && x > far) {
                    BoundaryTag::Gamma4
                } else if y.abs() < tol {
                    BoundaryTag::Gamma2
                } else if (x - Q5SPOT_SIDE).abs() < tol {
                    BoundaryTag::Gamma3
                } else if (y - Q5SPOT_SIDE).abs() < tol {
                    BoundaryTag::Gamma5
                } else {
                    BoundaryTag::Gamma6
                }
            },
        )?;
        Ok((mesh, cut))
    }

    /// General constructor over a tensor grid. `keep(i, j)` selects cells,
    /// `kappa(center)` sets permeability and `tag(midpoint, outward_normal)`
    /// labels boundary edges.
    pub fn from_grid(
        grid: Grid,
        keep: impl Fn(usize, usize) -> bool,
        kappa: impl Fn([f64; 2]) -> f64,
        tag: impl Fn([f64; 2], [f64; 2]) -> BoundaryTag,
    ) -> Result<Self, MeshError> {
        let (nx, ny) = (grid.nx, grid.ny);
        let lattice_cells: Vec<(usize, usize)> = (0..ny)
            .flat_map(|j| (0..nx).map(move |i| (i, j)))
            .filter(|&(i, j)| keep(i, j))
            .collect();
        if lattice_cells.is_empty() {
            return Err(MeshError::InvalidDimensions("no cells selected".into()));
        }

        let stride = nx + 1;
        let mut used = vec![false; (nx + 1) * (ny + 1)];
        for &(i, j) in &lattice_cells {
            for (di, dj) in [(0, 0), (1, 0), (1, 1), (0, 1)] {
                used[(j + dj) * stride + i + di] = true;
            }
        }
        let mut node_id = vec![usize::MAX; used.len()];
        let mut nodes = Vec::new();
        for (lin, &u) in used.iter().enumerate() {
            if u {
                node_id[lin] = nodes.len();
                let (i, j) = (lin % stride, lin / stride);
                nodes.push([
                    grid.origin[0] + i as f64 * grid.spacing[0],
                    grid.origin[1] + j as f64 * grid.spacing[1],
                ]);
            }
        }

        let cells: Vec<[usize; 4]> = lattice_cells
            .iter()
            .map(|&(i, j)| {
                [
                    node_id[j * stride + i],
                    node_id[j * stride + i + 1],
                    node_id[(j + 1) * stride + i + 1],
                    node_id[(j + 1) * stride + i],
                ]
            })
            .collect();

        let cell_permeability: Vec<f64> = cells
            .iter()
            .map(|c| {
                let center = centroid(&[nodes[c[0]], nodes[c[1]], nodes[c[2]], nodes[c[3]]]);
                kappa(center)
            })
            .collect();

        // Edges owned by exactly one cell are boundary edges.
        let mut edge_owners: HashMap<(usize, usize), Vec<(usize, CellSide)>> = HashMap::new();
        for (ci, c) in cells.iter().enumerate() {
            for side in CellSide::ALL {
                let (a, b) = side.corners();
                let key = ordered(c[a], c[b]);
                edge_owners.entry(key).or_default().push((ci, side));
            }
        }
        let mut boundary_edges = Vec::new();
        for (ci, c) in cells.iter().enumerate() {
            for side in CellSide::ALL {
                let (a, b) = side.corners();
                if edge_owners[&ordered(c[a], c[b])].len() == 1 {
                    let (pa, pb) = (nodes[c[a]], nodes[c[b]]);
                    let mid = [(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0];
                    let len = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
                    let normal = [(pb[1] - pa[1]) / len, -(pb[0] - pa[0]) / len];
                    boundary_edges.push(BoundaryEdge {
                        nodes: [c[a], c[b]],
                        cell: ci,
                        side,
                        tag: tag(mid, normal),
                    });
                }
            }
        }

        let mesh = Mesh {
            nodes,
            cells,
            boundary_edges,
            cell_permeability,
            grid,
            cell_lattice: lattice_cells,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn cells(&self) -> &[[usize; 4]] {
        &self.cells
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn cell_permeability(&self) -> &[f64] {
        &self.cell_permeability
    }

    pub fn permeability(&self, cell: usize) -> f64 {
        self.cell_permeability[cell]
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Lattice position of a cell in the underlying grid.
    pub fn cell_lattice(&self, cell: usize) -> (usize, usize) {
        self.cell_lattice[cell]
    }

    pub fn cell_vertices(&self, cell: usize) -> [[f64; 2]; 4] {
        let c = self.cells[cell];
        [self.nodes[c[0]], self.nodes[c[1]], self.nodes[c[2]], self.nodes[c[3]]]
    }

    /// Cell area from the shoelace formula (exact for any straight-sided quad).
    pub fn cell_area(&self, cell: usize) -> f64 {
        let v = self.cell_vertices(cell);
        let mut twice = 0.0;
        for k in 0..4 {
            let (a, b) = (v[k], v[(k + 1) % 4]);
            twice += a[0] * b[1] - b[0] * a[1];
        }
        0.5 * twice
    }

    pub fn area(&self) -> f64 {
        (0..self.num_cells()).map(|c| self.cell_area(c)).sum()
    }

    /// Smallest cell edge length.
    pub fn min_cell_size(&self) -> f64 {
        self.grid.spacing[0].min(self.grid.spacing[1])
    }

    /// Distinct tags present on the boundary, sorted.
    pub fn tags(&self) -> Vec<BoundaryTag> {
        let mut tags: Vec<BoundaryTag> = self.boundary_edges.iter().map(|e| e.tag).collect();
        tags.sort();
        tags.dedup();
        tags
    }

    /// All boundary edges carrying `tag`. A tag absent from the mesh is an
    /// error.
    pub fn boundary_edges_with_tag(&self, tag: BoundaryTag) -> Result<Vec<&BoundaryEdge>, MeshError> {
        let edges: Vec<&BoundaryEdge> = self.boundary_edges.iter().filter(|e| e.tag == tag).collect();
        if edges.is_empty() {
            Err(MeshError::UnknownTag(tag))
        } else {
            Ok(edges)
        }
    }

    /// Checks the structural invariants: positive Jacobians at all corners,
    /// edge multiplicities, positive permeability.
    pub fn validate(&self) -> Result<(), MeshError> {
        for (ci, _) in self.cells.iter().enumerate() {
            let v = self.cell_vertices(ci);
            for k in 0..4 {
                let prev = v[(k + 3) % 4];
                let cur = v[k];
                let next = v[(k + 1) % 4];
                let e1 = [next[0] - cur[0], next[1] - cur[1]];
                let e2 = [prev[0] - cur[0], prev[1] - cur[1]];
                if e1[0] * e2[1] - e1[1] * e2[0] <= 0.0 {
                    return Err(MeshError::Invalid(format!("cell {ci} has non-positive Jacobian at corner {k}")));
                }
            }
        }
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for c in &self.cells {
            for side in CellSide::ALL {
                let (a, b) = side.corners();
                *count.entry(ordered(c[a], c[b])).or_default() += 1;
            }
        }
        if let Some((e, n)) = count.iter().find(|(_, &n)| n > 2) {
            return Err(MeshError::Invalid(format!("edge {e:?} shared by {n} cells")));
        }
        let boundary = count.values().filter(|&&n| n == 1).count();
        if boundary != self.boundary_edges.len() {
            return Err(MeshError::Invalid("boundary edge list out of sync".into()));
        }
        if let Some(ci) = self.cell_permeability.iter().position(|&k| k <= 0.0 || !k.is_finite()) {
            return Err(MeshError::Invalid(format!("cell {ci} has non-positive permeability")));
        }
        Ok(())
    }

    /// ASCII legacy-VTK unstructured grid with permeability as cell data.
    pub fn write_vtk(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "# vtk DataFile Version 3.0")?;
        writeln!(w, "twophase mesh")?;
        writeln!(w, "ASCII")?;
        writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
        writeln!(w, "POINTS {} double", self.nodes.len())?;
        for p in &self.nodes {
            writeln!(w, "{:.12e} {:.12e} 0", p[0], p[1])?;
        }
        writeln!(w, "CELLS {} {}", self.cells.len(), self.cells.len() * 5)?;
        for c in &self.cells {
            writeln!(w, "4 {} {} {} {}", c[0], c[1], c[2], c[3])?;
        }
        writeln!(w, "CELL_TYPES {}", self.cells.len())?;
        for _ in &self.cells {
            writeln!(w, "9")?;
        }
        writeln!(w, "CELL_DATA {}", self.cells.len())?;
        writeln!(w, "SCALARS permeability double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for k in &self.cell_permeability {
            writeln!(w, "{k:.12e}")?;
        }
        Ok(())
    }
}

fn check_dims(x_extent: f64, y_extent: f64, nx: usize, ny: usize) -> Result<(), MeshError> {
    if nx == 0 || ny == 0 {
        return Err(MeshError::InvalidDimensions(format!("cell counts must be positive, got {nx}x{ny}")));
    }
    if !(x_extent > 0.0 && y_extent > 0.0) || !x_extent.is_finite() || !y_extent.is_finite() {
        return Err(MeshError::InvalidDimensions(format!(
            "extents must be positive, got {x_extent}x{y_extent}"
        )));
    }
    Ok(())
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn centroid(v: &[[f64; 2]; 4]) -> [f64; 2] {
    [
        (v[0][0] + v[1][0] + v[2][0] + v[3][0]) / 4.0,
        (v[0][1] + v[1][1] + v[2][1] + v[3][1]) / 4.0,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangle_counts() {
        let m = Mesh::rectangle(1.0, 1.0, 2, 2, 1.0).unwrap();
        assert_eq!(m.num_cells(), 4);
        assert_eq!(m.num_nodes(), 9);

        let m = Mesh::rectangle(1.0, 1.0, 1, 1, 1.0).unwrap();
        assert_eq!(m.num_cells(), 1);
        assert_eq!(m.num_nodes(), 4);
        assert_eq!(m.boundary_edges().len(), 4);

        let m = Mesh::unit_square(64).unwrap();
        assert_eq!(m.num_cells(), 4096);
        assert_eq!(m.num_nodes(), 65 * 65);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(matches!(Mesh::rectangle(1.0, 1.0, 0, 2, 1.0), Err(MeshError::InvalidDimensions(_))));
        assert!(matches!(Mesh::rectangle(-1.0, 1.0, 2, 2, 1.0), Err(MeshError::InvalidDimensions(_))));
        assert!(matches!(Mesh::rectangle(1.0, 0.0, 2, 2, 1.0), Err(MeshError::InvalidDimensions(_))));
        assert!(Mesh::rectangle(1.0, 1.0, 2, 2, 0.0).is_err());
    }

    #[test]
    fn unit_square_all_dirichlet() {
        let n = 5;
        let m = Mesh::unit_square(n).unwrap();
        let edges = m.boundary_edges_with_tag(BoundaryTag::DirichletAll).unwrap();
        assert_eq!(edges.len(), 4 * n);
        assert!(m.boundary_edges_with_tag(BoundaryTag::Gamma1).is_err());
    }

    #[test]
    fn q5spot_20_geometry() {
        let m = Mesh::quarter_five_spot(20).unwrap();
        assert_eq!(m.num_cells(), 398);
        let area = m.area();
        let expected = 1.0e4 - 2.0 * 25.0;
        assert!(((area - expected) / expected).abs() < 1e-12);

        let g1 = m.boundary_edges_with_tag(BoundaryTag::Gamma1).unwrap();
        assert_eq!(g1.len(), 2);
        for e in &g1 {
            let mid = midpoint(&m, e);
            assert!((mid[0] - 5.0).abs() < 1e-9 || (mid[1] - 5.0).abs() < 1e-9);
            assert!(mid[0] <= 5.0 && mid[1] <= 5.0);
        }
        let g4 = m.boundary_edges_with_tag(BoundaryTag::Gamma4).unwrap();
        assert_eq!(g4.len(), 2);

        // Left side x = 0 runs from (0, 5) to (0, 100).
        let g6 = m.boundary_edges_with_tag(BoundaryTag::Gamma6).unwrap();
        assert_eq!(g6.len(), 19);
        for e in &g6 {
            let [a, b] = e.nodes;
            assert_eq!(m.nodes()[a][0], 0.0);
            assert_eq!(m.nodes()[b][0], 0.0);
            assert!(m.nodes()[a][1] >= 5.0 && m.nodes()[b][1] >= 5.0);
        }
        assert!(matches!(
            m.boundary_edges_with_tag(BoundaryTag::DirichletAll),
            Err(MeshError::UnknownTag(BoundaryTag::DirichletAll))
        ));
    }

    #[test]
    fn q5spot_tags_partition_boundary() {
        let m = Mesh::quarter_five_spot(20).unwrap();
        let total: usize = BoundaryTag::QUARTER_FIVE_SPOT
            .iter()
            .map(|&t| m.boundary_edges_with_tag(t).map(|e| e.len()).unwrap_or(0))
            .sum();
        assert_eq!(total, m.boundary_edges().len());
        // 4 sides of 20 cells each, minus the 2 cells removed at each cut
        // corner, plus the 2 cut-corner edges on each side of the diagonal.
        assert_eq!(total, 80);
    }

    #[test]
    fn q5spot_permeability_block() {
        let m = Mesh::quarter_five_spot(20).unwrap();
        let low = m.cell_permeability().iter().filter(|&&k| k == Q5SPOT_KAPPA_LOW).count();
        assert_eq!(low, 25);
        assert!(m.cell_permeability().iter().all(|&k| k == Q5SPOT_KAPPA || k == Q5SPOT_KAPPA_LOW));
    }

    #[test]
    fn q5spot_38_requires_snapping() {
        assert!(matches!(Mesh::quarter_five_spot(38), Err(MeshError::MisalignedCorner { .. })));
        let (m, cut) = Mesh::quarter_five_spot_snapped(38).unwrap();
        assert_eq!(cut.cells_per_side, 2);
        assert_eq!(m.num_cells(), 38 * 38 - 8);
        assert!((cut.realized - 200.0 / 38.0).abs() < 1e-12);
        // Every remaining cell lies outside the requested corner squares.
        for c in 0..m.num_cells() {
            let v = m.cell_vertices(c);
            let cx = (v[0][0] + v[2][0]) / 2.0;
            let cy = (v[0][1] + v[2][1]) / 2.0;
            assert!(!(cx < 5.0 && cy < 5.0));
            assert!(!(cx > 95.0 && cy > 95.0));
        }
    }

    #[test]
    fn interior_edges_shared_twice() {
        let m = Mesh::quarter_five_spot(20).unwrap();
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for c in m.cells() {
            for side in CellSide::ALL {
                let (a, b) = side.corners();
                *count.entry(ordered(c[a], c[b])).or_default() += 1;
            }
        }
        let interior = count.values().filter(|&&n| n == 2).count();
        let boundary = count.values().filter(|&&n| n == 1).count();
        assert_eq!(boundary, m.boundary_edges().len());
        assert_eq!(4 * m.num_cells(), 2 * interior + boundary);
    }

    #[test]
    fn refinement_quarters_cells() {
        let coarse = Mesh::rectangle(2.0, 3.0, 4, 3, 1.0).unwrap();
        let fine = Mesh::rectangle(2.0, 3.0, 8, 6, 1.0).unwrap();
        let a = coarse.cell_area(0);
        for c in 0..fine.num_cells() {
            assert!((fine.cell_area(c) - a / 4.0).abs() < 1e-14);
        }
    }

    #[test]
    fn vtk_dump_has_all_sections() {
        let m = Mesh::unit_square(2).unwrap();
        let mut buf = Vec::new();
        m.write_vtk(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("# vtk DataFile Version 3.0"));
        assert!(s.contains("POINTS 9 double"));
        assert!(s.contains("CELLS 4 20"));
        assert!(s.contains("CELL_TYPES 4"));
    }

    fn midpoint(m: &Mesh, e: &BoundaryEdge) -> [f64; 2] {
        let (a, b) = (m.nodes()[e.nodes[0]], m.nodes()[e.nodes[1]]);
        [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
    }
}

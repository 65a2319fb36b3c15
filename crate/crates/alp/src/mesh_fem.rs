//! Meshes (1D intervals, 2D triangulations), P1 finite-element assembly and
//! L2 inner products.
//!
//! Everything downstream (spectral decomposition, propagator assembly,
//! reconstruction) works on nodal fields over these meshes and on the mass /
//! stiffness matrices assembled here. Dirichlet conditions are imposed by
//! row/column elimination: the full matrices are kept and a free-node index
//! map provides the constrained views, so the constrained operators stay
//! symmetric.

use nalgebra::{DMatrix, DVector};

use crate::error::{AlpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryKind {
    Dirichlet,
    Neumann,
}

/// Element connectivity: segments in 1D, triangles in 2D.
#[derive(Debug, Clone)]
pub enum Elements {
    Segments(Vec<[usize; 2]>),
    Triangles(Vec<[usize; 3]>),
}

impl Elements {
    pub fn len(&self) -> usize {
        match self {
            Elements::Segments(v) => v.len(),
            Elements::Triangles(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A conforming simplicial mesh. Nodes carry (x, y) coordinates; 1D meshes
/// keep y = 0.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub dimension: usize,
    pub nodes: Vec<[f64; 2]>,
    pub elements: Elements,
    /// Sorted indices of the nodes on the domain boundary.
    pub boundary_nodes: Vec<usize>,
    pub boundary_kind: BoundaryKind,
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    /// Uniform 1D spacing; errors if the mesh is 2D or non-uniform.
    pub fn uniform_spacing(&self) -> Result<f64> {
        let segs = match &self.elements {
            Elements::Segments(s) => s,
            Elements::Triangles(_) => {
                return Err(AlpError::InvalidMesh("uniform_spacing requires a 1D mesh".into()))
            }
        };
        let h0 = (self.nodes[segs[0][1]][0] - self.nodes[segs[0][0]][0]).abs();
        for s in segs {
            let h = (self.nodes[s[1]][0] - self.nodes[s[0]][0]).abs();
            if (h - h0).abs() > 1e-12 * h0.max(1.0) {
                return Err(AlpError::InvalidMesh("non-uniform 1D mesh".into()));
            }
        }
        Ok(h0)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        let check = |idx: usize| -> Result<()> {
            if idx >= n {
                return Err(AlpError::InvalidMesh(format!(
                    "element references node {idx}, mesh has {n} nodes"
                )));
            }
            Ok(())
        };
        match &self.elements {
            Elements::Segments(segs) => {
                for s in segs {
                    check(s[0])?;
                    check(s[1])?;
                    if (self.nodes[s[1]][0] - self.nodes[s[0]][0]).abs() < 1e-300 {
                        return Err(AlpError::InvalidMesh("zero-length segment".into()));
                    }
                }
            }
            Elements::Triangles(tris) => {
                for t in tris {
                    for &i in t {
                        check(i)?;
                    }
                    if signed_area(&self.nodes, t) <= 0.0 {
                        return Err(AlpError::InvalidMesh(
                            "triangle with non-positive signed area".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn signed_area(nodes: &[[f64; 2]], t: &[usize; 3]) -> f64 {
    let [a, b, c] = [nodes[t[0]], nodes[t[1]], nodes[t[2]]];
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Uniform mesh of `n_elements` segments on [a, b]; endpoints are boundary.
pub fn build_interval_mesh(a: f64, b: f64, n_elements: usize, bc: BoundaryKind) -> Result<Mesh> {
    if !a.is_finite() || !b.is_finite() {
        return Err(AlpError::InvalidArgument("non-finite interval bounds".into()));
    }
    if a >= b {
        return Err(AlpError::InvalidArgument(format!("need a < b, got a={a}, b={b}")));
    }
    if n_elements < 2 {
        return Err(AlpError::InvalidArgument(format!(
            "need n_elements >= 2, got {n_elements}"
        )));
    }
    let n_nodes = n_elements + 1;
    let h = (b - a) / n_elements as f64;
    let nodes: Vec<[f64; 2]> = (0..n_nodes).map(|i| [a + i as f64 * h, 0.0]).collect();
    let segs: Vec<[usize; 2]> = (0..n_elements).map(|i| [i, i + 1]).collect();
    Ok(Mesh {
        dimension: 1,
        nodes,
        elements: Elements::Segments(segs),
        boundary_nodes: vec![0, n_nodes - 1],
        boundary_kind: bc,
    })
}

/// Structured triangulation of the rectangle x_range x y_range with nx x ny
/// cells, each split in two along a diagonal whose direction alternates with
/// cell parity (crossed diagonals). All outer-edge nodes are boundary.
pub fn build_structured_rect_mesh(
    x_range: (f64, f64),
    y_range: (f64, f64),
    nx: usize,
    ny: usize,
    bc: BoundaryKind,
) -> Result<Mesh> {
    let (x0, x1) = x_range;
    let (y0, y1) = y_range;
    if !(x1 - x0).is_finite() || !(y1 - y0).is_finite() || x1 <= x0 || y1 <= y0 {
        return Err(AlpError::InvalidArgument("degenerate rectangle extents".into()));
    }
    if nx < 2 || ny < 2 {
        return Err(AlpError::InvalidArgument("need nx, ny >= 2".into()));
    }
    let hx = (x1 - x0) / nx as f64;
    let hy = (y1 - y0) / ny as f64;
    let node_id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            nodes.push([x0 + i as f64 * hx, y0 + j as f64 * hy]);
        }
    }
    let mut tris = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (
                node_id(i, j),
                node_id(i + 1, j),
                node_id(i + 1, j + 1),
                node_id(i, j + 1),
            );
            if (i + j) % 2 == 0 {
                tris.push([a, b, c]);
                tris.push([a, c, d]);
            } else {
                tris.push([a, b, d]);
                tris.push([b, c, d]);
            }
        }
    }
    let boundary_nodes = boundary_nodes_from_triangles(nodes.len(), &tris);
    let mesh = Mesh {
        dimension: 2,
        nodes,
        elements: Elements::Triangles(tris),
        boundary_nodes,
        boundary_kind: bc,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Nodes lying on an edge shared by exactly one triangle.
fn boundary_nodes_from_triangles(n_nodes: usize, tris: &[[usize; 3]]) -> Vec<usize> {
    use std::collections::HashMap;
    let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
    for t in tris {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            let key = (a.min(b), a.max(b));
            *edge_count.entry(key).or_insert(0) += 1;
        }
    }
    let mut on_boundary = vec![false; n_nodes];
    for (&(a, b), &count) in &edge_count {
        if count == 1 {
            on_boundary[a] = true;
            on_boundary[b] = true;
        }
    }
    (0..n_nodes).filter(|&i| on_boundary[i]).collect()
}

/// Parse a triangle mesh from the ASCII node/element format.
///
/// Node file: first line `N d`, then N lines `index x [y]`.
/// Element file: first line `M k`, then M lines of k 0-based node indices.
/// Boundary nodes are inferred from edges belonging to exactly one triangle.
pub fn load_triangle_mesh(node_text: &str, element_text: &str, bc: BoundaryKind) -> Result<Mesh> {
    let parse_err = |line: usize, msg: &str| AlpError::MeshParse { line, msg: msg.into() };

    let mut node_lines = node_text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (lno, header) = node_lines
        .next()
        .ok_or_else(|| parse_err(0, "empty node file"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(parse_err(lno + 1, "node header must be `N d`"));
    }
    let n: usize = parts[0].parse().map_err(|_| parse_err(lno + 1, "bad node count"))?;
    let dim: usize = parts[1].parse().map_err(|_| parse_err(lno + 1, "bad dimension"))?;
    if dim != 2 {
        return Err(parse_err(lno + 1, "triangle mesh requires d = 2"));
    }
    let mut nodes = vec![[f64::NAN, f64::NAN]; n];
    let mut seen = vec![false; n];
    for (lno, line) in node_lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(parse_err(lno + 1, "node line must be `index x y`"));
        }
        let idx: usize = parts[0].parse().map_err(|_| parse_err(lno + 1, "bad node index"))?;
        if idx >= n {
            return Err(parse_err(lno + 1, "node index out of range"));
        }
        let x: f64 = parts[1].parse().map_err(|_| parse_err(lno + 1, "bad x coordinate"))?;
        let y: f64 = parts[2].parse().map_err(|_| parse_err(lno + 1, "bad y coordinate"))?;
        nodes[idx] = [x, y];
        seen[idx] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(AlpError::InvalidMesh(format!("node {missing} missing from node file")));
    }

    let mut elem_lines = element_text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (lno, header) = elem_lines
        .next()
        .ok_or_else(|| parse_err(0, "empty element file"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(parse_err(lno + 1, "element header must be `M k`"));
    }
    let m: usize = parts[0].parse().map_err(|_| parse_err(lno + 1, "bad element count"))?;
    let k: usize = parts[1].parse().map_err(|_| parse_err(lno + 1, "bad element arity"))?;
    if k != 3 {
        return Err(parse_err(lno + 1, "triangle mesh requires k = 3"));
    }
    let mut tris = Vec::with_capacity(m);
    for (lno, line) in elem_lines {
        let idx: Vec<usize> = line
            .split_whitespace()
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(lno + 1, "bad element indices"))?;
        if idx.len() != 3 {
            return Err(parse_err(lno + 1, "element line must hold 3 indices"));
        }
        for &i in &idx {
            if i >= n {
                return Err(AlpError::InvalidMesh(format!(
                    "element references node {i}, node file has {n} nodes"
                )));
            }
        }
        let mut t = [idx[0], idx[1], idx[2]];
        let area = signed_area(&nodes, &t);
        if area.abs() < 1e-14 {
            return Err(AlpError::InvalidMesh("zero-area triangle".into()));
        }
        if area < 0.0 {
            t.swap(1, 2);
        }
        tris.push(t);
    }
    if tris.len() != m {
        return Err(AlpError::InvalidMesh(format!(
            "element header announced {m} elements, found {}",
            tris.len()
        )));
    }
    let boundary_nodes = boundary_nodes_from_triangles(n, &tris);
    let mesh = Mesh {
        dimension: 2,
        nodes,
        elements: Elements::Triangles(tris),
        boundary_nodes,
        boundary_kind: bc,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Structured triangulation of a union of axis-aligned rectangles whose
/// corners lie on a lattice of spacing 1/n_per_unit. Cells whose center falls
/// inside one of the rectangles are kept; boundary nodes are inferred from
/// single-triangle edges, so re-entrant corners come out right.
pub fn build_rect_union_mesh(
    rects: &[(f64, f64, f64, f64)],
    n_per_unit: usize,
    bc: BoundaryKind,
) -> Result<Mesh> {
    if rects.is_empty() || n_per_unit == 0 {
        return Err(AlpError::InvalidArgument("empty rectangle union".into()));
    }
    for &(x0, x1, y0, y1) in rects {
        if x1 <= x0 || y1 <= y0 || !(x1 - x0).is_finite() || !(y1 - y0).is_finite() {
            return Err(AlpError::InvalidArgument("degenerate rectangle extents".into()));
        }
    }
    let h = 1.0 / n_per_unit as f64;
    let gx0 = rects.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let gx1 = rects.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let gy0 = rects.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let gy1 = rects.iter().map(|r| r.3).fold(f64::NEG_INFINITY, f64::max);
    let nx = ((gx1 - gx0) / h).round() as usize;
    let ny = ((gy1 - gy0) / h).round() as usize;

    let inside = |x: f64, y: f64| {
        rects
            .iter()
            .any(|&(x0, x1, y0, y1)| x > x0 && x < x1 && y > y0 && y < y1)
    };

    // Lattice node ids, created lazily for cells that are kept.
    let mut node_id = vec![usize::MAX; (nx + 1) * (ny + 1)];
    let mut nodes: Vec<[f64; 2]> = Vec::new();
    let mut tris: Vec<[usize; 3]> = Vec::new();
    let mut get_node = |i: usize, j: usize, nodes: &mut Vec<[f64; 2]>| {
        let key = j * (nx + 1) + i;
        if node_id[key] == usize::MAX {
            node_id[key] = nodes.len();
            nodes.push([gx0 + i as f64 * h, gy0 + j as f64 * h]);
        }
        node_id[key]
    };
    for j in 0..ny {
        for i in 0..nx {
            let cx = gx0 + (i as f64 + 0.5) * h;
            let cy = gy0 + (j as f64 + 0.5) * h;
            if !inside(cx, cy) {
                continue;
            }
            let a = get_node(i, j, &mut nodes);
            let b = get_node(i + 1, j, &mut nodes);
            let c = get_node(i + 1, j + 1, &mut nodes);
            let d = get_node(i, j + 1, &mut nodes);
            if (i + j) % 2 == 0 {
                tris.push([a, b, c]);
                tris.push([a, c, d]);
            } else {
                tris.push([a, b, d]);
                tris.push([b, c, d]);
            }
        }
    }
    if tris.is_empty() {
        return Err(AlpError::InvalidMesh("rectangle union produced no cells".into()));
    }
    let boundary_nodes = boundary_nodes_from_triangles(nodes.len(), &tris);
    let mesh = Mesh {
        dimension: 2,
        nodes,
        elements: Elements::Triangles(tris),
        boundary_nodes,
        boundary_kind: bc,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Nodal values of a scalar function on a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub values: DVector<f64>,
}

impl Field {
    pub fn new(values: DVector<f64>) -> Self {
        Field { values }
    }

    pub fn zeros(n: usize) -> Self {
        Field { values: DVector::zeros(n) }
    }

    pub fn from_fn(mesh: &Mesh, f: impl Fn(f64, f64) -> f64) -> Self {
        Field {
            values: DVector::from_iterator(mesh.n_nodes(), mesh.nodes.iter().map(|p| f(p[0], p[1]))),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Mesh plus assembled P1 mass and stiffness matrices and the Dirichlet
/// free-node index map. Immutable after construction.
#[derive(Debug, Clone)]
pub struct FemSpace {
    pub mesh: Mesh,
    /// Consistent mass matrix <v_i, v_j>, full (unconstrained).
    pub mass: DMatrix<f64>,
    /// Stiffness matrix <grad v_i, grad v_j>, full (unconstrained).
    pub stiffness: DMatrix<f64>,
    /// Free (unconstrained) node indices, ascending. Equal to 0..n for Neumann.
    free_nodes: Vec<usize>,
}

/// Assemble mass and stiffness for a P1 space on `mesh`.
pub fn assemble(mesh: Mesh) -> Result<FemSpace> {
    mesh.validate()?;
    let n = mesh.n_nodes();
    let mut mass = DMatrix::zeros(n, n);
    let mut stiffness = DMatrix::zeros(n, n);
    match &mesh.elements {
        Elements::Segments(segs) => {
            for s in segs {
                let h = (mesh.nodes[s[1]][0] - mesh.nodes[s[0]][0]).abs();
                let me = [[h / 3.0, h / 6.0], [h / 6.0, h / 3.0]];
                let ke = [[1.0 / h, -1.0 / h], [-1.0 / h, 1.0 / h]];
                for a in 0..2 {
                    for b in 0..2 {
                        mass[(s[a], s[b])] += me[a][b];
                        stiffness[(s[a], s[b])] += ke[a][b];
                    }
                }
            }
        }
        Elements::Triangles(tris) => {
            for t in tris {
                let area = signed_area(&mesh.nodes, t);
                if area <= 0.0 {
                    return Err(AlpError::InvalidMesh("degenerate element geometry".into()));
                }
                let p = [mesh.nodes[t[0]], mesh.nodes[t[1]], mesh.nodes[t[2]]];
                // grad(lambda_i) = (b_i, c_i) / (2A), cyclic edge differences.
                let b = [p[1][1] - p[2][1], p[2][1] - p[0][1], p[0][1] - p[1][1]];
                let c = [p[2][0] - p[1][0], p[0][0] - p[2][0], p[1][0] - p[0][0]];
                for a_ in 0..3 {
                    for bb in 0..3 {
                        let m = if a_ == bb { area / 6.0 } else { area / 12.0 };
                        mass[(t[a_], t[bb])] += m;
                        stiffness[(t[a_], t[bb])] +=
                            (b[a_] * b[bb] + c[a_] * c[bb]) / (4.0 * area);
                    }
                }
            }
        }
    }
    let constrained: Vec<bool> = match mesh.boundary_kind {
        BoundaryKind::Dirichlet => {
            let mut v = vec![false; n];
            for &i in &mesh.boundary_nodes {
                v[i] = true;
            }
            v
        }
        BoundaryKind::Neumann => vec![false; n],
    };
    let free_nodes: Vec<usize> = (0..n).filter(|&i| !constrained[i]).collect();
    Ok(FemSpace {
        mesh,
        mass,
        stiffness,
        free_nodes,
    })
}

impl FemSpace {
    pub fn n_nodes(&self) -> usize {
        self.mesh.n_nodes()
    }

    /// Dimension of the constrained (free-node) space.
    pub fn n_free(&self) -> usize {
        self.free_nodes.len()
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free_nodes
    }

    fn check_field(&self, f: &Field) -> Result<()> {
        if f.len() != self.n_nodes() {
            return Err(AlpError::MeshMismatch {
                field_len: f.len(),
                mesh_len: self.n_nodes(),
            });
        }
        Ok(())
    }

    /// Restrict a full matrix to the free-node block.
    pub fn restrict_matrix(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let nf = self.n_free();
        DMatrix::from_fn(nf, nf, |i, j| a[(self.free_nodes[i], self.free_nodes[j])])
    }

    /// Restrict a full vector to the free nodes.
    pub fn restrict_vector(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n_free(), self.free_nodes.iter().map(|&i| v[i]))
    }

    /// Expand a constrained vector back to full length, zero on constrained nodes.
    pub fn expand_vector(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_nodes());
        for (k, &i) in self.free_nodes.iter().enumerate() {
            out[i] = v[k];
        }
        out
    }

    /// Weighted mass matrix <w v_i, v_j> with P1 weight `w`, assembled with
    /// the exact integral of P1 triple products on each element.
    pub fn weighted_mass(&self, w: &Field) -> Result<DMatrix<f64>> {
        self.check_field(w)?;
        let n = self.n_nodes();
        let mut out = DMatrix::zeros(n, n);
        match &self.mesh.elements {
            Elements::Segments(segs) => {
                // int lambda^3 = h/4, int lambda^2 mu = h/12 on a segment of length h.
                for s in segs {
                    let h = (self.mesh.nodes[s[1]][0] - self.mesh.nodes[s[0]][0]).abs();
                    for a in 0..2 {
                        for b in 0..2 {
                            let mut v = 0.0;
                            for c in 0..2 {
                                let mut exps = [0usize; 2];
                                exps[a] += 1;
                                exps[b] += 1;
                                exps[c] += 1;
                                let integral = match exps {
                                    [3, 0] | [0, 3] => h / 4.0,
                                    _ => h / 12.0, // [2,1] or [1,2]
                                };
                                v += w.values[s[c]] * integral;
                            }
                            out[(s[a], s[b])] += v;
                        }
                    }
                }
            }
            Elements::Triangles(tris) => {
                // int lambda^3 = A/10, int lambda^2 mu = A/30, int lambda mu nu = A/60.
                for t in tris {
                    let area = signed_area(&self.mesh.nodes, t);
                    for a in 0..3 {
                        for b in 0..3 {
                            let mut v = 0.0;
                            for c in 0..3 {
                                let mut exps = [0usize; 3];
                                exps[a] += 1;
                                exps[b] += 1;
                                exps[c] += 1;
                                exps.sort_unstable();
                                let integral = match exps {
                                    [0, 0, 3] => area / 10.0,
                                    [0, 1, 2] => area / 30.0,
                                    _ => area / 60.0, // [1,1,1]
                                };
                                v += w.values[t[c]] * integral;
                            }
                            out[(t[a], t[b])] += v;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// L2 inner product f' M g.
    pub fn l2_inner(&self, f: &Field, g: &Field) -> Result<f64> {
        self.check_field(f)?;
        self.check_field(g)?;
        Ok(f.values.dot(&self.apply_mass(&g.values)))
    }

    pub fn l2_norm(&self, f: &Field) -> Result<f64> {
        Ok(self.l2_inner(f, f)?.max(0.0).sqrt())
    }

    /// Stiffness quadratic form <grad f, grad f>.
    pub fn h1_seminorm_sq(&self, f: &Field) -> Result<f64> {
        self.check_field(f)?;
        Ok(f.values.dot(&self.apply_stiffness(&f.values)))
    }

    /// y = mass * x by element accumulation; O(elements) instead of O(n^2).
    pub fn apply_mass(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n_nodes());
        match &self.mesh.elements {
            Elements::Segments(segs) => {
                for s in segs {
                    let h = (self.mesh.nodes[s[1]][0] - self.mesh.nodes[s[0]][0]).abs();
                    let (x0, x1) = (x[s[0]], x[s[1]]);
                    y[s[0]] += h / 3.0 * x0 + h / 6.0 * x1;
                    y[s[1]] += h / 6.0 * x0 + h / 3.0 * x1;
                }
            }
            Elements::Triangles(tris) => {
                for t in tris {
                    let area = signed_area(&self.mesh.nodes, t);
                    let s: f64 = t.iter().map(|&i| x[i]).sum();
                    for a in 0..3 {
                        y[t[a]] += area / 12.0 * (s + x[t[a]]);
                    }
                }
            }
        }
        y
    }

    /// y = stiffness * x by element accumulation.
    pub fn apply_stiffness(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n_nodes());
        match &self.mesh.elements {
            Elements::Segments(segs) => {
                for s in segs {
                    let h = (self.mesh.nodes[s[1]][0] - self.mesh.nodes[s[0]][0]).abs();
                    let d = (x[s[0]] - x[s[1]]) / h;
                    y[s[0]] += d;
                    y[s[1]] -= d;
                }
            }
            Elements::Triangles(tris) => {
                for t in tris {
                    let area = signed_area(&self.mesh.nodes, t);
                    let p = [self.mesh.nodes[t[0]], self.mesh.nodes[t[1]], self.mesh.nodes[t[2]]];
                    let b = [p[1][1] - p[2][1], p[2][1] - p[0][1], p[0][1] - p[1][1]];
                    let c = [p[2][0] - p[1][0], p[0][0] - p[2][0], p[1][0] - p[0][0]];
                    for a in 0..3 {
                        let mut acc = 0.0;
                        for bb in 0..3 {
                            acc += (b[a] * b[bb] + c[a] * c[bb]) / (4.0 * area) * x[t[bb]];
                        }
                        y[t[a]] += acc;
                    }
                }
            }
        }
        y
    }

    /// B = W(w) A with the P1 weighted mass applied column-wise by element
    /// accumulation; matches `weighted_mass(w) * A` up to roundoff.
    pub fn apply_weighted_mass(&self, w: &Field, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_field(w)?;
        if a.nrows() != self.n_nodes() {
            return Err(AlpError::MeshMismatch {
                field_len: a.nrows(),
                mesh_len: self.n_nodes(),
            });
        }
        let ncols = a.ncols();
        let mut out = DMatrix::zeros(self.n_nodes(), ncols);
        match &self.mesh.elements {
            Elements::Segments(segs) => {
                for s in segs {
                    let h = (self.mesh.nodes[s[1]][0] - self.mesh.nodes[s[0]][0]).abs();
                    let (w0, w1) = (w.values[s[0]], w.values[s[1]]);
                    // exact P1 triple products: int l^3 = h/4, int l^2 m = h/12
                    let w00 = h * (w0 / 4.0 + w1 / 12.0);
                    let w01 = h * (w0 + w1) / 12.0;
                    let w11 = h * (w1 / 4.0 + w0 / 12.0);
                    for j in 0..ncols {
                        let (a0, a1) = (a[(s[0], j)], a[(s[1], j)]);
                        out[(s[0], j)] += w00 * a0 + w01 * a1;
                        out[(s[1], j)] += w01 * a0 + w11 * a1;
                    }
                }
            }
            Elements::Triangles(tris) => {
                for t in tris {
                    let area = signed_area(&self.mesh.nodes, t);
                    let wv = [w.values[t[0]], w.values[t[1]], w.values[t[2]]];
                    let wsum: f64 = wv.iter().sum();
                    // int l^3 = A/10, int l^2 m = A/30, int l m n = A/60
                    let mut local = [[0.0f64; 3]; 3];
                    for a_ in 0..3 {
                        for b_ in a_..3 {
                            let v = if a_ == b_ {
                                area * (wv[a_] / 10.0 + (wsum - wv[a_]) / 30.0)
                            } else {
                                let other = wsum - wv[a_] - wv[b_];
                                area * ((wv[a_] + wv[b_]) / 30.0 + other / 60.0)
                            };
                            local[a_][b_] = v;
                            local[b_][a_] = v;
                        }
                    }
                    for j in 0..ncols {
                        let av = [a[(t[0], j)], a[(t[1], j)], a[(t[2], j)]];
                        for a_ in 0..3 {
                            out[(t[a_], j)] +=
                                local[a_][0] * av[0] + local[a_][1] * av[1] + local[a_][2] * av[2];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Row sums of the mass matrix (lumped mass).
    pub fn lumped_mass(&self) -> DVector<f64> {
        let n = self.n_nodes();
        DVector::from_iterator(n, (0..n).map(|i| self.mass.row(i).sum()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_interval(n: usize, bc: BoundaryKind) -> FemSpace {
        assemble(build_interval_mesh(0.0, 1.0, n, bc).unwrap()).unwrap()
    }

    #[test]
    fn interval_mesh_nodes() {
        let m = build_interval_mesh(0.0, 1.0, 4, BoundaryKind::Dirichlet).unwrap();
        assert_eq!(m.n_nodes(), 5);
        let xs: Vec<f64> = m.nodes.iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(m.boundary_nodes, vec![0, 4]);
    }

    #[test]
    fn interval_mesh_paper_sizes() {
        let m = build_interval_mesh(-15.0, 15.0, 500, BoundaryKind::Dirichlet).unwrap();
        assert_eq!(m.n_nodes(), 501);
        assert!((m.uniform_spacing().unwrap() - 0.06).abs() < 1e-12);
        let m = build_interval_mesh(0.0, 1.0, 250, BoundaryKind::Dirichlet).unwrap();
        assert_eq!(m.n_nodes(), 251);
    }

    #[test]
    fn apply_paths_match_assembled_matrices() {
        let fems = [
            unit_interval(37, BoundaryKind::Dirichlet),
            assemble(
                build_structured_rect_mesh((0.0, 2.0), (0.0, 1.0), 8, 5, BoundaryKind::Neumann)
                    .unwrap(),
            )
            .unwrap(),
        ];
        for fem in &fems {
            let n = fem.n_nodes();
            let x = DVector::from_fn(n, |i, _| ((i * 7 + 3) % 11) as f64 - 5.0);
            let w = Field::from_fn(&fem.mesh, |x, y| 1.0 + x * x - 0.5 * y);
            let tol = 1e-13 * n as f64;
            assert!((fem.apply_mass(&x) - &fem.mass * &x).amax() <= tol);
            assert!((fem.apply_stiffness(&x) - &fem.stiffness * &x).amax() <= tol * 100.0);
            let a = DMatrix::from_fn(n, 3, |i, j| (i as f64 * 0.1).sin() + j as f64);
            let direct = fem.weighted_mass(&w).unwrap() * &a;
            let fast = fem.apply_weighted_mass(&w, &a).unwrap();
            assert!((fast - direct).amax() <= tol);
            assert!(fem
                .apply_weighted_mass(&w, &DMatrix::zeros(n + 1, 2))
                .is_err());
        }
    }

    #[test]
    fn interval_mesh_rejects_bad_input() {
        assert!(build_interval_mesh(1.0, 0.0, 4, BoundaryKind::Dirichlet).is_err());
        assert!(build_interval_mesh(0.0, 1.0, 1, BoundaryKind::Dirichlet).is_err());
        assert!(build_interval_mesh(f64::NAN, 1.0, 4, BoundaryKind::Dirichlet).is_err());
    }

    #[test]
    fn rect_mesh_counts_and_area() {
        let m = build_structured_rect_mesh((0.0, 1.0), (0.0, 1.0), 2, 2, BoundaryKind::Dirichlet)
            .unwrap();
        assert_eq!(m.n_nodes(), 9);
        assert_eq!(m.n_elements(), 8);
        let area: f64 = match &m.elements {
            Elements::Triangles(ts) => ts.iter().map(|t| signed_area(&m.nodes, t)).sum(),
            _ => unreachable!(),
        };
        assert!((area - 1.0).abs() < 1e-14);

        let m = build_structured_rect_mesh((0.0, 2.0), (0.0, 1.0), 4, 2, BoundaryKind::Neumann)
            .unwrap();
        let area: f64 = match &m.elements {
            Elements::Triangles(ts) => ts.iter().map(|t| signed_area(&m.nodes, t)).sum(),
            _ => unreachable!(),
        };
        assert!((area - 2.0).abs() < 1e-13);
    }

    #[test]
    fn rect_mesh_partition_of_unity() {
        let fem = assemble(
            build_structured_rect_mesh((0.0, 1.0), (0.0, 1.0), 40, 40, BoundaryKind::Dirichlet)
                .unwrap(),
        )
        .unwrap();
        let total: f64 = fem.mass.iter().sum();
        assert!((total - 1.0).abs() < 1e-12, "mass sum {total}");
    }

    #[test]
    fn interior_mass_row_1d() {
        let fem = unit_interval(4, BoundaryKind::Neumann);
        let h = 0.25;
        assert!((fem.mass[(2, 1)] - h / 6.0).abs() < 1e-15);
        assert!((fem.mass[(2, 2)] - 2.0 * h / 3.0).abs() < 1e-15);
        assert!((fem.mass[(2, 3)] - h / 6.0).abs() < 1e-15);
    }

    #[test]
    fn stiffness_annihilates_constants() {
        for fem in [
            unit_interval(17, BoundaryKind::Neumann),
            assemble(
                build_structured_rect_mesh((0.0, 2.0), (0.0, 1.0), 7, 5, BoundaryKind::Neumann)
                    .unwrap(),
            )
            .unwrap(),
        ] {
            let ones = DVector::from_element(fem.n_nodes(), 1.0);
            let r = &fem.stiffness * &ones;
            let kmax = fem.stiffness.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            assert!(r.amax() <= 1e-12 * kmax);
        }
    }

    #[test]
    fn gradient_quadratic_form_of_x() {
        let fem = assemble(
            build_structured_rect_mesh((0.0, 1.0), (0.0, 1.0), 10, 10, BoundaryKind::Neumann)
                .unwrap(),
        )
        .unwrap();
        let f = Field::from_fn(&fem.mesh, |x, _| x);
        // int |grad x|^2 over the unit square = 1 (frozen from the analytic integral).
        assert!((fem.h1_seminorm_sq(&f).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn weighted_mass_limits() {
        let fem = unit_interval(16, BoundaryKind::Dirichlet);
        let ones = Field::new(DVector::from_element(fem.n_nodes(), 1.0));
        let w1 = fem.weighted_mass(&ones).unwrap();
        let rel = (&w1 - &fem.mass).amax() / fem.mass.amax();
        assert!(rel < 1e-14);

        let zeros = Field::zeros(fem.n_nodes());
        let w0 = fem.weighted_mass(&zeros).unwrap();
        assert_eq!(w0.amax(), 0.0);
    }

    #[test]
    fn weighted_mass_hat_support() {
        let fem = unit_interval(10, BoundaryKind::Neumann);
        let mut hat = Field::zeros(fem.n_nodes());
        hat.values[5] = 1.0;
        let w = fem.weighted_mass(&hat).unwrap();
        for i in 0..fem.n_nodes() {
            for j in 0..fem.n_nodes() {
                let touches = (4..=6).contains(&i) && (4..=6).contains(&j);
                if !touches {
                    assert_eq!(w[(i, j)], 0.0, "entry ({i},{j}) outside hat support");
                }
            }
        }
    }

    #[test]
    fn l2_inner_examples() {
        let fem = unit_interval(200, BoundaryKind::Neumann);
        let ones = Field::new(DVector::from_element(fem.n_nodes(), 1.0));
        assert!((fem.l2_inner(&ones, &ones).unwrap() - 1.0).abs() < 1e-12);

        let x = Field::from_fn(&fem.mesh, |x, _| x);
        assert!((fem.l2_inner(&x, &ones).unwrap() - 0.5).abs() < 1e-6);

        // hat functions two elements apart have disjoint support
        let mut h1 = Field::zeros(fem.n_nodes());
        let mut h2 = Field::zeros(fem.n_nodes());
        h1.values[10] = 1.0;
        h2.values[12] = 1.0;
        assert_eq!(fem.l2_inner(&h1, &h2).unwrap(), 0.0);
    }

    #[test]
    fn mass_is_spd() {
        for fem in [
            unit_interval(9, BoundaryKind::Dirichlet),
            assemble(
                build_structured_rect_mesh((0.0, 1.0), (0.0, 1.0), 5, 4, BoundaryKind::Neumann)
                    .unwrap(),
            )
            .unwrap(),
        ] {
            assert!(fem.mass.clone().cholesky().is_some());
            let asym = (&fem.mass - fem.mass.transpose()).amax();
            assert_eq!(asym, 0.0);
            let asym = (&fem.stiffness - fem.stiffness.transpose()).amax();
            assert_eq!(asym, 0.0);
        }
    }

    #[test]
    fn l2_projection_converges_at_h2() {
        // L2 projection error of sin(pi x) shrinks by ~4x per refinement.
        use std::f64::consts::PI;
        let mut errors = Vec::new();
        for n in [16usize, 32, 64] {
            let fem = unit_interval(n, BoundaryKind::Neumann);
            let f = Field::from_fn(&fem.mesh, |x, _| (PI * x).sin());
            // nodal interpolation error in L2 via fine quadrature per element
            let mut err2 = 0.0;
            let h = 1.0 / n as f64;
            for e in 0..n {
                let x0 = e as f64 * h;
                for q in 0..16 {
                    let x = x0 + (q as f64 + 0.5) / 16.0 * h;
                    let lam = (x - x0) / h;
                    let interp = f.values[e] * (1.0 - lam) + f.values[e + 1] * lam;
                    err2 += ((PI * x).sin() - interp).powi(2) * h / 16.0;
                }
            }
            errors.push(err2.sqrt());
        }
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 4.0).abs() < 0.4, "refinement ratio {ratio}");
        }
    }

    #[test]
    fn load_single_triangle() {
        let nodes = "3 2\n0 0 0\n1 1 0\n2 0 1\n";
        let elems = "1 3\n0 1 2\n";
        let m = load_triangle_mesh(nodes, elems, BoundaryKind::Dirichlet).unwrap();
        assert_eq!(m.n_nodes(), 3);
        assert_eq!(m.n_elements(), 1);
        assert_eq!(m.boundary_nodes, vec![0, 1, 2]);
    }

    #[test]
    fn load_two_triangles_square() {
        let nodes = "4 2\n0 0 0\n1 1 0\n2 1 1\n3 0 1\n";
        let elems = "2 3\n0 1 2\n0 2 3\n";
        let m = load_triangle_mesh(nodes, elems, BoundaryKind::Dirichlet).unwrap();
        assert_eq!(m.boundary_nodes.len(), 4);
    }

    #[test]
    fn load_rejects_malformed_input() {
        assert!(load_triangle_mesh("", "1 3\n0 1 2\n", BoundaryKind::Dirichlet).is_err());
        let nodes = "3 2\n0 0 0\n1 1 0\n2 0 1\n";
        assert!(load_triangle_mesh(nodes, "1 3\n0 1 5\n", BoundaryKind::Dirichlet).is_err());
        // zero-area triangle
        let nodes = "3 2\n0 0 0\n1 1 0\n2 2 0\n";
        assert!(load_triangle_mesh(nodes, "1 3\n0 1 2\n", BoundaryKind::Dirichlet).is_err());
    }

    #[test]
    fn t_shaped_union_area() {
        // stem [2,3]x[0,2] plus bar [0,5]x[2,3]: area 2 + 5 = 7
        let rects = [(2.0, 3.0, 0.0, 2.0), (0.0, 5.0, 2.0, 3.0)];
        let m = build_rect_union_mesh(&rects, 4, BoundaryKind::Neumann).unwrap();
        let area: f64 = match &m.elements {
            Elements::Triangles(ts) => ts.iter().map(|t| signed_area(&m.nodes, t)).sum(),
            _ => unreachable!(),
        };
        assert!((area - 7.0).abs() < 1e-10, "T area {area}");
        // partition of unity on the union too
        let fem = assemble(m).unwrap();
        let total: f64 = fem.mass.iter().sum();
        assert!((total - 7.0).abs() < 1e-10);
    }
}

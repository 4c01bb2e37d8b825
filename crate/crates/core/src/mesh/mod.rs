//! Unstructured triangle meshes on square tissue domains.
//!
//! A [`TriMesh`] owns node coordinates (millimetres), counter-clockwise
//! triangles, a per-triangle alive flag (dead triangles are inexcitable,
//! carved-out tissue), and derived connectivity: a global edge enumeration
//! (which doubles as the quadratic-node numbering for Taylor-Hood elements),
//! edge-to-triangle incidence, and node-to-triangle incidence.
//!
//! Construction validates orientation; a non-positive signed area is reported
//! with the offending element index rather than silently reordered, because
//! inverted elements downstream mean a broken generator or a collapsed
//! deformation state, and both deserve a loud stop.

mod fibrosis;
mod generate;
pub mod io;
mod refine;

pub use fibrosis::{carve_fibrosis, CarveReport, FibrosisSpec};
pub use generate::generate_square_mesh;
pub use io::{read_mesh, write_mesh};
pub use refine::{refine_uniform, EmbeddingMap};

use std::collections::HashMap;
use thiserror::Error;

/// Errors from mesh construction, refinement, carving and I/O.
#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("element {element} has non-positive area {area:.3e}")]
    DegenerateElement { element: usize, area: f64 },
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("carving reached {achieved:.4} of the requested {requested:.4} inexcitable fraction")]
    CarveShortfall { requested: f64, achieved: f64 },
    #[error("{path}:{line}: {what}")]
    Parse {
        path: String,
        line: usize,
        what: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Triangle mesh with alive flags and derived connectivity.
#[derive(Debug, Clone)]
pub struct TriMesh {
    coords: Vec<[f64; 2]>,
    tris: Vec<[usize; 3]>,
    alive: Vec<bool>,
    /// Canonical edges as (low node, high node), in first-encounter order.
    edges: Vec<[usize; 2]>,
    /// Per triangle: edge index between local vertices k and (k+1)%3.
    tri_edges: Vec<[usize; 3]>,
    /// Per edge: the one or two incident triangles.
    edge_tris: Vec<[Option<usize>; 2]>,
    /// Node-to-triangle incidence in CSR layout.
    node_tri_ptr: Vec<usize>,
    node_tri_idx: Vec<usize>,
}

impl TriMesh {
    /// Build a mesh with every triangle alive.
    pub fn from_raw(coords: Vec<[f64; 2]>, tris: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let alive = vec![true; tris.len()];
        Self::from_raw_with_alive(coords, tris, alive)
    }

    /// Build a mesh with explicit alive flags.
    pub fn from_raw_with_alive(
        coords: Vec<[f64; 2]>,
        tris: Vec<[usize; 3]>,
        alive: Vec<bool>,
    ) -> Result<Self, MeshError> {
        if alive.len() != tris.len() {
            return Err(MeshError::Invalid(format!(
                "{} alive flags for {} triangles",
                alive.len(),
                tris.len()
            )));
        }
        let n = coords.len();
        for (t, tri) in tris.iter().enumerate() {
            for &v in tri {
                if v >= n {
                    return Err(MeshError::Invalid(format!(
                        "triangle {t} references node {v} of {n}"
                    )));
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(MeshError::Invalid(format!(
                    "triangle {t} repeats a node"
                )));
            }
        }
        for c in &coords {
            if !c[0].is_finite() || !c[1].is_finite() {
                return Err(MeshError::Invalid("non-finite node coordinate".into()));
            }
        }

        // Edge enumeration in deterministic first-encounter order.
        let mut edge_id: HashMap<(usize, usize), usize> = HashMap::new();
        let mut edges = Vec::new();
        let mut tri_edges = Vec::with_capacity(tris.len());
        let mut edge_tris: Vec<[Option<usize>; 2]> = Vec::new();
        for (t, tri) in tris.iter().enumerate() {
            let mut te = [0usize; 3];
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let id = *edge_id.entry(key).or_insert_with(|| {
                    edges.push([key.0, key.1]);
                    edge_tris.push([None, None]);
                    edges.len() - 1
                });
                te[k] = id;
                let slots = &mut edge_tris[id];
                if slots[0].is_none() {
                    slots[0] = Some(t);
                } else if slots[1].is_none() {
                    slots[1] = Some(t);
                } else {
                    return Err(MeshError::Invalid(format!(
                        "edge ({}, {}) borders more than two triangles",
                        key.0, key.1
                    )));
                }
            }
            tri_edges.push(te);
        }

        // Node-to-triangle incidence.
        let mut counts = vec![0usize; n];
        for tri in &tris {
            for &v in tri {
                counts[v] += 1;
            }
        }
        let mut node_tri_ptr = vec![0usize; n + 1];
        for i in 0..n {
            node_tri_ptr[i + 1] = node_tri_ptr[i] + counts[i];
        }
        let mut node_tri_idx = vec![0usize; node_tri_ptr[n]];
        let mut cursor = node_tri_ptr.clone();
        for (t, tri) in tris.iter().enumerate() {
            for &v in tri {
                node_tri_idx[cursor[v]] = t;
                cursor[v] += 1;
            }
        }

        let mesh = Self {
            coords,
            tris,
            alive,
            edges,
            tri_edges,
            edge_tris,
            node_tri_ptr,
            node_tri_idx,
        };
        for t in 0..mesh.n_tris() {
            let a = mesh.signed_area(t);
            if !(a > 0.0) {
                return Err(MeshError::DegenerateElement { element: t, area: a });
            }
        }
        Ok(mesh)
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn n_tris(&self) -> usize {
        self.tris.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn tris(&self) -> &[[usize; 3]] {
        &self.tris
    }

    pub fn alive(&self) -> &[bool] {
        &self.alive
    }

    pub fn tri(&self, t: usize) -> [usize; 3] {
        self.tris[t]
    }

    pub fn is_alive(&self, t: usize) -> bool {
        self.alive[t]
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn tri_edges(&self, t: usize) -> [usize; 3] {
        self.tri_edges[t]
    }

    pub fn edge_tris(&self, e: usize) -> [Option<usize>; 2] {
        self.edge_tris[e]
    }

    /// Triangles incident to node `v`.
    pub fn node_tris(&self, v: usize) -> &[usize] {
        &self.node_tri_idx[self.node_tri_ptr[v]..self.node_tri_ptr[v + 1]]
    }

    /// Edge-sharing neighbours of triangle `t`, per local edge.
    pub fn tri_neighbors(&self, t: usize) -> [Option<usize>; 3] {
        let mut out = [None; 3];
        for k in 0..3 {
            let e = self.tri_edges[t][k];
            let [a, b] = self.edge_tris[e];
            out[k] = match (a, b) {
                (Some(x), _) if x != t => Some(x),
                (_, Some(y)) if y != t => Some(y),
                _ => None,
            };
        }
        out
    }

    /// Signed area of triangle `t` (positive for the stored CCW orientation).
    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.tris[t];
        let pa = self.coords[a];
        let pb = self.coords[b];
        let pc = self.coords[c];
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    /// Sum of all triangle areas.
    pub fn total_area(&self) -> f64 {
        (0..self.n_tris()).map(|t| self.signed_area(t)).sum()
    }

    /// Sum of alive-triangle areas.
    pub fn alive_area(&self) -> f64 {
        (0..self.n_tris())
            .filter(|&t| self.alive[t])
            .map(|t| self.signed_area(t))
            .sum()
    }

    /// Centroid of triangle `t`.
    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.tris[t];
        [
            (self.coords[a][0] + self.coords[b][0] + self.coords[c][0]) / 3.0,
            (self.coords[a][1] + self.coords[b][1] + self.coords[c][1]) / 3.0,
        ]
    }

    /// Midpoint of edge `e`; quadratic node `n_nodes + e` sits here.
    pub fn edge_midpoint(&self, e: usize) -> [f64; 2] {
        let [a, b] = self.edges[e];
        [
            0.5 * (self.coords[a][0] + self.coords[b][0]),
            0.5 * (self.coords[a][1] + self.coords[b][1]),
        ]
    }

    /// Node count of the quadratic (vertex + edge-midpoint) space.
    pub fn p2_node_count(&self) -> usize {
        self.n_nodes() + self.n_edges()
    }

    /// Mean edge length over the whole mesh.
    pub fn mean_edge_length(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .edges
            .iter()
            .map(|&[a, b]| {
                let pa = self.coords[a];
                let pb = self.coords[b];
                (pb[0] - pa[0]).hypot(pb[1] - pa[1])
            })
            .sum();
        total / self.edges.len() as f64
    }

    /// Replace node coordinates (same node count), revalidating alive-element
    /// orientation. Used when tissue deformation moves the fine mesh.
    pub fn set_coords(&mut self, coords: Vec<[f64; 2]>) -> Result<(), MeshError> {
        if coords.len() != self.coords.len() {
            return Err(MeshError::Invalid(format!(
                "coordinate count changed from {} to {}",
                self.coords.len(),
                coords.len()
            )));
        }
        let old = std::mem::replace(&mut self.coords, coords);
        for t in 0..self.n_tris() {
            if !self.alive[t] {
                continue;
            }
            let a = self.signed_area(t);
            if !(a > 0.0) {
                let err = MeshError::DegenerateElement { element: t, area: a };
                self.coords = old;
                return Err(err);
            }
        }
        Ok(())
    }

    /// Overwrite the alive flags (same length).
    pub fn set_alive(&mut self, alive: Vec<bool>) -> Result<(), MeshError> {
        if alive.len() != self.tris.len() {
            return Err(MeshError::Invalid("alive flag count mismatch".into()));
        }
        self.alive = alive;
        Ok(())
    }

    /// Nodes incident to at least one alive triangle.
    pub fn alive_nodes(&self) -> Vec<bool> {
        let mut out = vec![false; self.n_nodes()];
        for (t, tri) in self.tris.iter().enumerate() {
            if self.alive[t] {
                for &v in tri {
                    out[v] = true;
                }
            }
        }
        out
    }

    /// Neighbour vertices of `v` ordered counter-clockwise, when the alive
    /// triangles around `v` form one closed fan. Returns `None` at domain
    /// boundaries, next to carved patches, and at bowtie configurations —
    /// exactly the places where a phase winding number is ill-defined.
    pub fn ordered_one_ring(&self, v: usize) -> Option<Vec<usize>> {
        // Each alive CCW triangle (a,b,c) contributes a directed arc u -> w
        // across from v; a closed fan chains every arc into one cycle.
        let mut next: HashMap<usize, usize> = HashMap::new();
        let mut count = 0usize;
        for &t in self.node_tris(v) {
            if !self.alive[t] {
                continue;
            }
            let [a, b, c] = self.tris[t];
            let (u, w) = if a == v {
                (b, c)
            } else if b == v {
                (c, a)
            } else {
                (a, b)
            };
            if next.insert(u, w).is_some() {
                return None; // non-manifold fan
            }
            count += 1;
        }
        if count < 3 {
            return None;
        }
        // Deterministic starting point: summation order downstream (phase
        // winding) must not depend on hash iteration order.
        let start = *next.keys().min().unwrap();
        let mut ring = Vec::with_capacity(count);
        let mut cur = start;
        for _ in 0..count {
            ring.push(cur);
            cur = *next.get(&cur)?;
        }
        if cur != start {
            return None; // open fan: boundary or hole
        }
        Some(ring)
    }
}

/// Edges bordering exactly one alive triangle: the outer boundary of the
/// alive region plus the rims of carved patches.
pub fn boundary_edges(mesh: &TriMesh) -> Vec<usize> {
    (0..mesh.n_edges())
        .filter(|&e| {
            let n_alive = mesh
                .edge_tris(e)
                .iter()
                .flatten()
                .filter(|&&t| mesh.is_alive(t))
                .count();
            n_alive == 1
        })
        .collect()
}

/// Group boundary edges into closed loops by walking shared vertices.
/// Returns the loops as edge-index lists. Used to count hole rims.
pub fn boundary_loops(mesh: &TriMesh) -> Vec<Vec<usize>> {
    let boundary = boundary_edges(mesh);
    let mut vertex_edges: HashMap<usize, Vec<usize>> = HashMap::new();
    for &e in &boundary {
        let [a, b] = mesh.edges()[e];
        vertex_edges.entry(a).or_default().push(e);
        vertex_edges.entry(b).or_default().push(e);
    }
    let mut used = vec![false; mesh.n_edges()];
    let mut loops = Vec::new();
    for &start in &boundary {
        if used[start] {
            continue;
        }
        let mut lp = vec![start];
        used[start] = true;
        let [first, mut cursor] = mesh.edges()[start];
        while cursor != first {
            let Some(candidates) = vertex_edges.get(&cursor) else {
                break;
            };
            let Some(&next) = candidates.iter().find(|&&e| !used[e]) else {
                break;
            };
            used[next] = true;
            lp.push(next);
            let [a, b] = mesh.edges()[next];
            cursor = if a == cursor { b } else { a };
        }
        loops.push(lp);
    }
    loops
}

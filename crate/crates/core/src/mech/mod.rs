//! Incompressible hyperelastic tissue mechanics on a coarse triangle mesh.
//!
//! Displacements are interpolated with quadratic (six-node) elements and
//! pressure with linear ones — the classical stable mixed pair — over the
//! full mesh, dead elements included: non-conducting tissue still bears load,
//! it just produces no active tension. The material is Mooney-Rivlin in the
//! plane,
//!
//! ```text
//! W(C) = c1 (tr C - 3) + c2 (det C - 3),
//! ```
//!
//! with incompressibility `det F = 1` enforced by the pressure field, and an
//! active fibre stress `Ta (F f0)(f0)^T / (f0^T C f0)` added per element.
//! The first Piola-Kirchhoff stress used in the weak form is
//!
//! ```text
//! P = 2 c1 F + (2 c2 det F - p) cof F + active,
//! ```
//!
//! which is division-free and therefore well behaved in line searches that
//! probe near-inverted states. Three displacement pins (both components of
//! the vertex nearest the domain centre, the vertical component of a vertex
//! at mid-height on the right) remove the rigid-body modes as identity
//! residual rows.
//!
//! [`newton`] drives the nonlinear solve matrix-free: GMRES on
//! finite-difference directional derivatives of the residual, preconditioned
//! by an incomplete LU factorisation of a Jacobian sampled column-group by
//! column-group with a distance-two colouring.

mod newton;

pub use newton::{
    extrapolate, fd_jacobian, stabilized_for_factorization, NewtonSettings, NewtonSolver,
    SolveReport,
};

use crate::linalg::LinalgError;
use crate::mesh::{MeshError, TriMesh};
use thiserror::Error;

/// Errors from mechanics assembly and solves.
#[derive(Debug, Error)]
pub enum MechError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("element {element} collapsed along the fibre (squared stretch {stretch_sq:.3e})")]
    FibreCollapsed { element: usize, stretch_sq: f64 },
    #[error("converged to an unphysical state (smallest volume ratio {det:.3e})")]
    UnphysicalSolution { det: f64 },
    #[error("newton diverged after {iterations} iterations (residual {residual:.3e})")]
    Diverged { iterations: usize, residual: f64 },
    #[error("line search stalled at residual {residual:.3e}")]
    LineSearchStalled { residual: f64 },
    #[error("newton used its whole budget ({iterations} iterations, residual {residual:.3e})")]
    OutOfIterations { iterations: usize, residual: f64 },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

/// Plane Mooney-Rivlin coefficients in kPa.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub c1: f64,
    pub c2: f64,
}

impl Default for Material {
    fn default() -> Self {
        Material { c1: 2.0, c2: 6.0 }
    }
}

impl Material {
    /// Pressure that cancels the passive stress at the undeformed state.
    pub fn rest_pressure(&self) -> f64 {
        2.0 * (self.c1 + self.c2)
    }
}

/// Seven-point degree-five quadrature on the reference triangle: barycentric
/// coordinates and weights summing to one (scale by element area).
/// Barycentric coordinates of the degree-5 element quadrature rule. Public
/// because the active-tension field is stored per quadrature point: whoever
/// builds that field needs the stations it will be read at.
pub const QUAD_PTS: [[f64; 3]; 7] = {
    const A: f64 = 0.059_715_871_789_769_8;
    const B: f64 = 0.470_142_064_105_115_1;
    const C: f64 = 0.797_426_985_353_087_3;
    const D: f64 = 0.101_286_507_323_456_3;
    [
        [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        [A, B, B],
        [B, A, B],
        [B, B, A],
        [C, D, D],
        [D, C, D],
        [D, D, C],
    ]
};
const QUAD_WTS: [f64; 7] = [
    0.225,
    0.132_394_152_788_506_2,
    0.132_394_152_788_506_2,
    0.132_394_152_788_506_2,
    0.125_939_180_544_827_1,
    0.125_939_180_544_827_1,
    0.125_939_180_544_827_1,
];

/// Quadratic displacement / linear pressure system on one mesh.
///
/// Degrees of freedom interleave by vertex — `3v` and `3v + 1` are the
/// displacement of vertex `v`, `3v + 2` its pressure — followed by two
/// displacement components per edge midpoint, `3 n_v + 2e` and
/// `3 n_v + 2e + 1`. Interleaving keeps each pressure row surrounded by its
/// own displacement rows, which the incomplete factorisation needs to find
/// workable pivots on the otherwise zero pressure diagonal.
pub struct MechSystem {
    mesh: TriMesh,
    material: Material,
    fiber: [f64; 2],
    pins: Vec<(usize, f64)>,
    /// Per-element area and barycentric gradients in reference coordinates.
    areas: Vec<f64>,
    grads: Vec<[[f64; 2]; 3]>,
    /// Sparsity neighbourhood of every degree of freedom (sorted, with self).
    adjacency: Vec<Vec<usize>>,
    /// Distance-two colour classes for grouped Jacobian sampling.
    colors: Vec<Vec<usize>>,
}

impl MechSystem {
    pub fn new(mesh: &TriMesh, material: Material, fiber: [f64; 2]) -> Result<Self, MechError> {
        if !(material.c1 > 0.0) || !(material.c2 >= 0.0) {
            return Err(MechError::BadParameter(format!(
                "material coefficients c1={} c2={}",
                material.c1, material.c2
            )));
        }
        let norm = (fiber[0] * fiber[0] + fiber[1] * fiber[1]).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(MechError::BadParameter(
                "fibre direction has zero length".into(),
            ));
        }
        let fiber = [fiber[0] / norm, fiber[1] / norm];
        if mesh.n_tris() == 0 {
            return Err(MechError::BadParameter("mesh has no elements".into()));
        }

        let mut areas = Vec::with_capacity(mesh.n_tris());
        let mut grads = Vec::with_capacity(mesh.n_tris());
        for t in 0..mesh.n_tris() {
            let [a, b, c] = mesh.tri(t);
            let p = [mesh.coords()[a], mesh.coords()[b], mesh.coords()[c]];
            let area = mesh.signed_area(t);
            areas.push(area);
            grads.push([
                [(p[1][1] - p[2][1]) / (2.0 * area), (p[2][0] - p[1][0]) / (2.0 * area)],
                [(p[2][1] - p[0][1]) / (2.0 * area), (p[0][0] - p[2][0]) / (2.0 * area)],
                [(p[0][1] - p[1][1]) / (2.0 * area), (p[1][0] - p[0][0]) / (2.0 * area)],
            ]);
        }

        let pins = choose_pins(mesh);
        let n_dofs = 3 * mesh.n_nodes() + 2 * mesh.n_edges();
        let adjacency = build_adjacency(mesh, n_dofs);
        let colors = distance_two_coloring(&adjacency);

        Ok(MechSystem {
            mesh: mesh.clone(),
            material,
            fiber,
            pins,
            areas,
            grads,
            adjacency,
            colors,
        })
    }

    pub fn n_dofs(&self) -> usize {
        3 * self.mesh.n_nodes() + 2 * self.mesh.n_edges()
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn material(&self) -> Material {
        self.material
    }

    pub fn fiber(&self) -> [f64; 2] {
        self.fiber
    }

    pub fn pins(&self) -> &[(usize, f64)] {
        &self.pins
    }

    pub(crate) fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub(crate) fn colors(&self) -> &[Vec<usize>] {
        &self.colors
    }

    /// Degrees of freedom of vertex `v`: x, y, pressure.
    pub fn vertex_dofs(&self, v: usize) -> [usize; 3] {
        [3 * v, 3 * v + 1, 3 * v + 2]
    }

    /// Displacement degrees of freedom of edge midpoint `e`.
    pub fn edge_dofs(&self, e: usize) -> [usize; 2] {
        let base = 3 * self.mesh.n_nodes();
        [base + 2 * e, base + 2 * e + 1]
    }

    /// The exact equilibrium at zero tension: no displacement, uniform
    /// pressure balancing the passive stress.
    pub fn rest_state(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.n_dofs()];
        let p = self.material.rest_pressure();
        for v in 0..self.mesh.n_nodes() {
            x[3 * v + 2] = p;
        }
        x
    }

    /// The fifteen degrees of freedom of element `t` in local order: vertex
    /// displacements and pressures, then midpoint displacements.
    fn element_dofs(&self, t: usize) -> [usize; 15] {
        let [a, b, c] = self.mesh.tri(t);
        let [e01, e12, e20] = self.mesh.tri_edges(t);
        let base = 3 * self.mesh.n_nodes();
        [
            3 * a,
            3 * a + 1,
            3 * a + 2,
            3 * b,
            3 * b + 1,
            3 * b + 2,
            3 * c,
            3 * c + 1,
            3 * c + 2,
            base + 2 * e01,
            base + 2 * e01 + 1,
            base + 2 * e12,
            base + 2 * e12 + 1,
            base + 2 * e20,
            base + 2 * e20 + 1,
        ]
    }

    /// Quadratic shape gradients (reference coordinates) and values at one
    /// barycentric point of element `t`. Local node order: the three
    /// vertices, then the midpoints of edges 0-1, 1-2, 2-0.
    fn p2_shapes(&self, t: usize, lambda: [f64; 3]) -> ([f64; 6], [[f64; 2]; 6]) {
        let g = &self.grads[t];
        let values = [
            lambda[0] * (2.0 * lambda[0] - 1.0),
            lambda[1] * (2.0 * lambda[1] - 1.0),
            lambda[2] * (2.0 * lambda[2] - 1.0),
            4.0 * lambda[0] * lambda[1],
            4.0 * lambda[1] * lambda[2],
            4.0 * lambda[2] * lambda[0],
        ];
        let mut grads = [[0.0; 2]; 6];
        for v in 0..3 {
            let f = 4.0 * lambda[v] - 1.0;
            grads[v] = [f * g[v][0], f * g[v][1]];
        }
        for (slot, (i, j)) in [(3, (0, 1)), (4, (1, 2)), (5, (2, 0))] {
            grads[slot] = [
                4.0 * (lambda[j] * g[i][0] + lambda[i] * g[j][0]),
                4.0 * (lambda[i] * g[j][1] + lambda[j] * g[i][1]),
            ];
        }
        (values, grads)
    }

    /// Deformation gradient, pressure, and shape data at one quadrature
    /// point, given the fifteen local unknowns.
    fn point_state(
        &self,
        t: usize,
        local: &[f64; 15],
        lambda: [f64; 3],
    ) -> ([[f64; 2]; 2], f64, [f64; 6], [[f64; 2]; 6]) {
        let (values, grads) = self.p2_shapes(t, lambda);
        // Local displacement slots: vertices at 0/1, 3/4, 6/7; midpoints at
        // 9/10, 11/12, 13/14.
        const UX: [usize; 6] = [0, 3, 6, 9, 11, 13];
        let mut f = [[1.0, 0.0], [0.0, 1.0]];
        for k in 0..6 {
            let ux = local[UX[k]];
            let uy = local[UX[k] + 1];
            f[0][0] += ux * grads[k][0];
            f[0][1] += ux * grads[k][1];
            f[1][0] += uy * grads[k][0];
            f[1][1] += uy * grads[k][1];
        }
        let p = lambda[0] * local[2] + lambda[1] * local[5] + lambda[2] * local[8];
        (f, p, values, grads)
    }

    /// Assemble the residual of the weak form into `out`: momentum rows
    /// against quadratic test functions, incompressibility rows against
    /// linear ones, pinned rows replaced by `x - target`. `tension` holds one
    /// active-tension value (kPa) per quadrature point per element, laid out
    /// `[element * 7 + point]` against [`QUAD_PTS`]: tension varies inside an
    /// element, and flattening it to an element constant turns a smooth
    /// wavefront into staircase load jumps the coarse mesh cannot carry.
    pub fn residual(
        &self,
        x: &[f64],
        tension: &[f64],
        out: &mut [f64],
    ) -> Result<(), MechError> {
        let n = self.n_dofs();
        assert_eq!(x.len(), n, "state length");
        assert_eq!(out.len(), n, "residual length");
        assert_eq!(
            tension.len(),
            QUAD_PTS.len() * self.mesh.n_tris(),
            "one tension value per quadrature point"
        );

        out.iter_mut().for_each(|r| *r = 0.0);
        let (c1, c2) = (self.material.c1, self.material.c2);
        let f0 = self.fiber;

        for t in 0..self.mesh.n_tris() {
            let dofs = self.element_dofs(t);
            let mut local = [0.0; 15];
            for (k, &d) in dofs.iter().enumerate() {
                local[k] = x[d];
            }
            let area = self.areas[t];

            for (q, &lambda) in QUAD_PTS.iter().enumerate() {
                let w = QUAD_WTS[q] * area;
                let ta = tension[QUAD_PTS.len() * t + q];
                let (f, p, _values, grads) = self.point_state(t, &local, lambda);
                // The polynomial energy evaluates cleanly even on inverted
                // trial states, and Newton may have to march through them:
                // the set of orientation-preserving configurations is not
                // convex, so the path between two physical equilibria can
                // cross det F < 0. Only the converged state owes det F > 0,
                // which the solver checks before reporting success.
                let det = f[0][0] * f[1][1] - f[0][1] * f[1][0];
                if !det.is_finite() {
                    return Err(MechError::NonFinite("deformation gradient"));
                }
                let cof = [[f[1][1], -f[1][0]], [-f[0][1], f[0][0]]];
                let scale = 2.0 * c2 * det - p;
                let mut pk = [
                    [2.0 * c1 * f[0][0] + scale * cof[0][0], 2.0 * c1 * f[0][1] + scale * cof[0][1]],
                    [2.0 * c1 * f[1][0] + scale * cof[1][0], 2.0 * c1 * f[1][1] + scale * cof[1][1]],
                ];
                if ta != 0.0 {
                    let ff = [
                        f[0][0] * f0[0] + f[0][1] * f0[1],
                        f[1][0] * f0[0] + f[1][1] * f0[1],
                    ];
                    let den = ff[0] * ff[0] + ff[1] * ff[1];
                    if den <= 1e-12 {
                        // The one genuine singularity: the active stress
                        // normalises by the squared fibre stretch.
                        return Err(MechError::FibreCollapsed {
                            element: t,
                            stretch_sq: den,
                        });
                    }
                    let s = ta / den;
                    pk[0][0] += s * ff[0] * f0[0];
                    pk[0][1] += s * ff[0] * f0[1];
                    pk[1][0] += s * ff[1] * f0[0];
                    pk[1][1] += s * ff[1] * f0[1];
                }

                const UX: [usize; 6] = [0, 3, 6, 9, 11, 13];
                for k in 0..6 {
                    let gx = grads[k][0];
                    let gy = grads[k][1];
                    out[dofs[UX[k]]] += w * (pk[0][0] * gx + pk[0][1] * gy);
                    out[dofs[UX[k] + 1]] += w * (pk[1][0] * gx + pk[1][1] * gy);
                }
                let slack = det - 1.0;
                out[dofs[2]] -= w * lambda[0] * slack;
                out[dofs[5]] -= w * lambda[1] * slack;
                out[dofs[8]] -= w * lambda[2] * slack;
            }
        }

        for &(dof, target) in &self.pins {
            out[dof] = x[dof] - target;
        }
        Ok(())
    }

    /// Smallest and largest volume ratio `det F` over all quadrature points.
    pub fn jacobian_range(&self, x: &[f64]) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in 0..self.mesh.n_tris() {
            let dofs = self.element_dofs(t);
            let mut local = [0.0; 15];
            for (k, &d) in dofs.iter().enumerate() {
                local[k] = x[d];
            }
            for &lambda in QUAD_PTS.iter() {
                let (f, _, _, _) = self.point_state(t, &local, lambda);
                let det = f[0][0] * f[1][1] - f[0][1] * f[1][0];
                lo = lo.min(det);
                hi = hi.max(det);
            }
        }
        (lo, hi)
    }

    /// Displacement at a barycentric point of element `t`.
    pub fn displacement_at(&self, x: &[f64], t: usize, lambda: [f64; 3]) -> [f64; 2] {
        let dofs = self.element_dofs(t);
        let (values, _) = self.p2_shapes(t, lambda);
        const UX: [usize; 6] = [0, 3, 6, 9, 11, 13];
        let mut u = [0.0, 0.0];
        for k in 0..6 {
            u[0] += values[k] * x[dofs[UX[k]]];
            u[1] += values[k] * x[dofs[UX[k] + 1]];
        }
        u
    }

    /// Deformed positions of the mesh vertices.
    pub fn vertex_positions(&self, x: &[f64]) -> Vec<[f64; 2]> {
        (0..self.mesh.n_nodes())
            .map(|v| {
                let [px, py] = self.mesh.coords()[v];
                [px + x[3 * v], py + x[3 * v + 1]]
            })
            .collect()
    }
}

/// Pin both displacement components of the vertex nearest the domain centre
/// and the vertical component of a mid-height vertex near the right edge.
fn choose_pins(mesh: &TriMesh) -> Vec<(usize, f64)> {
    let (mut x_lo, mut y_lo) = (f64::INFINITY, f64::INFINITY);
    let (mut x_hi, mut y_hi) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &[x, y] in mesh.coords() {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let cx = 0.5 * (x_lo + x_hi);
    let cy = 0.5 * (y_lo + y_hi);
    let centre = (0..mesh.n_nodes())
        .min_by(|&a, &b| {
            let pa = mesh.coords()[a];
            let pb = mesh.coords()[b];
            let da = (pa[0] - cx).hypot(pa[1] - cy);
            let db = (pb[0] - cx).hypot(pb[1] - cy);
            da.partial_cmp(&db).expect("finite coordinates")
        })
        .expect("non-empty mesh");
    let cy_star = mesh.coords()[centre][1];
    let gauge = (0..mesh.n_nodes())
        .filter(|&v| v != centre)
        .min_by(|&a, &b| {
            let pa = mesh.coords()[a];
            let pb = mesh.coords()[b];
            let da = (x_hi - pa[0]) + 2.0 * (pa[1] - cy_star).abs();
            let db = (x_hi - pb[0]) + 2.0 * (pb[1] - cy_star).abs();
            da.partial_cmp(&db).expect("finite coordinates")
        })
        .expect("mesh has at least two nodes");
    vec![(3 * centre, 0.0), (3 * centre + 1, 0.0), (3 * gauge + 1, 0.0)]
}

/// Sorted neighbour lists (self included) of the element-sharing graph over
/// degrees of freedom.
fn build_adjacency(mesh: &TriMesh, n_dofs: usize) -> Vec<Vec<usize>> {
    let base = 3 * mesh.n_nodes();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_dofs];
    for t in 0..mesh.n_tris() {
        let [a, b, c] = mesh.tri(t);
        let [e01, e12, e20] = mesh.tri_edges(t);
        let mut dofs = Vec::with_capacity(15);
        for v in [a, b, c] {
            dofs.extend([3 * v, 3 * v + 1, 3 * v + 2]);
        }
        for e in [e01, e12, e20] {
            dofs.extend([base + 2 * e, base + 2 * e + 1]);
        }
        for &i in &dofs {
            adj[i].extend(dofs.iter().copied());
        }
    }
    for (i, row) in adj.iter_mut().enumerate() {
        row.push(i); // isolated dofs still get a diagonal
        row.sort_unstable();
        row.dedup();
    }
    adj
}

/// Greedy colouring where no two same-coloured degrees of freedom are within
/// distance two of each other, so simultaneous perturbation of one colour
/// class never mixes two columns in any residual row.
fn distance_two_coloring(adjacency: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adjacency.len();
    let mut color = vec![usize::MAX; n];
    let mut classes: Vec<Vec<usize>> = Vec::new();
    // mark[c] == round means colour c appears within two hops of the current
    // dof; the stamp avoids clearing the whole array every iteration.
    let mut mark: Vec<u64> = Vec::new();
    let mut round = 0u64;
    for d in 0..n {
        round += 1;
        for &nb in &adjacency[d] {
            for &nb2 in &adjacency[nb] {
                let c = color[nb2];
                if c != usize::MAX {
                    mark[c] = round;
                }
            }
        }
        let mut pick = 0;
        while pick < mark.len() && mark[pick] == round {
            pick += 1;
        }
        if pick >= classes.len() {
            classes.push(Vec::new());
            mark.push(0);
        }
        color[d] = pick;
        classes[pick].push(d);
    }
    classes
}

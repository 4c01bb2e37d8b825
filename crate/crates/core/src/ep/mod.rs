//! Tissue electrophysiology: monodomain reaction-diffusion on a triangle
//! mesh.
//!
//! Voltage obeys `dV/dt = -(I_ion + I_stim) + div(D grad V)` with zero-flux
//! boundaries, discretised by linear finite elements over the alive part of
//! the mesh (consistent mass matrix, no lumping). Time stepping splits the
//! operator: the reaction advances each node's membrane model explicitly
//! (with its own upstroke substepping), the diffusion advances by
//! Crank-Nicolson,
//!
//! ```text
//! (M + dt/2 K) V_{n+1} = (M - dt/2 K) V_n + M (V* - V_n)
//! ```
//!
//! where `V*` is the reaction-updated voltage. The symmetric system is
//! solved by restarted GMRES warm-started from `V*` and preconditioned by an
//! incomplete LU factorisation that is reused until the geometry moves.
//!
//! The diffusion tensor is transversely anisotropic, `D = d_f f f^T +
//! d_c (I - f f^T)`, with the fibre direction co-rotated per element when
//! tissue deformation updates the node coordinates.

mod output;
mod velocity;

pub use output::{write_voltage_csv, write_voltage_pgm, write_voltage_vtk};
pub use velocity::{conduction_velocity, CvMeasurement};

use crate::cell::{advance, CellState, IonParams, RateTable};
use crate::linalg::{gmres, GmresSettings, IluPreconditioner, LinalgError, SparseMatrix};
use crate::mesh::{MeshError, TriMesh};
use thiserror::Error;

/// Errors from electrophysiology assembly and stepping.
#[derive(Debug, Error)]
pub enum EpError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("non-finite voltage at node {node} after step {step}")]
    NonFinite { node: usize, step: u64 },
    #[error("wavefront never reached probe node {probe} within {waited} ms")]
    NoActivation { probe: usize, waited: f64 },
    #[error("no conducting elements in the mesh")]
    EmptyDomain,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Transversely anisotropic diffusion: `d_fiber` along the fibre direction,
/// `d_cross` across it, in mm^2/ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSpec {
    pub d_fiber: f64,
    pub d_cross: f64,
    /// Reference fibre direction (normalised on use).
    pub fiber: [f64; 2],
}

impl Default for DiffusionSpec {
    /// Normal tissue: 0.154 mm^2/ms along the fibre, one ninth across,
    /// fibres on the domain diagonal.
    fn default() -> Self {
        DiffusionSpec {
            d_fiber: 0.154,
            d_cross: 0.154 / 9.0,
            fiber: [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2],
        }
    }
}

impl DiffusionSpec {
    /// Failing tissue conducts more slowly along the fibre; the transverse
    /// coefficient keeps its normal value.
    pub fn failing() -> Self {
        DiffusionSpec {
            d_fiber: 0.139,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), EpError> {
        if !(self.d_fiber >= 0.0) || !(self.d_cross >= 0.0) {
            return Err(EpError::BadParameter(format!(
                "diffusivities must be non-negative: {} / {}",
                self.d_fiber, self.d_cross
            )));
        }
        let norm = (self.fiber[0] * self.fiber[0] + self.fiber[1] * self.fiber[1]).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(EpError::BadParameter("fibre direction has zero length".into()));
        }
        Ok(())
    }

    fn unit_fiber(&self) -> [f64; 2] {
        let norm = (self.fiber[0] * self.fiber[0] + self.fiber[1] * self.fiber[1]).sqrt();
        [self.fiber[0] / norm, self.fiber[1] / norm]
    }

    /// 2x2 tensor for fibre direction `f` (assumed unit length).
    fn tensor(&self, f: [f64; 2]) -> [[f64; 2]; 2] {
        let (fx, fy) = (f[0], f[1]);
        let d = self.d_fiber - self.d_cross;
        [
            [self.d_cross + d * fx * fx, d * fx * fy],
            [d * fx * fy, self.d_cross + d * fy * fy],
        ]
    }
}

/// Renumbering between full mesh nodes and the conducting-node system.
#[derive(Debug, Clone)]
pub struct NodeMap {
    full_to_sys: Vec<Option<usize>>,
    sys_to_full: Vec<usize>,
}

impl NodeMap {
    fn new(mesh: &TriMesh) -> Self {
        let alive = mesh.alive_nodes();
        let mut full_to_sys = vec![None; mesh.n_nodes()];
        let mut sys_to_full = Vec::new();
        for (v, &keep) in alive.iter().enumerate() {
            if keep {
                full_to_sys[v] = Some(sys_to_full.len());
                sys_to_full.push(v);
            }
        }
        NodeMap {
            full_to_sys,
            sys_to_full,
        }
    }

    pub fn n_sys(&self) -> usize {
        self.sys_to_full.len()
    }

    pub fn sys_of(&self, full: usize) -> Option<usize> {
        self.full_to_sys[full]
    }

    pub fn full_of(&self, sys: usize) -> usize {
        self.sys_to_full[sys]
    }

    pub fn sys_nodes(&self) -> &[usize] {
        &self.sys_to_full
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepInfo {
    /// GMRES inner iterations spent on the diffusion solve.
    pub iterations: usize,
    /// Final linear residual.
    pub residual: f64,
}

/// Incomplete-LU knobs for the diffusion operator: the matrix is strongly
/// diagonally dominant at cardiac step sizes, so a lean factor suffices.
const ILU_DROP: f64 = 1e-4;
const ILU_FILL: usize = 24;

struct Operators {
    mass: SparseMatrix,
    lhs: SparseMatrix,
    rhs_mat: SparseMatrix,
    ilu: IluPreconditioner,
}

fn assemble_operators(
    mesh: &TriMesh,
    fiber: &[[f64; 2]],
    node_map: &NodeMap,
    diffusion: &DiffusionSpec,
    dt: f64,
) -> Result<Operators, EpError> {
    let n = node_map.n_sys();
    let n_alive = mesh.alive().iter().filter(|&&a| a).count();
    let mut mass_t: Vec<(usize, usize, f64)> = Vec::with_capacity(9 * n_alive);
    let mut stiff_t: Vec<(usize, usize, f64)> = Vec::with_capacity(9 * n_alive);

    for t in 0..mesh.n_tris() {
        if !mesh.is_alive(t) {
            continue;
        }
        let tri = mesh.tri(t);
        let sys_idx: [usize; 3] = [
            node_map.sys_of(tri[0]).expect("alive-element node"),
            node_map.sys_of(tri[1]).expect("alive-element node"),
            node_map.sys_of(tri[2]).expect("alive-element node"),
        ];
        let p = [
            mesh.coords()[tri[0]],
            mesh.coords()[tri[1]],
            mesh.coords()[tri[2]],
        ];
        let area = mesh.signed_area(t);
        if !(area > 0.0) {
            return Err(EpError::BadParameter(format!(
                "element {t} has non-positive area {area}"
            )));
        }
        let tensor = diffusion.tensor(fiber[t]);

        // Constant P1 basis gradients; basis i climbs from the edge opposite
        // vertex i.
        let grads = [
            [(p[1][1] - p[2][1]) / (2.0 * area), (p[2][0] - p[1][0]) / (2.0 * area)],
            [(p[2][1] - p[0][1]) / (2.0 * area), (p[0][0] - p[2][0]) / (2.0 * area)],
            [(p[0][1] - p[1][1]) / (2.0 * area), (p[1][0] - p[0][0]) / (2.0 * area)],
        ];

        for i in 0..3 {
            for j in 0..3 {
                let m = area / 12.0 * if i == j { 2.0 } else { 1.0 };
                mass_t.push((sys_idx[i], sys_idx[j], m));
                let dg = [
                    tensor[0][0] * grads[j][0] + tensor[0][1] * grads[j][1],
                    tensor[1][0] * grads[j][0] + tensor[1][1] * grads[j][1],
                ];
                let k = area * (grads[i][0] * dg[0] + grads[i][1] * dg[1]);
                stiff_t.push((sys_idx[i], sys_idx[j], k));
            }
        }
    }

    let mass = SparseMatrix::from_triplets(n, n, &mass_t)?;
    let stiff = SparseMatrix::from_triplets(n, n, &stiff_t)?;
    let lhs = mass.add_scaled(dt / 2.0, &stiff)?;
    let rhs_mat = mass.add_scaled(-dt / 2.0, &stiff)?;
    let ilu = IluPreconditioner::ilut(&lhs, ILU_DROP, ILU_FILL)?;
    Ok(Operators {
        mass,
        lhs,
        rhs_mat,
        ilu,
    })
}

/// Assembled monodomain system over the alive region of a mesh.
pub struct EpSystem {
    mesh: TriMesh,
    ref_coords: Vec<[f64; 2]>,
    /// Unit fibre direction per element, in the current (deformed) frame.
    fiber: Vec<[f64; 2]>,
    diffusion: DiffusionSpec,
    node_map: NodeMap,
    dt: f64,
    ops: Operators,
    solver: GmresSettings,
    steps_taken: u64,
    // Scratch buffers reused every step.
    v_old: Vec<f64>,
    v_star: Vec<f64>,
    rhs: Vec<f64>,
    delta: Vec<f64>,
    scratch: Vec<f64>,
}

impl EpSystem {
    /// Assemble over the alive elements of `mesh`. `solver_tol` is the
    /// relative GMRES tolerance for every diffusion solve.
    pub fn new(
        mesh: &TriMesh,
        diffusion: DiffusionSpec,
        dt: f64,
        solver_tol: f64,
    ) -> Result<Self, EpError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(EpError::BadParameter(format!("step size {dt}")));
        }
        if !(solver_tol > 0.0) || !solver_tol.is_finite() {
            return Err(EpError::BadParameter(format!(
                "solver tolerance {solver_tol}"
            )));
        }
        diffusion.validate()?;
        let node_map = NodeMap::new(mesh);
        if node_map.n_sys() == 0 {
            return Err(EpError::EmptyDomain);
        }
        let fiber = vec![diffusion.unit_fiber(); mesh.n_tris()];
        let ops = assemble_operators(mesh, &fiber, &node_map, &diffusion, dt)?;
        let n = node_map.n_sys();
        Ok(EpSystem {
            mesh: mesh.clone(),
            ref_coords: mesh.coords().to_vec(),
            fiber,
            diffusion,
            node_map,
            dt,
            ops,
            solver: GmresSettings {
                tol: solver_tol,
                max_iters: 4000,
                restart: 30,
            },
            steps_taken: 0,
            v_old: vec![0.0; n],
            v_star: vec![0.0; n],
            rhs: vec![0.0; n],
            delta: vec![0.0; n],
            scratch: vec![0.0; n],
        })
    }

    pub fn node_map(&self) -> &NodeMap {
        &self.node_map
    }

    pub fn n_sys(&self) -> usize {
        self.node_map.n_sys()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn diffusion(&self) -> &DiffusionSpec {
        &self.diffusion
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// Row sums of the mass matrix: the conducting area attributed to each
    /// node. `sum_i lumped(i) * V_i` is the voltage integral over the domain.
    pub fn lumped_mass(&self) -> Vec<f64> {
        let ones = vec![1.0; self.n_sys()];
        let mut out = vec![0.0; self.n_sys()];
        self.ops.mass.matvec(&ones, &mut out);
        out
    }

    /// Fresh resting states, one per system node.
    pub fn resting_states(&self) -> Vec<CellState> {
        vec![CellState::resting(); self.n_sys()]
    }

    /// One coupled step: explicit reaction on every node's membrane model,
    /// Crank-Nicolson diffusion on the voltage field. `stim` lists
    /// `(system node, current)` pairs active during this step (pA/pF,
    /// negative depolarises); duplicate nodes accumulate.
    pub fn step(
        &mut self,
        states: &mut [CellState],
        p: &IonParams,
        lut: Option<&RateTable>,
        stim: &[(usize, f64)],
    ) -> Result<StepInfo, EpError> {
        let n = self.n_sys();
        assert_eq!(states.len(), n, "one cell state per system node");

        // Fold the stimulus list into per-node currents for the reaction pass.
        self.scratch.iter_mut().for_each(|x| *x = 0.0);
        for &(node, current) in stim {
            assert!(node < n, "stimulus node {node} outside system");
            self.scratch[node] += current;
        }

        for (i, s) in states.iter_mut().enumerate() {
            self.v_old[i] = s.v;
            advance(s, p, lut, self.dt, self.scratch[i]);
            self.v_star[i] = s.v;
            self.delta[i] = s.v - self.v_old[i];
        }

        // rhs = (M - dt/2 K) V_n + M (V* - V_n)
        self.ops.rhs_mat.matvec(&self.v_old, &mut self.rhs);
        self.ops.mass.matvec(&self.delta, &mut self.scratch);
        for i in 0..n {
            self.rhs[i] += self.scratch[i];
        }

        let out = gmres(
            &self.ops.lhs,
            &self.rhs,
            &self.v_star,
            Some(&self.ops.ilu),
            &self.solver,
        )?;
        self.steps_taken += 1;
        for (i, s) in states.iter_mut().enumerate() {
            s.v = out.x[i];
            if !s.v.is_finite() {
                return Err(EpError::NonFinite {
                    node: self.node_map.full_of(i),
                    step: self.steps_taken,
                });
            }
        }
        Ok(StepInfo {
            iterations: out.iterations,
            residual: out.residual,
        })
    }

    /// Crank-Nicolson diffusion of a raw voltage vector, no reaction.
    pub fn diffuse_only(&mut self, v: &mut [f64]) -> Result<StepInfo, EpError> {
        assert_eq!(v.len(), self.n_sys());
        self.ops.rhs_mat.matvec(v, &mut self.rhs);
        let out = gmres(&self.ops.lhs, &self.rhs, v, Some(&self.ops.ilu), &self.solver)?;
        self.steps_taken += 1;
        v.copy_from_slice(&out.x);
        Ok(StepInfo {
            iterations: out.iterations,
            residual: out.residual,
        })
    }

    /// Move the mesh nodes, co-rotate each element's fibre by its local
    /// deformation gradient (reference -> new coordinates), then reassemble
    /// the operators in the deformed frame and refactor the preconditioner.
    pub fn update_geometry(&mut self, coords: Vec<[f64; 2]>) -> Result<(), EpError> {
        if coords.len() != self.ref_coords.len() {
            return Err(EpError::BadParameter(format!(
                "geometry update with {} coordinates for {} nodes",
                coords.len(),
                self.ref_coords.len()
            )));
        }
        let f0 = self.diffusion.unit_fiber();

        // Per-element deformation gradient from reference edges to new edges.
        for t in 0..self.mesh.n_tris() {
            if !self.mesh.is_alive(t) {
                continue;
            }
            let [a, b, c] = self.mesh.tri(t);
            let (ra, rb, rc) = (self.ref_coords[a], self.ref_coords[b], self.ref_coords[c]);
            let (na, nb, nc) = (coords[a], coords[b], coords[c]);
            let e1r = [rb[0] - ra[0], rb[1] - ra[1]];
            let e2r = [rc[0] - ra[0], rc[1] - ra[1]];
            let e1n = [nb[0] - na[0], nb[1] - na[1]];
            let e2n = [nc[0] - na[0], nc[1] - na[1]];
            let det = e1r[0] * e2r[1] - e2r[0] * e1r[1];
            // F = [e1n e2n] [e1r e2r]^{-1}
            let inv = [
                [e2r[1] / det, -e2r[0] / det],
                [-e1r[1] / det, e1r[0] / det],
            ];
            let f_mat = [
                [
                    e1n[0] * inv[0][0] + e2n[0] * inv[1][0],
                    e1n[0] * inv[0][1] + e2n[0] * inv[1][1],
                ],
                [
                    e1n[1] * inv[0][0] + e2n[1] * inv[1][0],
                    e1n[1] * inv[0][1] + e2n[1] * inv[1][1],
                ],
            ];
            let rotated = [
                f_mat[0][0] * f0[0] + f_mat[0][1] * f0[1],
                f_mat[1][0] * f0[0] + f_mat[1][1] * f0[1],
            ];
            let len = (rotated[0] * rotated[0] + rotated[1] * rotated[1]).sqrt();
            if !(len > 0.0) || !len.is_finite() {
                return Err(EpError::BadParameter(format!(
                    "deformation collapses the fibre direction in element {t}"
                )));
            }
            self.fiber[t] = [rotated[0] / len, rotated[1] / len];
        }

        self.mesh.set_coords(coords)?;
        self.ops = assemble_operators(&self.mesh, &self.fiber, &self.node_map, &self.diffusion, self.dt)?;
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn element_fiber(&self, t: usize) -> [f64; 2] {
        self.fiber[t]
    }

    #[cfg(test)]
    pub(crate) fn lhs_matrix(&self) -> &SparseMatrix {
        &self.ops.lhs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate_square_mesh;

    fn small_system(side: f64, edge: f64, d: DiffusionSpec) -> EpSystem {
        let mesh = generate_square_mesh(side, edge, 11).unwrap();
        EpSystem::new(&mesh, d, 0.08, 1e-9).unwrap()
    }

    #[test]
    fn mass_matrix_integrates_to_the_domain_area() {
        let sys = small_system(6.0, 0.5, DiffusionSpec::default());
        let lumped = sys.lumped_mass();
        let total: f64 = lumped.iter().sum();
        assert!((total - 36.0).abs() < 1e-9, "area {total}");
    }

    #[test]
    fn stiffness_annihilates_constant_fields() {
        // (M + dt/2 K) 1 must equal M 1: zero-flux boundaries carry no
        // current out of a uniform field.
        let sys = small_system(6.0, 0.5, DiffusionSpec::default());
        let ones = vec![1.0; sys.n_sys()];
        let mut lhs1 = vec![0.0; sys.n_sys()];
        sys.lhs_matrix().matvec(&ones, &mut lhs1);
        let lumped = sys.lumped_mass();
        for i in 0..sys.n_sys() {
            assert!(
                (lhs1[i] - lumped[i]).abs() < 1e-12,
                "row {i}: {} vs {}",
                lhs1[i],
                lumped[i]
            );
        }
    }

    #[test]
    fn diffusion_conserves_the_voltage_integral() {
        let mesh = generate_square_mesh(6.0, 0.5, 3).unwrap();
        let mut sys = EpSystem::new(&mesh, DiffusionSpec::default(), 0.08, 1e-12).unwrap();
        let n = sys.n_sys();
        let lumped = sys.lumped_mass();
        let mut v: Vec<f64> = (0..n).map(|i| ((i * 7919) % 97) as f64 - 48.0).collect();
        let total0: f64 = (0..n).map(|i| lumped[i] * v[i]).sum();
        // Scale for the drift bound: the L1 mass of the field, not its
        // (possibly cancelling) integral.
        let scale: f64 = (0..n).map(|i| lumped[i] * v[i].abs()).sum();
        for _ in 0..100 {
            sys.diffuse_only(&mut v).unwrap();
        }
        let total: f64 = (0..n).map(|i| lumped[i] * v[i]).sum();
        assert!(
            (total - total0).abs() < 1e-9 * scale,
            "integral drifted {total0} -> {total} (scale {scale})"
        );
        // And the high-frequency texture flattens toward the mean.
        let mean = total0 / lumped.iter().sum::<f64>();
        let spread = v.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
        assert!(spread < 40.0, "still rough after smoothing: {spread}");
    }

    #[test]
    fn zero_diffusivity_reduces_to_the_single_cell() {
        let d0 = DiffusionSpec {
            d_fiber: 0.0,
            d_cross: 0.0,
            fiber: [1.0, 0.0],
        };
        let mesh = generate_square_mesh(3.0, 0.5, 5).unwrap();
        let mut sys = EpSystem::new(&mesh, d0, 0.08, 1e-11).unwrap();
        let p = IonParams::baseline();
        let mut states = sys.resting_states();
        let mut lone = CellState::resting();

        let steps = (60.0 / 0.08) as usize;
        for k in 0..steps {
            let t = k as f64 * 0.08;
            let current = if t < 1.0 { -52.0 } else { 0.0 };
            let stim: Vec<(usize, f64)> = (0..sys.n_sys()).map(|i| (i, current)).collect();
            sys.step(&mut states, &p, None, &stim).unwrap();
            advance(&mut lone, &p, None, 0.08, current);
        }
        for s in &states {
            assert!(
                (s.v - lone.v).abs() < 1e-3,
                "tissue {} vs lone cell {}",
                s.v,
                lone.v
            );
        }
    }

    #[test]
    fn quiescent_tissue_stays_at_rest() {
        let mut sys = small_system(4.0, 0.4, DiffusionSpec::default());
        let p = IonParams::baseline();
        let mut states = sys.resting_states();
        for _ in 0..250 {
            sys.step(&mut states, &p, None, &[]).unwrap();
        }
        for s in &states {
            assert!((s.v + 85.23).abs() < 0.05, "drifted to {}", s.v);
        }
    }

    #[test]
    fn stimulated_edge_launches_a_wave() {
        let mesh = generate_square_mesh(8.0, 0.35, 1).unwrap();
        let mut sys = EpSystem::new(&mesh, DiffusionSpec::default(), 0.08, 1e-9).unwrap();
        let p = IonParams::baseline();
        let lut = RateTable::new(&p, 0.08);
        let mut states = sys.resting_states();
        let left: Vec<(usize, f64)> = (0..sys.n_sys())
            .filter(|&i| sys.mesh().coords()[sys.node_map().full_of(i)][0] < 0.75)
            .map(|i| (i, -52.0))
            .collect();
        assert!(!left.is_empty());

        let mut right_activated = f64::NAN;
        let steps = (40.0 / 0.08) as usize;
        for k in 0..steps {
            let t = k as f64 * 0.08;
            let stim: &[(usize, f64)] = if t < 1.0 { &left } else { &[] };
            sys.step(&mut states, &p, Some(&lut), stim).unwrap();
            if right_activated.is_nan() {
                let fired = (0..sys.n_sys()).any(|i| {
                    sys.mesh().coords()[sys.node_map().full_of(i)][0] > 7.5 && states[i].v > 0.0
                });
                if fired {
                    right_activated = t;
                }
            }
        }
        assert!(
            right_activated > 5.0 && right_activated < 35.0,
            "far edge activated at {right_activated} ms"
        );
    }

    #[test]
    fn geometry_update_rotates_fibres_with_the_deformation() {
        let mesh = generate_square_mesh(4.0, 0.5, 9).unwrap();
        let d = DiffusionSpec {
            fiber: [1.0, 0.0],
            ..Default::default()
        };
        let mut sys = EpSystem::new(&mesh, d, 0.08, 1e-9).unwrap();
        // Rotate the whole mesh a quarter turn about its centre.
        let rotated: Vec<[f64; 2]> = mesh
            .coords()
            .iter()
            .map(|&[x, y]| {
                let (cx, cy) = (2.0, 2.0);
                [cx - (y - cy), cy + (x - cx)]
            })
            .collect();
        sys.update_geometry(rotated).unwrap();
        for t in 0..sys.mesh().n_tris() {
            let f = sys.element_fiber(t);
            assert!(
                f[0].abs() < 1e-12 && (f[1] - 1.0).abs() < 1e-12,
                "fibre {f:?}"
            );
        }
    }

    #[test]
    fn update_with_wrong_node_count_is_rejected() {
        let mut sys = small_system(4.0, 0.5, DiffusionSpec::default());
        let err = sys.update_geometry(vec![[0.0, 0.0]; 3]).unwrap_err();
        assert!(matches!(err, EpError::BadParameter(_)));
    }

    #[test]
    fn anisotropy_spreads_faster_along_the_fibre() {
        // Diffuse a central bump with strong anisotropy along x and compare
        // second moments of the smoothed field in x vs y.
        let mesh = generate_square_mesh(6.0, 0.3, 13).unwrap();
        let d = DiffusionSpec {
            d_fiber: 0.154,
            d_cross: 0.154 / 9.0,
            fiber: [1.0, 0.0],
        };
        let mut sys = EpSystem::new(&mesh, d, 0.08, 1e-10).unwrap();
        let n = sys.n_sys();
        let mut v = vec![0.0; n];
        for i in 0..n {
            let [x, y] = sys.mesh().coords()[sys.node_map().full_of(i)];
            if (x - 3.0).hypot(y - 3.0) < 0.4 {
                v[i] = 100.0;
            }
        }
        for _ in 0..120 {
            sys.diffuse_only(&mut v).unwrap();
        }
        let lumped = sys.lumped_mass();
        let (mut sx, mut sy, mut mass) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let [x, y] = sys.mesh().coords()[sys.node_map().full_of(i)];
            let w = lumped[i] * v[i].max(0.0);
            sx += w * (x - 3.0) * (x - 3.0);
            sy += w * (y - 3.0) * (y - 3.0);
            mass += w;
        }
        let (sx, sy) = (sx / mass, sy / mass);
        assert!(sx > 2.5 * sy, "fibre-direction variance {sx} vs cross {sy}");
    }

    #[test]
    fn dead_elements_block_conduction() {
        // Split the domain with a dead column: the right half must stay
        // quiescent when the left is stimulated.
        let mesh = generate_square_mesh(8.0, 0.4, 17).unwrap();
        let mut alive = mesh.alive().to_vec();
        for t in 0..mesh.n_tris() {
            let c = mesh.centroid(t);
            if c[0] > 3.5 && c[0] < 4.5 {
                alive[t] = false;
            }
        }
        let mut mesh = mesh;
        mesh.set_alive(alive).unwrap();
        let mut sys = EpSystem::new(&mesh, DiffusionSpec::default(), 0.08, 1e-9).unwrap();
        let p = IonParams::baseline();
        let lut = RateTable::new(&p, 0.08);
        let mut states = sys.resting_states();
        let left: Vec<(usize, f64)> = (0..sys.n_sys())
            .filter(|&i| sys.mesh().coords()[sys.node_map().full_of(i)][0] < 0.8)
            .map(|i| (i, -52.0))
            .collect();
        let steps = (40.0 / 0.08) as usize;
        for k in 0..steps {
            let t = k as f64 * 0.08;
            let stim: &[(usize, f64)] = if t < 1.0 { &left } else { &[] };
            sys.step(&mut states, &p, Some(&lut), stim).unwrap();
        }
        let mut left_fired = false;
        for i in 0..sys.n_sys() {
            let [x, _] = sys.mesh().coords()[sys.node_map().full_of(i)];
            if x < 3.0 && states[i].v > -80.0 {
                left_fired = true;
            }
            if x > 5.0 {
                assert!(
                    (states[i].v + 85.23).abs() < 0.5,
                    "node at x={x} crossed the barrier: {}",
                    states[i].v
                );
            }
        }
        assert!(left_fired, "stimulated side never activated");
    }
}

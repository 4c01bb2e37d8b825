//! Matrix-free Newton-Krylov solution of the mechanics residual.
//!
//! Each Newton step solves `J dx = -R` by restarted GMRES where `J v` is a
//! one-sided finite difference of the residual along `v` — the Jacobian is
//! never formed for the iteration itself. What is formed, column group by
//! column group, is a sampled Jacobian for the preconditioner: the
//! distance-two colouring from the system guarantees that perturbing all
//! degrees of freedom of one colour at once still attributes every residual
//! row to exactly one column. The sampled matrix — with its zero pressure
//! diagonals nudged off zero so dropping cannot strand a pivot — is
//! factorised by incomplete LU and reused across Newton iterations (and
//! across solves) until GMRES shows signs of struggling, since refactoring
//! costs as many residual sweeps as there are colours.
//!
//! Steps are safeguarded by a norm cap and a halving line search. Trial
//! states are free to invert elements — the polynomial strain energy
//! evaluates there and the set of orientation-preserving states is not
//! convex, so the path between two equilibria may have to cross it — but a
//! converged solution must come back out: the solver rejects any "solution"
//! whose volume ratio is not positive everywhere.

use super::{MechError, MechSystem};
use crate::linalg::{
    gmres, norm2, GmresSettings, IluPreconditioner, LinearOperator, SparseMatrix,
};
use std::sync::Mutex;

/// Relative scale of the per-column perturbation used when sampling the
/// preconditioner Jacobian.
const COLUMN_FD_EPS: f64 = 1e-7;
/// Scale of the directional perturbation inside the matrix-free product.
const DIRECTIONAL_FD_EPS: f64 = 1.5e-8;
const MECH_ILU_DROP: f64 = 1e-4;
const MECH_ILU_FILL: usize = 48;
/// Stabilising shift added to each pressure diagonal before factorisation,
/// relative to that row's norm. The incompressibility block has exactly zero
/// diagonal, and while the matrix factorises stably with full fill, the
/// dropped fill-in of an incomplete factorisation can leave those pivots
/// catastrophically small. The shift bounds them away from zero; it touches
/// only the preconditioner, never the system GMRES actually solves.
const PRESSURE_SHIFT_REL: f64 = 1e-2;

/// A linear solve that failed to reach its target still yields a usable
/// inexact Newton direction when its residual is below this fraction of the
/// nonlinear residual norm; the line search judges the step either way.
const INEXACT_ACCEPT: f64 = 0.5;

/// Knobs for the nonlinear solve.
#[derive(Debug, Clone)]
pub struct NewtonSettings {
    /// Converged when the residual norm falls below
    /// `max(rel_tol * initial, abs_tol)`.
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iters: usize,
    /// Step halvings allowed before the line search gives up.
    pub max_backtracks: usize,
    /// Cap on the norm of a Newton step. Near a fold in the equilibrium
    /// path the Jacobian is close to singular and raw directions blow up by
    /// orders of magnitude; clipping keeps the line search among states the
    /// residual can actually distinguish.
    pub max_step: f64,
    /// Inner linear solver settings.
    pub linear: GmresSettings,
    /// Refactor the preconditioner before the next step when a linear solve
    /// needed more iterations than this.
    pub stale_linear_iters: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_iters: 30,
            max_backtracks: 10,
            max_step: 50.0,
            linear: GmresSettings {
                tol: 1e-6,
                max_iters: 3000,
                restart: 80,
            },
            stale_linear_iters: 250,
        }
    }
}

/// What one nonlinear solve did.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub newton_iters: usize,
    /// Total inner GMRES iterations.
    pub linear_iters: usize,
    pub residual_norm: f64,
    /// Residual norm before each step and after the last.
    pub residual_history: Vec<f64>,
    pub rebuilt_preconditioner: bool,
}

/// Sample the Jacobian of the residual at `x` through grouped forward
/// differences on the system's colour classes.
pub fn fd_jacobian(
    sys: &MechSystem,
    x: &[f64],
    tension: &[f64],
) -> Result<SparseMatrix, MechError> {
    let n = sys.n_dofs();
    assert_eq!(x.len(), n);
    let mut r0 = vec![0.0; n];
    sys.residual(x, tension, &mut r0)?;

    let nnz_estimate: usize = sys.adjacency().iter().map(|row| row.len()).sum();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(nnz_estimate);
    let mut xp = x.to_vec();
    let mut rp = vec![0.0; n];

    for class in sys.colors() {
        for &j in class {
            xp[j] = x[j] + COLUMN_FD_EPS * (1.0 + x[j].abs());
        }
        sys.residual(&xp, tension, &mut rp)?;
        for &j in class {
            let eps = xp[j] - x[j];
            for &i in &sys.adjacency()[j] {
                triplets.push((i, j, (rp[i] - r0[i]) / eps));
            }
            xp[j] = x[j];
        }
    }
    Ok(SparseMatrix::from_triplets(n, n, &triplets)?)
}

/// Copy of a sampled Jacobian with the pressure diagonals pulled off zero,
/// suitable for incomplete factorisation.
pub fn stabilized_for_factorization(
    sys: &MechSystem,
    jac: &SparseMatrix,
) -> Result<SparseMatrix, MechError> {
    let n = jac.n_rows();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(jac.nnz() + n);
    for r in 0..n {
        let (cols, vals) = jac.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            triplets.push((r, c, v));
        }
    }
    for v in 0..sys.mesh().n_nodes() {
        let p = 3 * v + 2;
        let (_, vals) = jac.row(p);
        let row_norm = vals.iter().map(|w| w * w).sum::<f64>().sqrt();
        triplets.push((p, p, -PRESSURE_SHIFT_REL * row_norm));
    }
    Ok(SparseMatrix::from_triplets(n, n, &triplets)?)
}

/// Directional finite difference of the residual, presented as a linear
/// operator for GMRES. Probe states where the residual itself fails (a
/// collapsed fibre direction) poison the operator instead of panicking; the
/// solver checks and recovers.
struct JvOperator<'a> {
    sys: &'a MechSystem,
    x: &'a [f64],
    tension: &'a [f64],
    r0: &'a [f64],
    x_norm: f64,
    scratch: Mutex<(Vec<f64>, Vec<f64>)>,
    poisoned: Mutex<Option<MechError>>,
}

impl<'a> JvOperator<'a> {
    fn new(sys: &'a MechSystem, x: &'a [f64], tension: &'a [f64], r0: &'a [f64]) -> Self {
        let n = x.len();
        JvOperator {
            sys,
            x,
            tension,
            r0,
            x_norm: norm2(x),
            scratch: Mutex::new((vec![0.0; n], vec![0.0; n])),
            poisoned: Mutex::new(None),
        }
    }

    fn take_poison(&self) -> Option<MechError> {
        self.poisoned.lock().unwrap().take()
    }
}

impl LinearOperator for JvOperator<'_> {
    fn dim(&self) -> usize {
        self.r0.len()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let v_norm = norm2(v);
        if v_norm == 0.0 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        // Perturbation of fixed absolute size along v, whatever GMRES hands
        // us: eps * |v| = DIRECTIONAL_FD_EPS * (1 + |x|).
        let eps = DIRECTIONAL_FD_EPS * (1.0 + self.x_norm) / v_norm;
        let (xp, rp) = &mut *self.scratch.lock().unwrap();
        for i in 0..xp.len() {
            xp[i] = self.x[i] + eps * v[i];
        }
        match self.sys.residual(xp, self.tension, rp) {
            Ok(()) => {
                for i in 0..out.len() {
                    out[i] = (rp[i] - self.r0[i]) / eps;
                }
            }
            Err(e) => {
                *self.poisoned.lock().unwrap() = Some(e);
                out.iter_mut().for_each(|o| *o = 0.0);
            }
        }
    }
}

/// Second-order warm start for a sequence of related solves: linear
/// extrapolation from the two previous converged states.
pub fn extrapolate(prev: &[f64], before: &[f64]) -> Vec<f64> {
    assert_eq!(prev.len(), before.len());
    prev.iter()
        .zip(before)
        .map(|(&a, &b)| 2.0 * a - b)
        .collect()
}

/// Newton-Krylov driver owning the (lazily rebuilt) preconditioner.
pub struct NewtonSolver {
    pub settings: NewtonSettings,
    ilu: Option<IluPreconditioner>,
    needs_rebuild: bool,
}

impl NewtonSolver {
    pub fn new(settings: NewtonSettings) -> Self {
        NewtonSolver {
            settings,
            ilu: None,
            needs_rebuild: true,
        }
    }

    /// Force the next solve to refactor the preconditioner (call after a
    /// large change in tension or geometry).
    pub fn invalidate_preconditioner(&mut self) {
        self.needs_rebuild = true;
    }

    fn rebuild(
        &mut self,
        sys: &MechSystem,
        x: &[f64],
        tension: &[f64],
    ) -> Result<(), MechError> {
        let j = fd_jacobian(sys, x, tension)?;
        let stab = stabilized_for_factorization(sys, &j)?;
        self.ilu = Some(IluPreconditioner::ilut(&stab, MECH_ILU_DROP, MECH_ILU_FILL)?);
        self.needs_rebuild = false;
        Ok(())
    }

    /// Drive `x` to equilibrium under the given per-element tension.
    pub fn solve(
        &mut self,
        sys: &MechSystem,
        x: &mut [f64],
        tension: &[f64],
    ) -> Result<SolveReport, MechError> {
        let n = sys.n_dofs();
        assert_eq!(x.len(), n, "state length");
        let mut r = vec![0.0; n];
        sys.residual(x, tension, &mut r)?;
        let mut r_norm = norm2(&r);
        if !r_norm.is_finite() {
            return Err(MechError::NonFinite("initial residual"));
        }
        let target = (self.settings.rel_tol * r_norm).max(self.settings.abs_tol);
        let mut history = vec![r_norm];
        let mut linear_total = 0;
        let mut rebuilt_any = false;

        let mut neg_r = vec![0.0; n];
        let zero = vec![0.0; n];
        let mut trial = vec![0.0; n];
        let mut r_trial = vec![0.0; n];

        for it in 0..self.settings.max_iters {
            if r_norm <= target {
                // Trial states were allowed to invert along the way; the
                // answer is not.
                let (lo, _) = sys.jacobian_range(x);
                if lo <= 0.0 {
                    return Err(MechError::UnphysicalSolution { det: lo });
                }
                return Ok(SolveReport {
                    newton_iters: it,
                    linear_iters: linear_total,
                    residual_norm: r_norm,
                    residual_history: history,
                    rebuilt_preconditioner: rebuilt_any,
                });
            }
            if self.ilu.is_none() || self.needs_rebuild {
                self.rebuild(sys, x, tension)?;
                rebuilt_any = true;
            }
            for i in 0..n {
                neg_r[i] = -r[i];
            }

            // Linear solve with one refactor-and-retry on failure. A solve
            // that gave up with a residual already well below the nonlinear
            // one still provides an inexact Newton direction.
            let mut fresh = false;
            let mut direction = loop {
                let op = JvOperator::new(sys, x, tension, &r);
                let attempt = gmres(&op, &neg_r, &zero, self.ilu.as_ref(), &self.settings.linear);
                let poison = op.take_poison();
                match (attempt, poison) {
                    (Ok(out), None) => {
                        linear_total += out.iterations;
                        if out.iterations > self.settings.stale_linear_iters {
                            self.needs_rebuild = true;
                        }
                        break out.x;
                    }
                    (
                        Err(crate::linalg::LinalgError::GmresFailure {
                            iterations,
                            residual,
                            partial,
                            ..
                        }),
                        None,
                    ) if fresh && residual <= INEXACT_ACCEPT * r_norm => {
                        linear_total += iterations;
                        self.needs_rebuild = true;
                        break partial;
                    }
                    (_, Some(poison)) if fresh => return Err(poison),
                    (Err(e), None) if fresh => return Err(e.into()),
                    _ => {
                        self.rebuild(sys, x, tension)?;
                        rebuilt_any = true;
                        fresh = true;
                    }
                }
            };
            let step_norm = norm2(&direction);
            if step_norm > self.settings.max_step {
                let scale = self.settings.max_step / step_norm;
                direction.iter_mut().for_each(|d| *d *= scale);
            }

            // Backtracking line search; a trial whose residual will not
            // evaluate (collapsed fibre) just shrinks the step.
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..=self.settings.max_backtracks {
                for i in 0..n {
                    trial[i] = x[i] + alpha * direction[i];
                }
                match sys.residual(&trial, tension, &mut r_trial) {
                    Ok(()) => {
                        let t_norm = norm2(&r_trial);
                        if t_norm.is_finite() && t_norm < r_norm {
                            x.copy_from_slice(&trial);
                            r.copy_from_slice(&r_trial);
                            r_norm = t_norm;
                            accepted = true;
                            break;
                        }
                    }
                    Err(MechError::FibreCollapsed { .. }) => {}
                    Err(e) => return Err(e),
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(MechError::LineSearchStalled { residual: r_norm });
            }
            history.push(r_norm);
        }

        if r_norm <= target {
            let (lo, _) = sys.jacobian_range(x);
            if lo <= 0.0 {
                return Err(MechError::UnphysicalSolution { det: lo });
            }
            Ok(SolveReport {
                newton_iters: self.settings.max_iters,
                linear_iters: linear_total,
                residual_norm: r_norm,
                residual_history: history,
                rebuilt_preconditioner: rebuilt_any,
            })
        } else {
            Err(MechError::OutOfIterations {
                iterations: self.settings.max_iters,
                residual: r_norm,
            })
        }
    }
}

//! Restarted GMRES with optional right preconditioning.
//!
//! Right preconditioning keeps the Arnoldi residual equal to the true residual
//! of the original system, so the convergence test needs no extra solves and
//! iteration counts stay comparable with the unpreconditioned solver.

use super::{dot, norm2, GmresFailureKind, IluPreconditioner, LinalgError, LinearOperator};

/// Knobs for a GMRES solve.
#[derive(Debug, Clone)]
pub struct GmresSettings {
    /// Convergence target: final residual norm at or below `tol * ||rhs||`.
    pub tol: f64,
    /// Total inner-iteration budget across restarts.
    pub max_iters: usize,
    /// Krylov subspace length between restarts.
    pub restart: usize,
}

impl Default for GmresSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 2000,
            restart: 50,
        }
    }
}

/// Outcome of a converged solve.
#[derive(Debug, Clone)]
pub struct GmresOutcome {
    /// Solution vector.
    pub x: Vec<f64>,
    /// Total inner iterations performed.
    pub iterations: usize,
    /// True residual norm `||b - A x||` at exit.
    pub residual: f64,
    /// Residual-norm estimate after every inner iteration.
    pub history: Vec<f64>,
}

/// Solve `A x = b` (optionally right-preconditioned by an incomplete LU
/// factorization) starting from `x0`. Returns an error if the iteration
/// budget runs out or a restart cycle makes no progress.
pub fn gmres<Op: LinearOperator + ?Sized>(
    op: &Op,
    rhs: &[f64],
    x0: &[f64],
    precond: Option<&IluPreconditioner>,
    settings: &GmresSettings,
) -> Result<GmresOutcome, LinalgError> {
    let n = op.dim();
    if rhs.len() != n || x0.len() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "operator dim {n}, rhs {}, x0 {}",
            rhs.len(),
            x0.len()
        )));
    }
    if let Some(p) = precond {
        if p.dim() != n {
            return Err(LinalgError::DimensionMismatch(format!(
                "operator dim {n}, preconditioner dim {}",
                p.dim()
            )));
        }
    }
    if !rhs.iter().all(|v| v.is_finite()) {
        return Err(LinalgError::NonFinite("gmres right-hand side"));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(LinalgError::NonFinite("gmres initial guess"));
    }
    let restart = settings.restart.max(1);
    let b_norm = norm2(rhs);
    if b_norm == 0.0 {
        return Ok(GmresOutcome {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
            history: Vec::new(),
        });
    }
    let target = settings.tol * b_norm;

    let mut x = x0.to_vec();
    let mut iterations = 0usize;
    let mut history = Vec::new();

    // Arnoldi workspace, allocated once per solve.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(restart + 1);
    let mut h = vec![0.0f64; (restart + 1) * restart]; // column-major Hessenberg
    let mut cs = vec![0.0f64; restart];
    let mut sn = vec![0.0f64; restart];
    let mut g = vec![0.0f64; restart + 1];
    let mut w = vec![0.0f64; n];
    let mut pw = vec![0.0f64; n];

    let mut residual = {
        op.apply(&x, &mut w);
        let mut r0 = rhs.to_vec();
        for i in 0..n {
            r0[i] -= w[i];
        }
        norm2(&r0)
    };
    if residual <= target {
        return Ok(GmresOutcome {
            x,
            iterations: 0,
            residual,
            history,
        });
    }

    loop {
        // Start a cycle from the current iterate.
        op.apply(&x, &mut w);
        let mut r = rhs.to_vec();
        for i in 0..n {
            r[i] -= w[i];
        }
        let beta = norm2(&r);
        if !beta.is_finite() {
            return Err(LinalgError::NonFinite("gmres residual"));
        }
        if beta <= target {
            return Ok(GmresOutcome {
                x,
                iterations,
                residual: beta,
                history,
            });
        }
        let cycle_start_residual = beta;
        basis.clear();
        for v in &mut r {
            *v /= beta;
        }
        basis.push(r);
        g.iter_mut().for_each(|v| *v = 0.0);
        g[0] = beta;

        let mut k_used = 0;
        for k in 0..restart {
            if iterations >= settings.max_iters {
                break;
            }
            iterations += 1;
            k_used = k + 1;

            // w = A M^{-1} v_k  (or A v_k without preconditioning).
            let vk = &basis[k];
            match precond {
                Some(p) => {
                    p.apply(vk, &mut pw);
                    op.apply(&pw, &mut w);
                }
                None => op.apply(vk, &mut w),
            }

            // Modified Gram-Schmidt against the existing basis.
            for j in 0..=k {
                let hjk = dot(&basis[j], &w);
                h[j + k * (restart + 1)] = hjk;
                let vj = &basis[j];
                for i in 0..n {
                    w[i] -= hjk * vj[i];
                }
            }
            let wnorm = norm2(&w);
            if !wnorm.is_finite() {
                return Err(LinalgError::NonFinite("gmres Arnoldi vector"));
            }
            h[(k + 1) + k * (restart + 1)] = wnorm;

            // Apply accumulated Givens rotations to the new column.
            for j in 0..k {
                let col = k * (restart + 1);
                let t = cs[j] * h[j + col] + sn[j] * h[j + 1 + col];
                h[j + 1 + col] = -sn[j] * h[j + col] + cs[j] * h[j + 1 + col];
                h[j + col] = t;
            }
            let col = k * (restart + 1);
            let (c, s) = givens(h[k + col], h[k + 1 + col]);
            cs[k] = c;
            sn[k] = s;
            h[k + col] = c * h[k + col] + s * h[k + 1 + col];
            h[k + 1 + col] = 0.0;
            g[k + 1] = -s * g[k];
            g[k] *= c;
            let estimate = g[k + 1].abs();
            history.push(estimate);

            let lucky = wnorm <= f64::EPSILON * estimate.max(b_norm);
            if !lucky {
                let mut v = w.clone();
                for vi in &mut v {
                    *vi /= wnorm;
                }
                basis.push(v);
            }
            if estimate <= target || lucky {
                break;
            }
        }

        // y = H^{-1} g by back substitution, then x += (M^{-1}) V y.
        if k_used > 0 {
            let mut y = vec![0.0f64; k_used];
            for i in (0..k_used).rev() {
                let mut acc = g[i];
                for j in i + 1..k_used {
                    acc -= h[i + j * (restart + 1)] * y[j];
                }
                let d = h[i + i * (restart + 1)];
                y[i] = if d.abs() > 0.0 { acc / d } else { 0.0 };
            }
            w.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..k_used {
                let vj = &basis[j];
                let yj = y[j];
                for i in 0..n {
                    w[i] += yj * vj[i];
                }
            }
            match precond {
                Some(p) => {
                    p.apply(&w, &mut pw);
                    for i in 0..n {
                        x[i] += pw[i];
                    }
                }
                None => {
                    for i in 0..n {
                        x[i] += w[i];
                    }
                }
            }
        }

        // True residual decides convergence; the Givens estimate drifts when
        // the basis loses orthogonality.
        op.apply(&x, &mut w);
        let mut true_norm_sq = 0.0;
        for i in 0..n {
            let d = rhs[i] - w[i];
            true_norm_sq += d * d;
        }
        residual = true_norm_sq.sqrt();
        if !residual.is_finite() {
            return Err(LinalgError::NonFinite("gmres iterate"));
        }
        if residual <= target {
            return Ok(GmresOutcome {
                x,
                iterations,
                residual,
                history,
            });
        }
        if iterations >= settings.max_iters {
            return Err(LinalgError::GmresFailure {
                kind: GmresFailureKind::MaxIterations,
                iterations,
                residual,
                target,
                partial: x,
            });
        }
        if residual >= cycle_start_residual * (1.0 - 1e-12) {
            return Err(LinalgError::GmresFailure {
                kind: GmresFailureKind::Stagnation,
                iterations,
                residual,
                target,
                partial: x,
            });
        }
    }
}

/// Givens rotation zeroing `b` against `a`, robust to either being zero.
fn givens(a: f64, b: f64) -> (f64, f64) {
    if b == 0.0 {
        (1.0, 0.0)
    } else if a == 0.0 {
        (0.0, 1.0)
    } else {
        let r = a.hypot(b);
        (a / r, b / r)
    }
}

#[cfg(test)]
mod tests {
    use super::super::SparseMatrix;
    use super::*;

    fn settings(tol: f64) -> GmresSettings {
        GmresSettings {
            tol,
            max_iters: 1000,
            restart: 50,
        }
    }

    #[test]
    fn identity_converges_in_one_iteration() {
        let a = SparseMatrix::identity(7);
        let b = vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0, -1.0];
        let out = gmres(&a, &b, &vec![0.0; 7], None, &settings(1e-12)).unwrap();
        assert_eq!(out.iterations, 1);
        for (xi, bi) in out.x.iter().zip(&b) {
            assert!((xi - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_recovers_the_exact_solution() {
        // [[4, 1], [1, 3]] x = [1, 2]  =>  x = [1/11, 7/11]
        let a = SparseMatrix::from_triplets(
            2,
            2,
            &[(0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0)],
        )
        .unwrap();
        let out = gmres(&a, &[1.0, 2.0], &[0.0, 0.0], None, &settings(1e-12)).unwrap();
        assert!((out.x[0] - 1.0 / 11.0).abs() < 1e-10);
        assert!((out.x[1] - 7.0 / 11.0).abs() < 1e-10);
    }

    #[test]
    fn diagonal_system_converges_well_under_dimension() {
        let n = 100;
        let trip: Vec<_> = (0..n).map(|i| (i, i, (i + 1) as f64)).collect();
        let a = SparseMatrix::from_triplets(n, n, &trip).unwrap();
        let b = vec![1.0; n];
        let out = gmres(&a, &b, &vec![0.0; n], None, &settings(1e-10)).unwrap();
        assert!(out.iterations < n, "took {} iterations", out.iterations);
        for i in 0..n {
            assert!((out.x[i] - 1.0 / (i + 1) as f64).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_rhs_returns_zero_without_iterating() {
        let a = SparseMatrix::identity(5);
        let out = gmres(&a, &[0.0; 5], &[1.0; 5], None, &settings(1e-12)).unwrap();
        assert_eq!(out.iterations, 0);
        assert!(out.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_rhs_is_rejected_up_front() {
        let a = SparseMatrix::identity(2);
        let err = gmres(&a, &[f64::NAN, 0.0], &[0.0; 2], None, &settings(1e-8)).unwrap_err();
        assert!(matches!(err, LinalgError::NonFinite(_)));
    }

    #[test]
    fn exhausted_budget_reports_failure_with_diagnostics() {
        // 1D Laplacian needs ~n iterations; give it far fewer.
        let n = 60;
        let mut trip = Vec::new();
        for i in 0..n {
            trip.push((i, i, 2.0));
            if i > 0 {
                trip.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                trip.push((i, i + 1, -1.0));
            }
        }
        let a = SparseMatrix::from_triplets(n, n, &trip).unwrap();
        let s = GmresSettings {
            tol: 1e-12,
            max_iters: 5,
            restart: 5,
        };
        let err = gmres(&a, &vec![1.0; n], &vec![0.0; n], None, &s).unwrap_err();
        match err {
            LinalgError::GmresFailure {
                kind, iterations, ..
            } => {
                assert_eq!(kind, GmresFailureKind::MaxIterations);
                assert_eq!(iterations, 5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn residual_history_is_monotone_within_a_cycle() {
        let n = 40;
        let mut trip = Vec::new();
        for i in 0..n {
            trip.push((i, i, 4.0));
            if i > 0 {
                trip.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                trip.push((i, i + 1, -1.0));
            }
        }
        let a = SparseMatrix::from_triplets(n, n, &trip).unwrap();
        let out = gmres(&a, &vec![1.0; n], &vec![0.0; n], None, &settings(1e-10)).unwrap();
        for pair in out.history.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12));
        }
    }
}

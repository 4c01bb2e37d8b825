//! Incomplete LU factorization with threshold dropping (ILUT).
//!
//! Dropping is two-sided: entries below `drop_tol * ||row||_2` are discarded
//! during elimination, and each row keeps at most `max_fill` entries in its
//! lower and upper parts (the diagonal is always kept). With `drop_tol = 0`
//! and `max_fill >= n` the factorization is a complete LU for any matrix that
//! needs no pivoting.
//!
//! Pivots smaller in magnitude than `1e-12 * ||row||_2` are replaced by that
//! threshold with the pivot's sign, so factorization survives near-singular
//! rows (saddle-point blocks produce them) at the cost of preconditioner
//! quality rather than aborting the whole solve.

use super::{LinalgError, SparseMatrix};
use std::cmp::Reverse;
use std::collections::BinaryHeap;

const PIVOT_FLOOR_REL: f64 = 1e-12;

/// Sparse triangular factors `A ~= L U` used as a right preconditioner.
#[derive(Debug, Clone)]
pub struct IluPreconditioner {
    n: usize,
    // L is unit lower triangular; the unit diagonal is implicit.
    l_row_ptr: Vec<usize>,
    l_cols: Vec<usize>,
    l_vals: Vec<f64>,
    // U holds the strictly upper part; diagonals live in `u_diag`.
    u_row_ptr: Vec<usize>,
    u_cols: Vec<usize>,
    u_vals: Vec<f64>,
    u_diag: Vec<f64>,
}

impl IluPreconditioner {
    /// Factor `a` with relative drop tolerance `drop_tol` and per-row fill
    /// limit `max_fill` (entries kept in each of the L and U parts).
    pub fn ilut(a: &SparseMatrix, drop_tol: f64, max_fill: usize) -> Result<Self, LinalgError> {
        if a.n_rows() != a.n_cols() {
            return Err(LinalgError::DimensionMismatch(format!(
                "ilut needs a square matrix, got {}x{}",
                a.n_rows(),
                a.n_cols()
            )));
        }
        if !(drop_tol >= 0.0) {
            return Err(LinalgError::InvalidStructure(
                "drop tolerance must be non-negative".into(),
            ));
        }
        let n = a.n_rows();
        let max_fill = max_fill.max(1);

        let mut fac = Self {
            n,
            l_row_ptr: vec![0; 1],
            l_cols: Vec::new(),
            l_vals: Vec::new(),
            u_row_ptr: vec![0; 1],
            u_cols: Vec::new(),
            u_vals: Vec::new(),
            u_diag: vec![0.0; n],
        };

        // Dense scatter workspace shared across rows. `seen` marks columns
        // touched at any point this row (for cleanup, each pushed to
        // `touched` exactly once); `present` marks columns holding a live
        // value that still participates in elimination or the final split.
        let mut wval = vec![0.0f64; n];
        let mut seen = vec![false; n];
        let mut present = vec![false; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut heap: BinaryHeap<Reverse<usize>> = BinaryHeap::new();
        let mut l_keep: Vec<(usize, f64)> = Vec::new();
        let mut u_keep: Vec<(usize, f64)> = Vec::new();

        for i in 0..n {
            let (cols, vals) = a.row(i);
            let mut row_norm_sq = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                if !v.is_finite() {
                    return Err(LinalgError::NonFinite("ilut input matrix"));
                }
                wval[c] = v;
                seen[c] = true;
                present[c] = true;
                touched.push(c);
                row_norm_sq += v * v;
                if c < i {
                    heap.push(Reverse(c));
                }
            }
            let row_norm = row_norm_sq.sqrt();
            if row_norm == 0.0 {
                return Err(LinalgError::ZeroPivot { row: i });
            }
            let tau = drop_tol * row_norm;

            // Eliminate lower-part entries in ascending column order; fill
            // landing in the lower part joins the queue. Fill columns always
            // exceed the pivot being processed, so consumption order stays
            // ascending and no column is eliminated twice.
            while let Some(Reverse(k)) = heap.pop() {
                if !present[k] {
                    continue; // dropped earlier, or a duplicate queue entry
                }
                present[k] = false; // consumed: becomes an L entry or is dropped
                let factor = wval[k] / fac.u_diag[k];
                if factor.abs() < tau {
                    wval[k] = 0.0;
                    continue;
                }
                wval[k] = factor;
                l_keep.push((k, factor));
                for idx in fac.u_row_ptr[k]..fac.u_row_ptr[k + 1] {
                    let j = fac.u_cols[idx];
                    let upd = factor * fac.u_vals[idx];
                    if present[j] {
                        wval[j] -= upd;
                    } else {
                        // Fresh fill, or fill into a column dropped earlier
                        // this row (its old value is gone; fill restarts it).
                        wval[j] = -upd;
                        present[j] = true;
                        if !seen[j] {
                            seen[j] = true;
                            touched.push(j);
                        }
                        if j < i {
                            heap.push(Reverse(j));
                        }
                    }
                }
            }

            // Split the surviving entries and apply the fill limit.
            let mut diag = 0.0;
            if present[i] {
                diag = wval[i];
            }
            for &c in &touched {
                if c == i || !present[c] {
                    continue;
                }
                debug_assert!(c > i, "lower-part column {c} survived elimination");
                let v = wval[c];
                if v.abs() >= tau && v != 0.0 {
                    u_keep.push((c, v));
                }
            }
            // l_keep already holds eliminated columns that passed the drop test.
            retain_largest(&mut l_keep, max_fill);
            retain_largest(&mut u_keep, max_fill);
            l_keep.sort_unstable_by_key(|&(c, _)| c);
            u_keep.sort_unstable_by_key(|&(c, _)| c);

            if diag.abs() < PIVOT_FLOOR_REL * row_norm {
                let floor = PIVOT_FLOOR_REL * row_norm;
                diag = if diag < 0.0 { -floor } else { floor };
            }
            fac.u_diag[i] = diag;

            fac.l_cols.extend(l_keep.iter().map(|&(c, _)| c));
            fac.l_vals.extend(l_keep.iter().map(|&(_, v)| v));
            fac.l_row_ptr.push(fac.l_cols.len());
            fac.u_cols.extend(u_keep.iter().map(|&(c, _)| c));
            fac.u_vals.extend(u_keep.iter().map(|&(_, v)| v));
            fac.u_row_ptr.push(fac.u_cols.len());

            for &c in &touched {
                wval[c] = 0.0;
                seen[c] = false;
                present[c] = false;
            }
            touched.clear();
            heap.clear();
            l_keep.clear();
            u_keep.clear();
        }
        Ok(fac)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries across both factors, diagonal included.
    pub fn nnz(&self) -> usize {
        self.l_vals.len() + self.u_vals.len() + self.n
    }

    /// `out = U^{-1} L^{-1} v`: forward substitution through unit-lower L,
    /// then back substitution through U.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.n, "preconditioner input length");
        assert_eq!(out.len(), self.n, "preconditioner output length");
        // Forward: L y = v.
        for i in 0..self.n {
            let mut acc = v[i];
            for idx in self.l_row_ptr[i]..self.l_row_ptr[i + 1] {
                acc -= self.l_vals[idx] * out[self.l_cols[idx]];
            }
            out[i] = acc;
        }
        // Backward: U x = y.
        for i in (0..self.n).rev() {
            let mut acc = out[i];
            for idx in self.u_row_ptr[i]..self.u_row_ptr[i + 1] {
                acc -= self.u_vals[idx] * out[self.u_cols[idx]];
            }
            out[i] = acc / self.u_diag[i];
        }
    }

    /// Convenience allocating form of [`IluPreconditioner::apply`].
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.apply(v, &mut out);
        out
    }

    /// Reconstruct `L * U` densely; test and diagnostic helper, O(n^2) memory.
    pub fn dense_product(&self) -> Vec<Vec<f64>> {
        let n = self.n;
        let mut l = vec![vec![0.0; n]; n];
        let mut u = vec![vec![0.0; n]; n];
        for i in 0..n {
            l[i][i] = 1.0;
            for idx in self.l_row_ptr[i]..self.l_row_ptr[i + 1] {
                l[i][self.l_cols[idx]] = self.l_vals[idx];
            }
            u[i][i] = self.u_diag[i];
            for idx in self.u_row_ptr[i]..self.u_row_ptr[i + 1] {
                u[i][self.u_cols[idx]] = self.u_vals[idx];
            }
        }
        let mut prod = vec![vec![0.0; n]; n];
        for i in 0..n {
            for k in 0..n {
                if l[i][k] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    prod[i][j] += l[i][k] * u[k][j];
                }
            }
        }
        prod
    }
}

/// Keep the `limit` entries of largest magnitude, preserving nothing else.
fn retain_largest(entries: &mut Vec<(usize, f64)>, limit: usize) {
    if entries.len() > limit {
        entries.sort_unstable_by(|a, b| b.1.abs().partial_cmp(&a.1.abs()).unwrap());
        entries.truncate(limit);
    }
}

#[cfg(test)]
mod tests {
    use super::super::{gmres, GmresSettings, LinalgError, SparseMatrix};
    use super::*;

    fn tridiagonal(n: usize, diag: f64) -> SparseMatrix {
        let mut trip = Vec::new();
        for i in 0..n {
            trip.push((i, i, diag));
            if i > 0 {
                trip.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                trip.push((i, i + 1, -1.0));
            }
        }
        SparseMatrix::from_triplets(n, n, &trip).unwrap()
    }

    #[test]
    fn zero_drop_unlimited_fill_reproduces_the_matrix() {
        let n = 50;
        let a = tridiagonal(n, 2.0);
        let fac = IluPreconditioner::ilut(&a, 0.0, n).unwrap();
        let prod = fac.dense_product();
        for i in 0..n {
            for j in 0..n {
                let diff = (prod[i][j] - a.get(i, j)).abs();
                assert!(diff < 1e-12, "entry ({i},{j}) off by {diff}");
            }
        }
    }

    #[test]
    fn exact_factors_solve_the_system_directly() {
        let n = 40;
        let a = tridiagonal(n, 2.0);
        let fac = IluPreconditioner::ilut(&a, 0.0, n).unwrap();
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut b = vec![0.0; n];
        a.matvec(&x_true, &mut b);
        let x = fac.solve(&b);
        for i in 0..n {
            assert!((x[i] - x_true[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn diagonal_matrix_preconditioner_is_exact_division() {
        let a =
            SparseMatrix::from_triplets(3, 3, &[(0, 0, 2.0), (1, 1, 4.0), (2, 2, -8.0)]).unwrap();
        let fac = IluPreconditioner::ilut(&a, 0.0, 3).unwrap();
        let x = fac.solve(&[2.0, 2.0, 2.0]);
        assert_eq!(x, vec![1.0, 0.5, -0.25]);
    }

    #[test]
    fn structurally_empty_row_is_a_zero_pivot_error() {
        // Row 1 exists but holds only an explicit zero: no weight at all.
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, 0.0)]).unwrap();
        let err = IluPreconditioner::ilut(&a, 0.0, 2).unwrap_err();
        match err {
            LinalgError::ZeroPivot { row } => assert_eq!(row, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn tiny_pivot_is_substituted_not_fatal() {
        // Elimination wipes out the (1,1) pivot exactly: [[1, 1], [1, 1 + eps]].
        let a = SparseMatrix::from_triplets(
            2,
            2,
            &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)],
        )
        .unwrap();
        let fac = IluPreconditioner::ilut(&a, 0.0, 2).unwrap();
        assert!(fac.u_diag[1] != 0.0);
        let out = fac.solve(&[1.0, 1.0]);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    /// Structured P1 triangle assembly of mass + scaled stiffness on a unit
    /// square grid: stand-in for the reaction-diffusion system matrix.
    fn fem_mass_plus_stiffness(nodes_per_side: usize, diffusion_weight: f64) -> SparseMatrix {
        let n = nodes_per_side;
        let h = 0.21; // physical spacing, mm
        let idx = |i: usize, j: usize| i * n + j;
        let mut trip = Vec::new();
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                let quad = [idx(i, j), idx(i, j + 1), idx(i + 1, j + 1), idx(i + 1, j)];
                for tri in [[quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]] {
                    let p: Vec<(f64, f64)> = tri
                        .iter()
                        .map(|&k| ((k / n) as f64 * h, (k % n) as f64 * h))
                        .collect();
                    let area = 0.5
                        * ((p[1].0 - p[0].0) * (p[2].1 - p[0].1)
                            - (p[2].0 - p[0].0) * (p[1].1 - p[0].1))
                            .abs();
                    let b = [p[1].1 - p[2].1, p[2].1 - p[0].1, p[0].1 - p[1].1];
                    let c = [p[2].0 - p[1].0, p[0].0 - p[2].0, p[1].0 - p[0].0];
                    for a_loc in 0..3 {
                        for b_loc in 0..3 {
                            let mass = area / 12.0 * if a_loc == b_loc { 2.0 } else { 1.0 };
                            let stiff = (b[a_loc] * b[b_loc] + c[a_loc] * c[b_loc]) / (4.0 * area);
                            trip.push((
                                tri[a_loc],
                                tri[b_loc],
                                mass + diffusion_weight * stiff,
                            ));
                        }
                    }
                }
            }
        }
        SparseMatrix::from_triplets(n * n, n * n, &trip).unwrap()
    }

    #[test]
    fn ilut_cuts_fem_iteration_counts_by_factor_five() {
        // ~1000 unknowns, mass + (dt/2) D stiffness, the per-step system shape.
        let a = fem_mass_plus_stiffness(32, 0.04 * 0.154);
        let n = a.n_rows();
        let b: Vec<f64> = (0..n).map(|i| ((i * 7919 % 101) as f64 - 50.0) / 50.0).collect();
        let s = GmresSettings {
            tol: 1e-10,
            max_iters: 4000,
            restart: 50,
        };
        let plain = gmres(&a, &b, &vec![0.0; n], None, &s).unwrap();
        let fac = IluPreconditioner::ilut(&a, 1e-4, 20).unwrap();
        let pre = gmres(&a, &b, &vec![0.0; n], Some(&fac), &s).unwrap();
        assert!(
            pre.iterations * 5 <= plain.iterations,
            "preconditioned {} vs plain {}",
            pre.iterations,
            plain.iterations
        );
        // Both routes must land on the same solution.
        for i in 0..n {
            assert!((pre.x[i] - plain.x[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn preconditioned_and_plain_gmres_agree_within_tolerance() {
        // Diagonally dominant: condition number ~3, so the 10x-tolerance
        // agreement bound speaks about solutions, not just residuals.
        let a = tridiagonal(80, 4.0);
        let b: Vec<f64> = (0..80).map(|i| (i as f64 * 0.13).cos()).collect();
        let s = GmresSettings {
            tol: 1e-9,
            max_iters: 2000,
            restart: 50,
        };
        let plain = gmres(&a, &b, &vec![0.0; 80], None, &s).unwrap();
        let fac = IluPreconditioner::ilut(&a, 1e-3, 5).unwrap();
        let pre = gmres(&a, &b, &vec![0.0; 80], Some(&fac), &s).unwrap();
        let scale: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..80 {
            assert!(
                (pre.x[i] - plain.x[i]).abs() <= 10.0 * 1e-9 * scale.max(1.0),
                "solutions diverge at {i}"
            );
        }
    }
}

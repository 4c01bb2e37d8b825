//! Sparse linear algebra: CSR storage, restarted GMRES, ILUT preconditioning.
//!
//! Everything here is `f64`. Matrices are compressed sparse row with strictly
//! increasing column indices inside each row; builders accept unsorted
//! triplets and sum duplicates. Solvers work through [`LinearOperator`] so
//! matrix-free operators (finite-difference Jacobians) and assembled matrices
//! share one GMRES path.

mod gmres;
mod ilu;

pub use gmres::{gmres, GmresOutcome, GmresSettings};
pub use ilu::IluPreconditioner;

use std::io::Write as IoWrite;
use thiserror::Error;

/// Errors from factorizations and iterative solves.
#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("invalid matrix structure: {0}")]
    InvalidStructure(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("zero pivot in row {row}: row has no weight to substitute")]
    ZeroPivot { row: usize },
    #[error("gmres {kind} after {iterations} iterations (residual {residual:.3e}, target {target:.3e})")]
    GmresFailure {
        kind: GmresFailureKind,
        iterations: usize,
        residual: f64,
        target: f64,
        /// Best iterate reached before giving up; callers doing inexact
        /// Newton can still use it as a search direction.
        partial: Vec<f64>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Why a GMRES solve gave up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmresFailureKind {
    /// Iteration budget exhausted before the residual target.
    MaxIterations,
    /// A full restart cycle made no progress on the residual.
    Stagnation,
}

impl std::fmt::Display for GmresFailureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GmresFailureKind::MaxIterations => write!(f, "hit its iteration budget"),
            GmresFailureKind::Stagnation => write!(f, "stagnated"),
        }
    }
}

/// Anything that can apply itself to a vector. Implementors must be square.
pub trait LinearOperator: Sync {
    /// Number of rows (= columns) of the operator.
    fn dim(&self) -> usize;
    /// Compute `out = A * v`. `v.len() == out.len() == self.dim()`.
    fn apply(&self, v: &[f64], out: &mut [f64]);
}

/// Compressed-sparse-row matrix with strictly increasing column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets. Duplicate positions are summed;
    /// explicit zeros are kept (they reserve pattern slots).
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, LinalgError> {
        for &(r, c, _) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(LinalgError::InvalidStructure(format!(
                    "triplet ({r}, {c}) outside a {n_rows}x{n_cols} matrix"
                )));
            }
        }
        // Count entries per row, then bucket-sort triplets into rows.
        let mut counts = vec![0usize; n_rows];
        for &(r, _, _) in triplets {
            counts[r] += 1;
        }
        let mut starts = vec![0usize; n_rows + 1];
        for i in 0..n_rows {
            starts[i + 1] = starts[i] + counts[i];
        }
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0f64; triplets.len()];
        let mut cursor = starts.clone();
        for &(r, c, v) in triplets {
            cols[cursor[r]] = c;
            vals[cursor[r]] = v;
            cursor[r] += 1;
        }
        // Sort each row by column and merge duplicates.
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for r in 0..n_rows {
            let (lo, hi) = (starts[r], starts[r + 1]);
            order.clear();
            order.extend(lo..hi);
            order.sort_unstable_by_key(|&k| cols[k]);
            let mut last_col = usize::MAX;
            for &k in &order {
                if cols[k] == last_col {
                    let v = values.last_mut().expect("duplicate follows an entry");
                    *v += vals[k];
                } else {
                    col_idx.push(cols[k]);
                    values.push(vals[k]);
                    last_col = cols[k];
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Build directly from CSR arrays, validating the structure.
    pub fn from_csr(
        n_rows: usize,
        n_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, LinalgError> {
        if row_ptr.len() != n_rows + 1 || row_ptr[0] != 0 || *row_ptr.last().unwrap() != col_idx.len()
        {
            return Err(LinalgError::InvalidStructure(
                "row pointer array malformed".into(),
            ));
        }
        if col_idx.len() != values.len() {
            return Err(LinalgError::InvalidStructure(
                "column and value arrays differ in length".into(),
            ));
        }
        for r in 0..n_rows {
            if row_ptr[r] > row_ptr[r + 1] {
                return Err(LinalgError::InvalidStructure(format!(
                    "row {r} has negative extent"
                )));
            }
            let mut prev = None;
            for k in row_ptr[r]..row_ptr[r + 1] {
                let c = col_idx[k];
                if c >= n_cols {
                    return Err(LinalgError::InvalidStructure(format!(
                        "column {c} out of range in row {r}"
                    )));
                }
                if let Some(p) = prev {
                    if c <= p {
                        return Err(LinalgError::InvalidStructure(format!(
                            "columns not strictly increasing in row {r}"
                        )));
                    }
                }
                prev = Some(c);
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    /// Entry (r, c), zero when outside the stored pattern.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// Mutable access to the stored values (pattern is fixed).
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `y = A x` for a rectangular matrix.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols, "matvec input length");
        assert_eq!(y.len(), self.n_rows, "matvec output length");
        for r in 0..self.n_rows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
    }

    /// `y += alpha * A x`.
    pub fn matvec_add(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols, "matvec input length");
        assert_eq!(y.len(), self.n_rows, "matvec output length");
        for r in 0..self.n_rows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[r] += alpha * acc;
        }
    }

    /// Scale all stored values in place.
    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    /// `A + beta * B` for two matrices with identical shape (patterns may differ).
    pub fn add_scaled(&self, beta: f64, other: &SparseMatrix) -> Result<SparseMatrix, LinalgError> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} + {}x{}",
                self.n_rows, self.n_cols, other.n_rows, other.n_cols
            )));
        }
        let mut row_ptr = Vec::with_capacity(self.n_rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..self.n_rows {
            let (ca, va) = self.row(r);
            let (cb, vb) = other.row(r);
            let (mut i, mut j) = (0, 0);
            while i < ca.len() || j < cb.len() {
                let next_a = ca.get(i).copied().unwrap_or(usize::MAX);
                let next_b = cb.get(j).copied().unwrap_or(usize::MAX);
                if next_a < next_b {
                    col_idx.push(next_a);
                    values.push(va[i]);
                    i += 1;
                } else if next_b < next_a {
                    col_idx.push(next_b);
                    values.push(beta * vb[j]);
                    j += 1;
                } else {
                    col_idx.push(next_a);
                    values.push(va[i] + beta * vb[j]);
                    i += 1;
                    j += 1;
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(SparseMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Write in Matrix Market coordinate format (1-based, general real).
    pub fn write_matrix_market<W: IoWrite>(&self, mut w: W) -> Result<(), LinalgError> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.n_rows, self.n_cols, self.nnz())?;
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                writeln!(w, "{} {} {:.17e}", r + 1, self.col_idx[k] + 1, self.values[k])?;
            }
        }
        Ok(())
    }
}

impl LinearOperator for SparseMatrix {
    fn dim(&self) -> usize {
        assert_eq!(self.n_rows, self.n_cols, "operator must be square");
        self.n_rows
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        self.matvec(v, out);
    }
}

/// Euclidean norm.
pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dot product. Sequential on purpose: reduction order must not depend on
/// thread scheduling, or repeated runs stop being bit-identical.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_sort_columns() {
        let a = SparseMatrix::from_triplets(
            2,
            3,
            &[(0, 2, 1.0), (0, 0, 2.0), (0, 2, 0.5), (1, 1, -1.0)],
        )
        .unwrap();
        assert_eq!(a.nnz(), 3);
        let (cols, vals) = a.row(0);
        assert_eq!(cols, &[0, 2]);
        assert_eq!(vals, &[2.0, 1.5]);
        assert_eq!(a.get(1, 1), -1.0);
        assert_eq!(a.get(1, 2), 0.0);
    }

    #[test]
    fn triplet_out_of_range_is_rejected() {
        let err = SparseMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).unwrap_err();
        assert!(matches!(err, LinalgError::InvalidStructure(_)));
    }

    #[test]
    fn csr_validation_catches_unsorted_columns() {
        let err =
            SparseMatrix::from_csr(1, 3, vec![0, 2], vec![2, 0], vec![1.0, 1.0]).unwrap_err();
        assert!(matches!(err, LinalgError::InvalidStructure(_)));
    }

    #[test]
    fn matvec_matches_dense_arithmetic() {
        // [[4, 1], [1, 3]] * [1, 2] = [6, 7]
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0)])
            .unwrap();
        let mut y = vec![0.0; 2];
        a.matvec(&[1.0, 2.0], &mut y);
        assert_eq!(y, vec![6.0, 7.0]);
    }

    #[test]
    fn add_scaled_merges_disjoint_patterns() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, 2.0)]).unwrap();
        let b = SparseMatrix::from_triplets(2, 2, &[(0, 1, 3.0), (1, 1, 1.0)]).unwrap();
        let c = a.add_scaled(-2.0, &b).unwrap();
        assert_eq!(c.get(0, 0), 1.0);
        assert_eq!(c.get(0, 1), -6.0);
        assert_eq!(c.get(1, 1), 0.0);
        assert_eq!(c.nnz(), 3);
    }

    #[test]
    fn matrix_market_dump_is_one_based_coordinate_text() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.5), (1, 0, -2.0)]).unwrap();
        let mut buf = Vec::new();
        a.write_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "%%MatrixMarket matrix coordinate real general"
        );
        assert_eq!(lines.next().unwrap(), "2 2 2");
        assert!(lines.next().unwrap().starts_with("1 1 1.5"));
        assert!(lines.next().unwrap().starts_with("2 1 -2"));
    }
}

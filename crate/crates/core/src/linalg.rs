//! Compressed-row sparse matrices and a cached sparse direct solver.
//!
//! Factorization is delegated to `faer`. Symmetric systems go through a
//! sparse Cholesky factorization; anything that is not symmetric positive
//! definite falls back to LU with partial pivoting. Symbolic analyses are
//! cached by sparsity pattern so repeated solves with a fixed pattern (the
//! normal situation inside a time loop) only pay for the numeric phase.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, Lu, SymbolicLlt, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Mat, Side};
use thiserror::Error;

/// Relative residual demanded from every solve: `‖Ax − b‖ ≤ tol·(‖b‖ + 1)`.
pub const RESIDUAL_TOL: f64 = 1e-10;

const MAX_REFINEMENT: usize = 3;
const MAX_CACHED_PATTERNS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("entry ({row}, {col}) out of range for dimension {dim}")]
    IndexOutOfRange { row: usize, col: usize, dim: usize },
    #[error("dimension mismatch: matrix {matrix}, vector {vector}")]
    DimensionMismatch { matrix: usize, vector: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("matrix is singular")]
    Singular,
    #[error("solve residual {residual:e} exceeds bound {bound:e}")]
    Inaccurate { residual: f64, bound: f64 },
    #[error("factorization failed: {0}")]
    Factorization(String),
}

/// Square sparse matrix in compressed-row storage. Column indices are
/// strictly increasing within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates
    /// and dropping entries that sum to zero.
    pub fn from_triplets(dim: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, LinalgError> {
        let mut counts = vec![0usize; dim + 1];
        for &(row, col, v) in triplets {
            if row >= dim || col >= dim {
                return Err(LinalgError::IndexOutOfRange { row, col, dim });
            }
            if !v.is_finite() {
                return Err(LinalgError::NonFinite("triplet value"));
            }
            counts[row + 1] += 1;
        }
        for i in 0..dim {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut entries = vec![(0usize, 0.0f64); triplets.len()];
        for &(row, col, v) in triplets {
            entries[next[row]] = (col, v);
            next[row] += 1;
        }

        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        for row in 0..dim {
            let slice = &mut entries[counts[row]..counts[row + 1]];
            slice.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < slice.len() {
                let col = slice[k].0;
                let mut sum = 0.0;
                while k < slice.len() && slice[k].0 == col {
                    sum += slice[k].1;
                    k += 1;
                }
                if sum != 0.0 {
                    col_idx.push(col);
                    values.push(sum);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(SparseMatrix {
            dim,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Matrix with a prescribed pattern and all stored values zero. Used by
    /// assembly, which scatters into a fixed pattern before calling
    /// [`SparseMatrix::prune_zeros`].
    pub fn with_pattern(dim: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>) -> Self {
        assert_eq!(row_ptr.len(), dim + 1);
        assert_eq!(*row_ptr.last().unwrap(), col_idx.len());
        debug_assert!((0..dim).all(|r| col_idx[row_ptr[r]..row_ptr[r + 1]].windows(2).all(|w| w[0] < w[1])));
        let values = vec![0.0; col_idx.len()];
        SparseMatrix {
            dim,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(dim: usize) -> Self {
        SparseMatrix {
            dim,
            row_ptr: (0..=dim).collect(),
            col_idx: (0..dim).collect(),
            values: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Column indices and values of one row.
    pub fn row(&self, row: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[row]..self.row_ptr[row + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    /// Storage position of entry `(row, col)`, if present in the pattern.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        let start = self.row_ptr[row];
        self.col_idx[start..self.row_ptr[row + 1]]
            .binary_search(&col)
            .ok()
            .map(|k| start + k)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.position(row, col).map_or(0.0, |k| self.values[k])
    }

    /// Removes explicitly stored zeros.
    pub fn prune_zeros(&mut self) {
        let mut write = 0;
        let mut start = 0;
        for row in 0..self.dim {
            let end = self.row_ptr[row + 1];
            for k in start..end {
                if self.values[k] != 0.0 {
                    self.col_idx[write] = self.col_idx[k];
                    self.values[write] = self.values[k];
                    write += 1;
                }
            }
            start = end;
            self.row_ptr[row + 1] = write;
        }
        self.col_idx.truncate(write);
        self.values.truncate(write);
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        (0..self.dim)
            .map(|row| {
                let (cols, vals) = self.row(row);
                cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect()
    }

    /// `max |A_ij − A_ji|` over all stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for row in 0..self.dim {
            let (cols, vals) = self.row(row);
            for (&col, &v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(col, row)).abs());
            }
        }
        worst
    }

    pub fn is_symmetric(&self) -> bool {
        self.max_asymmetry() == 0.0
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.dim]; self.dim];
        for (row, dense_row) in d.iter_mut().enumerate() {
            let (cols, vals) = self.row(row);
            for (&c, &v) in cols.iter().zip(vals) {
                dense_row[c] = v;
            }
        }
        d
    }

    /// The CSR arrays read as compressed columns describe `Aᵀ`.
    fn transpose_view(&self) -> SymbolicSparseColMatRef<'_, usize> {
        SymbolicSparseColMatRef::new_checked(self.dim, self.dim, &self.row_ptr, None, &self.col_idx)
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factorization {
    Cholesky,
    Lu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// `‖Ax − b‖₂` after refinement.
    pub residual: f64,
    pub rhs_norm: f64,
    pub factorization: Factorization,
    pub symbolic_reused: bool,
    pub refinement_steps: usize,
    pub nnz: usize,
}

struct CachedPattern {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    llt: Option<SymbolicLlt<usize>>,
    lu: Option<SymbolicLu<usize>>,
}

enum Numeric {
    Llt(Llt<usize, f64>),
    Lu(Box<Lu<usize, f64>>),
}

impl Numeric {
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        match self {
            // Symmetric: Aᵀ = A.
            Numeric::Llt(f) => f.solve_in_place(x.as_mut()),
            // The factorization is of Aᵀ; solve with its transpose.
            Numeric::Lu(f) => f.solve_transpose_in_place(x.as_mut()),
        }
        (0..rhs.len()).map(|i| x[(i, 0)]).collect()
    }
}

/// Sparse direct solver with a small cache of symbolic factorizations.
///
/// Factorization and solves are single-threaded; independent solvers may be
/// used concurrently from different threads.
pub struct DirectSolver {
    cache: Vec<CachedPattern>,
    solves: usize,
    symbolic_factorizations: usize,
}

impl Default for DirectSolver {
    fn default() -> Self {
        Self::new()
    }
}

impl DirectSolver {
    pub fn new() -> Self {
        faer::set_global_parallelism(faer::Par::Seq);
        DirectSolver {
            cache: Vec::new(),
            solves: 0,
            symbolic_factorizations: 0,
        }
    }

    pub fn solves(&self) -> usize {
        self.solves
    }

    pub fn symbolic_factorizations(&self) -> usize {
        self.symbolic_factorizations
    }

    pub fn solve(&mut self, a: &SparseMatrix, b: &[f64]) -> Result<(Vec<f64>, SolveReport), LinalgError> {
        let n = a.dim();
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch { matrix: n, vector: b.len() });
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite("right-hand side"));
        }
        if a.values().iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite("matrix"));
        }
        self.solves += 1;
        if n == 0 {
            let report = SolveReport {
                residual: 0.0,
                rhs_norm: 0.0,
                factorization: Factorization::Lu,
                symbolic_reused: false,
                refinement_steps: 0,
                nnz: 0,
            };
            return Ok((Vec::new(), report));
        }

        let (slot, reused) = self.lookup(a);
        let symmetric = a.is_symmetric();
        let (numeric, factorization) = self.factorize(slot, a, symmetric)?;

        let mut x = numeric.solve(b);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::Singular);
        }
        let rhs_norm = norm2(b);
        let bound = RESIDUAL_TOL * (rhs_norm + 1.0);
        let mut r = residual(a, &x, b);
        let mut residual_norm = norm2(&r);
        let mut steps = 0;
        // Refine past the acceptance bound so downstream increments are
        // well below any subiteration tolerance.
        while steps < MAX_REFINEMENT && residual_norm > 1e-3 * bound {
            let d = numeric.solve(&r);
            let candidate: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + di).collect();
            let r_new = residual(a, &candidate, b);
            let norm_new = norm2(&r_new);
            steps += 1;
            if norm_new.is_nan() || norm_new >= residual_norm {
                break;
            }
            x = candidate;
            r = r_new;
            residual_norm = norm_new;
        }
        if !residual_norm.is_finite() {
            return Err(LinalgError::Singular);
        }
        if residual_norm > bound {
            return Err(LinalgError::Inaccurate {
                residual: residual_norm,
                bound,
            });
        }
        Ok((
            x,
            SolveReport {
                residual: residual_norm,
                rhs_norm,
                factorization,
                symbolic_reused: reused,
                refinement_steps: steps,
                nnz: a.nnz(),
            },
        ))
    }

    fn lookup(&mut self, a: &SparseMatrix) -> (usize, bool) {
        if let Some(i) = self
            .cache
            .iter()
            .position(|c| c.row_ptr == a.row_ptr && c.col_idx == a.col_idx)
        {
            return (i, true);
        }
        if self.cache.len() == MAX_CACHED_PATTERNS {
            self.cache.remove(0);
        }
        self.cache.push(CachedPattern {
            row_ptr: a.row_ptr.clone(),
            col_idx: a.col_idx.clone(),
            llt: None,
            lu: None,
        });
        (self.cache.len() - 1, false)
    }

    fn factorize(
        &mut self,
        slot: usize,
        a: &SparseMatrix,
        symmetric: bool,
    ) -> Result<(Numeric, Factorization), LinalgError> {
        let sym = a.transpose_view();
        let mat = SparseColMatRef::new(sym, a.values());
        if symmetric {
            if self.cache[slot].llt.is_none() {
                if let Ok(s) = SymbolicLlt::try_new(sym, Side::Lower) {
                    self.symbolic_factorizations += 1;
                    self.cache[slot].llt = Some(s);
                }
            }
            if let Some(s) = &self.cache[slot].llt {
                if let Ok(f) = Llt::try_new_with_symbolic(s.clone(), mat, Side::Lower) {
                    return Ok((Numeric::Llt(f), Factorization::Cholesky));
                }
            }
        }
        if self.cache[slot].lu.is_none() {
            let s = SymbolicLu::try_new(sym).map_err(|e| LinalgError::Factorization(format!("{e:?}")))?;
            self.symbolic_factorizations += 1;
            self.cache[slot].lu = Some(s);
        }
        let s = self.cache[slot].lu.clone().expect("symbolic LU present");
        let f = Lu::try_new_with_symbolic(s, mat).map_err(|_| LinalgError::Singular)?;
        Ok((Numeric::Lu(Box::new(f)), Factorization::Lu))
    }
}

/// One-shot solve without symbolic caching.
pub fn solve(a: &SparseMatrix, b: &[f64]) -> Result<(Vec<f64>, SolveReport), LinalgError> {
    DirectSolver::new().solve(a, b)
}

fn residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    a.mul_vec(x).iter().zip(b).map(|(ax, bi)| bi - ax).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_triplets(m: usize) -> Vec<(usize, usize, f64)> {
        let mut t = Vec::new();
        for i in 0..m {
            for j in 0..m {
                let k = i * m + j;
                t.push((k, k, 4.0));
                if i > 0 {
                    t.push((k, k - m, -1.0));
                }
                if i + 1 < m {
                    t.push((k, k + m, -1.0));
                }
                if j > 0 {
                    t.push((k, k - 1, -1.0));
                }
                if j + 1 < m {
                    t.push((k, k + 1, -1.0));
                }
            }
        }
        t
    }

    #[test]
    fn duplicates_are_summed() {
        let a = SparseMatrix::from_triplets(1, &[(0, 0, 1.0), (0, 0, 2.0)]).unwrap();
        assert_eq!(a.nnz(), 1);
        assert_eq!(a.get(0, 0), 3.0);
    }

    #[test]
    fn empty_triplets_give_zero_matrix() {
        let a = SparseMatrix::from_triplets(3, &[]).unwrap();
        assert_eq!(a.dim(), 3);
        assert_eq!(a.nnz(), 0);
        assert_eq!(a.row_ptr(), &[0, 0, 0, 0]);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(
            SparseMatrix::from_triplets(2, &[(2, 0, 1.0)]),
            Err(LinalgError::IndexOutOfRange { row: 2, col: 0, dim: 2 })
        ));
    }

    #[test]
    fn cancelled_entries_not_stored() {
        let a = SparseMatrix::from_triplets(2, &[(0, 1, 1.0), (0, 1, -1.0), (1, 1, 2.0)]).unwrap();
        assert_eq!(a.nnz(), 1);
        assert!(a.values().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn laplacian_matches_dense_and_is_symmetric() {
        let m = 3;
        let t = laplacian_triplets(m);
        let a = SparseMatrix::from_triplets(m * m, &t).unwrap();
        let mut dense = vec![vec![0.0; m * m]; m * m];
        for &(r, c, v) in &t {
            dense[r][c] += v;
        }
        assert_eq!(a.to_dense(), dense);
        assert_eq!(a.max_asymmetry(), 0.0);
        for r in 0..a.dim() {
            let (cols, _) = a.row(r);
            assert!(cols.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn identity_solve() {
        let a = SparseMatrix::identity(4);
        let b = [1.0, -2.0, 3.5, 0.0];
        let (x, report) = solve(&a, &b).unwrap();
        assert_eq!(x, b.to_vec());
        assert!(report.residual <= RESIDUAL_TOL);
    }

    #[test]
    fn two_by_two() {
        let a = SparseMatrix::from_triplets(2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)]).unwrap();
        let (x, report) = solve(&a, &[3.0, 3.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
        assert_eq!(report.factorization, Factorization::Cholesky);
    }

    #[test]
    fn nonsymmetric_uses_lu() {
        let a = SparseMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 0.5), (1, 1, 3.0)]).unwrap();
        // x = [1, 2] → b = [5, 6.5]
        let (x, report) = solve(&a, &[5.0, 6.5]).unwrap();
        assert_eq!(report.factorization, Factorization::Lu);
        assert!((x[0] - 1.0).abs() < 1e-13 && (x[1] - 2.0).abs() < 1e-13);
    }

    #[test]
    fn indefinite_symmetric_falls_back() {
        let a = SparseMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]).unwrap();
        let (x, report) = solve(&a, &[3.0, 3.0]).unwrap();
        assert_eq!(report.factorization, Factorization::Lu);
        assert!((x[0] - 1.0).abs() < 1e-13 && (x[1] - 1.0).abs() < 1e-13);
    }

    #[test]
    fn singular_is_an_error() {
        let a = SparseMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]).unwrap();
        let err = solve(&a, &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, LinalgError::Singular | LinalgError::Inaccurate { .. }));

        let empty_row = SparseMatrix::from_triplets(2, &[(0, 0, 1.0)]).unwrap();
        assert!(solve(&empty_row, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn symbolic_reused_and_deterministic() {
        let m = 12;
        let a = SparseMatrix::from_triplets(m * m, &laplacian_triplets(m)).unwrap();
        let b: Vec<f64> = (0..m * m).map(|i| (i as f64).sin()).collect();
        let mut solver = DirectSolver::new();
        let (x1, r1) = solver.solve(&a, &b).unwrap();
        let (x2, r2) = solver.solve(&a, &b).unwrap();
        assert!(!r1.symbolic_reused);
        assert!(r2.symbolic_reused);
        assert_eq!(solver.symbolic_factorizations(), 1);
        assert_eq!(x1, x2);
        let bound = RESIDUAL_TOL * (norm2(&b) + 1.0);
        assert!(r1.residual <= bound);
    }

    #[test]
    fn prune_removes_zeros() {
        let mut a = SparseMatrix::with_pattern(2, vec![0, 2, 3], vec![0, 1, 1]);
        a.values_mut()[0] = 5.0;
        a.values_mut()[2] = 1.0;
        a.prune_zeros();
        assert_eq!(a.row_ptr(), &[0, 1, 2]);
        assert_eq!(a.col_idx(), &[0, 1]);
        assert_eq!(a.get(0, 1), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let a = SparseMatrix::identity(3);
        assert!(matches!(solve(&a, &[1.0]), Err(LinalgError::DimensionMismatch { .. })));
    }
}

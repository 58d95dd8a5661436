//! Boolean sparse matrices in Compressed Sparse Row form.
//!
//! Every matrix handled by the scheduler (DAG adjacency, preemptible-DAG
//! adjacency, mapping matrices) is 0/1, so only the index structure is
//! stored:
//!
//!   row_ptr   prefix sums of row populations, length n_rows + 1
//!   col_idx   column indices, strictly increasing within a row, length nnz
//!
//! The footprint of a matrix is the number of stored index entries,
//! `nnz + n_rows + 1`; the compression ratio against a dense bitmap is
//! `n_rows * n_cols / footprint`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CsrError {
    #[error("row_ptr must have length n_rows+1, start at 0, be non-decreasing and end at nnz")]
    MalformedRowPtr,
    #[error("col_idx entries must be strictly increasing within each row and < n_cols")]
    MalformedColIdx,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl CsrMatrix {
    /// Build from raw parts, checking the structural invariants.
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
    ) -> Result<Self, CsrError> {
        if row_ptr.len() != n_rows + 1 || row_ptr[0] != 0 || row_ptr[n_rows] != col_idx.len() {
            return Err(CsrError::MalformedRowPtr);
        }
        if row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(CsrError::MalformedRowPtr);
        }
        for r in 0..n_rows {
            let row = &col_idx[row_ptr[r]..row_ptr[r + 1]];
            if row.iter().any(|&c| c >= n_cols) {
                return Err(CsrError::MalformedColIdx);
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CsrError::MalformedColIdx);
            }
        }
        Ok(Self { n_rows, n_cols, row_ptr, col_idx })
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, row_ptr: vec![0; n_rows + 1], col_idx: Vec::new() }
    }

    /// Convert a rectangular dense boolean matrix to CSR.
    pub fn from_dense(dense: &[Vec<bool>]) -> Self {
        let n_rows = dense.len();
        let n_cols = dense.first().map_or(0, Vec::len);
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in dense {
            debug_assert_eq!(row.len(), n_cols, "dense matrix must be rectangular");
            for (c, &set) in row.iter().enumerate() {
                if set {
                    col_idx.push(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { n_rows, n_cols, row_ptr, col_idx }
    }

    /// Inverse of [`CsrMatrix::from_dense`].
    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        let mut dense = vec![vec![false; self.n_cols]; self.n_rows];
        for r in 0..self.n_rows {
            for &c in self.row(r) {
                dense[r][c] = true;
            }
        }
        dense
    }

    /// Adjacency matrix of a graph on `n` vertices given as an edge list.
    /// Duplicate edges collapse to a single stored entry.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(src, dst) in edges {
            adj[src].push(dst);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut row in adj {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(&row);
            row_ptr.push(col_idx.len());
        }
        Self { n_rows: n, n_cols: n, row_ptr, col_idx }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    /// Column indices stored in row `r`.
    pub fn row(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.row(r).binary_search(&c).is_ok()
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_rows).flat_map(move |r| self.row(r).iter().map(move |&c| (r, c)))
    }

    /// Number of stored index entries: `nnz + n_rows + 1`.
    pub fn footprint(&self) -> usize {
        self.nnz() + self.n_rows + 1
    }

    /// Dense cell count divided by [`CsrMatrix::footprint`].
    pub fn compression_ratio(&self) -> f64 {
        (self.n_rows * self.n_cols) as f64 / self.footprint() as f64
    }

    pub fn out_degree(&self, r: usize) -> usize {
        self.row(r).len()
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.n_cols];
        for &c in &self.col_idx {
            deg[c] += 1;
        }
        deg
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.n_cols];
        for &c in &self.col_idx {
            counts[c] += 1;
        }
        let mut row_ptr = Vec::with_capacity(self.n_cols + 1);
        row_ptr.push(0);
        for c in 0..self.n_cols {
            row_ptr.push(row_ptr[c] + counts[c]);
        }
        let mut cursor = row_ptr.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        for r in 0..self.n_rows {
            for &c in self.row(r) {
                col_idx[cursor[c]] = r;
                cursor[c] += 1;
            }
        }
        // rows come out sorted because r increases monotonically per column
        CsrMatrix { n_rows: self.n_cols, n_cols: self.n_rows, row_ptr, col_idx }
    }

    /// Boolean matrix product, computed row-by-row with a sparse gather.
    pub fn multiply(&self, rhs: &CsrMatrix) -> Result<CsrMatrix, CsrError> {
        if self.n_cols != rhs.n_rows {
            return Err(CsrError::ShapeMismatch(format!(
                "{}x{} * {}x{}",
                self.n_rows, self.n_cols, rhs.n_rows, rhs.n_cols
            )));
        }
        let mut row_ptr = Vec::with_capacity(self.n_rows + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        let mut mark = vec![false; rhs.n_cols];
        let mut touched = Vec::new();
        for r in 0..self.n_rows {
            for &k in self.row(r) {
                for &c in rhs.row(k) {
                    if !mark[c] {
                        mark[c] = true;
                        touched.push(c);
                    }
                }
            }
            touched.sort_unstable();
            col_idx.extend_from_slice(&touched);
            row_ptr.push(col_idx.len());
            for &c in &touched {
                mark[c] = false;
            }
            touched.clear();
        }
        Ok(CsrMatrix { n_rows: self.n_rows, n_cols: rhs.n_cols, row_ptr, col_idx })
    }

    /// True iff every stored entry of `self` is also stored in `other`.
    pub fn is_contained_in(&self, other: &CsrMatrix) -> Result<bool, CsrError> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(CsrError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.n_rows, self.n_cols, other.n_rows, other.n_cols
            )));
        }
        for r in 0..self.n_rows {
            let mine = self.row(r);
            let theirs = other.row(r);
            let mut it = theirs.iter();
            'outer: for &c in mine {
                for &t in it.by_ref() {
                    if t == c {
                        continue 'outer;
                    }
                    if t > c {
                        return Ok(false);
                    }
                }
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn from_dense_single_entry() {
        let m = CsrMatrix::from_dense(&[vec![false, true], vec![false, false]]);
        assert_eq!(m.row_ptr(), &[0, 1, 1]);
        assert_eq!(m.col_idx(), &[1]);
    }

    #[test]
    fn from_dense_triangle() {
        // 3x3 symmetric triangle adjacency: six ones, zero diagonal
        let t = true;
        let f = false;
        let m = CsrMatrix::from_dense(&[vec![f, t, t], vec![t, f, t], vec![t, t, f]]);
        assert_eq!(m.row_ptr(), &[0, 2, 4, 6]);
        assert_eq!(m.col_idx(), &[1, 2, 0, 2, 0, 1]);
        assert_eq!(m.to_dense(), vec![vec![f, t, t], vec![t, f, t], vec![t, t, f]]);
    }

    #[test]
    fn from_dense_all_zeros() {
        let m = CsrMatrix::from_dense(&vec![vec![false; 4]; 4]);
        assert_eq!(m.row_ptr(), &[0, 0, 0, 0, 0]);
        assert!(m.col_idx().is_empty());
        assert_eq!(m.to_dense(), vec![vec![false; 4]; 4]);
    }

    #[test]
    fn to_dense_inverse_of_from_dense() {
        let m = CsrMatrix::new(2, 2, vec![0, 1, 1], vec![1]).unwrap();
        assert_eq!(m.to_dense(), vec![vec![false, true], vec![false, false]]);
    }

    #[test]
    fn footprint_and_ratio() {
        let m = CsrMatrix::new(2, 2, vec![0, 1, 1], vec![1]).unwrap();
        assert_eq!(m.footprint(), 4); // 1 + 2 + 1
        assert!((m.compression_ratio() - 1.0).abs() < 1e-12);

        // 100x100 with 100 entries on the diagonal
        let mut dense = vec![vec![false; 100]; 100];
        for (i, row) in dense.iter_mut().enumerate() {
            row[i] = true;
        }
        let m = CsrMatrix::from_dense(&dense);
        assert_eq!(m.footprint(), 201);
        assert!((m.compression_ratio() - 10000.0 / 201.0).abs() < 1e-12);

        let empty = CsrMatrix::zeros(1, 1);
        assert_eq!(empty.footprint(), 2);
    }

    #[test]
    fn invalid_parts_are_rejected() {
        assert_eq!(
            CsrMatrix::new(2, 2, vec![0, 2, 1], vec![0, 1]).unwrap_err(),
            CsrError::MalformedRowPtr
        );
        assert_eq!(
            CsrMatrix::new(1, 2, vec![0, 2], vec![1, 1]).unwrap_err(),
            CsrError::MalformedColIdx
        );
        assert_eq!(
            CsrMatrix::new(1, 2, vec![0, 1], vec![2]).unwrap_err(),
            CsrError::MalformedColIdx
        );
    }

    #[test]
    fn transpose_and_multiply() {
        // path 0 -> 1 -> 2
        let a = CsrMatrix::from_edges(3, &[(0, 1), (1, 2)]);
        let at = a.transpose();
        assert!(at.get(1, 0) && at.get(2, 1) && !at.get(0, 1));
        // A * A gives the two-step reachability 0 -> 2
        let a2 = a.multiply(&a).unwrap();
        assert!(a2.get(0, 2));
        assert_eq!(a2.nnz(), 1);
    }

    #[test]
    fn containment() {
        let small = CsrMatrix::from_edges(3, &[(0, 1)]);
        let big = CsrMatrix::from_edges(3, &[(0, 1), (1, 2)]);
        assert!(small.is_contained_in(&big).unwrap());
        assert!(!big.is_contained_in(&small).unwrap());
        let other = CsrMatrix::from_edges(4, &[(0, 1)]);
        assert!(matches!(small.is_contained_in(&other), Err(CsrError::ShapeMismatch(_))));
    }

    fn arb_dense(max: usize) -> impl Strategy<Value = Vec<Vec<bool>>> {
        (1..=max, 1..=max).prop_flat_map(|(r, c)| {
            proptest::collection::vec(proptest::collection::vec(proptest::bool::weighted(0.2), c), r)
        })
    }

    proptest! {
        #[test]
        fn roundtrip_identity(dense in arb_dense(64)) {
            let m = CsrMatrix::from_dense(&dense);
            prop_assert_eq!(m.to_dense(), dense.clone());
            let again = CsrMatrix::from_dense(&m.to_dense());
            prop_assert_eq!(again, m);
        }

        #[test]
        fn footprint_beats_dense_at_low_density(dense in arb_dense(32)) {
            let m = CsrMatrix::from_dense(&dense);
            let cells = m.n_rows() * m.n_cols();
            let threshold = (cells as f64 - m.n_rows() as f64 - 1.0) / cells as f64;
            let density = m.nnz() as f64 / cells as f64;
            if density < threshold {
                prop_assert!(m.footprint() < cells);
            }
        }

        #[test]
        fn transpose_involution(dense in arb_dense(24)) {
            let m = CsrMatrix::from_dense(&dense);
            prop_assert_eq!(m.transpose().transpose(), m);
        }
    }
}

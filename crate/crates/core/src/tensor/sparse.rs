//! CSR matrices for graph propagation. Column indices are strictly
//! increasing within each row; the dense operand of a product receives the
//! gradient, the sparse operand never does.

use super::dense::DenseMatrix;
use super::TensorError;

/// Compressed sparse row matrix over `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicate coordinates are
    /// summed; explicit zeros are kept (callers that want them gone filter
    /// beforehand).
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, TensorError> {
        for &(r, c, _) in triplets {
            if r >= rows || c >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "from_triplets",
                    value: r.max(c),
                    rows,
                    cols,
                });
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(sorted.len());
        for (r, c, v) in sorted {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut row_offsets = vec![0usize; rows + 1];
        for &(r, _, _) in &merged {
            row_offsets[r + 1] += 1;
        }
        for i in 0..rows {
            row_offsets[i + 1] += row_offsets[i];
        }
        Ok(SparseMatrix {
            rows,
            cols,
            row_offsets,
            col_indices: merged.iter().map(|t| t.1).collect(),
            values: merged.iter().map(|t| t.2).collect(),
        })
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        (&self.col_indices[span.clone()], &self.values[span])
    }

    /// Iterates stored entries in (row, col) order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    /// Stored entry at `(r, c)`, or 0.0 when absent.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn densify(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.iter() {
            out.set(r, c, v);
        }
        out
    }

    /// `self * b` with `b` dense. Each output row reduces over the stored
    /// entries of the corresponding sparse row in ascending column order.
    pub fn spmm(&self, b: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
        if self.cols != b.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "spmm",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: b.rows(),
                rhs_cols: b.cols(),
            });
        }
        let n = b.cols();
        let mut out = DenseMatrix::zeros(self.rows, n);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let orow = out.row_mut(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let brow = b.row(c);
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += v * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * g`, used to push gradients through `spmm`. Row `j` of the
    /// output accumulates over stored entries `(i, j)` in ascending `i`.
    pub(crate) fn spmm_transpose(&self, g: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
        if self.rows != g.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "spmm_transpose",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: g.rows(),
                rhs_cols: g.cols(),
            });
        }
        let n = g.cols();
        let mut out = DenseMatrix::zeros(self.cols, n);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let grow = g.row(r).to_vec();
            for (&c, &v) in cols.iter().zip(vals) {
                let orow = out.row_mut(c);
                for (o, gv) in orow.iter_mut().zip(&grow) {
                    *o += v * gv;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_spmm_is_noop() {
        let b = DenseMatrix::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5], &[4.0, 4.0]]).unwrap();
        let id = SparseMatrix::identity(3);
        assert_eq!(id.spmm(&b).unwrap(), b);
    }

    #[test]
    fn path_graph_spmm_sums_neighbors() {
        // adjacency of the path 0-1-2 against a ones column
        let a = SparseMatrix::from_triplets(
            3,
            3,
            &[(0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0)],
        )
        .unwrap();
        let ones = DenseMatrix::filled(3, 1, 1.0);
        let out = a.spmm(&ones).unwrap();
        assert_eq!(out.values(), &[1.0, 2.0, 1.0]);
    }

    #[test]
    fn empty_matrix_yields_zeros() {
        let a = SparseMatrix::from_triplets(2, 3, &[]).unwrap();
        let b = DenseMatrix::filled(3, 2, 7.0);
        let out = a.spmm(&b).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
        assert_eq!(a.nnz(), 0);
    }

    #[test]
    fn duplicate_triplets_sum() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 1, 2.0), (0, 1, 3.0), (1, 0, 1.0)]).unwrap();
        assert_eq!(a.get(0, 1), 5.0);
        assert_eq!(a.nnz(), 2);
    }

    #[test]
    fn csr_columns_sorted_within_rows() {
        let a = SparseMatrix::from_triplets(2, 4, &[(0, 3, 1.0), (0, 1, 2.0), (1, 2, 3.0), (0, 0, 4.0)])
            .unwrap();
        let (cols, _) = a.row(0);
        assert_eq!(cols, &[0, 1, 3]);
    }

    #[test]
    fn transpose_product_matches_dense_path() {
        let a = SparseMatrix::from_triplets(3, 2, &[(0, 0, 2.0), (1, 1, -1.0), (2, 0, 0.5)]).unwrap();
        let g = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let via_sparse = a.spmm_transpose(&g).unwrap();
        let via_dense = crate::tensor::matmul(&a.densify().transpose(), &g).unwrap();
        assert_eq!(via_sparse, via_dense);
    }

    #[test]
    fn out_of_range_triplet_rejected() {
        assert!(SparseMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }
}

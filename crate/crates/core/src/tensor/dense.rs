//! Row-major dense matrices over `f64` and the three matmul kernels the
//! tape needs (plain, transposed-left, transposed-right).

use super::TensorError;
use rayon::prelude::*;

/// Work below this many output cells stays single-threaded; the rayon
/// dispatch overhead dwarfs the arithmetic otherwise.
const PAR_CELL_THRESHOLD: usize = 1 << 14;

/// Row-major `f64` matrix. The invariant `rows * cols == values.len()`
/// holds for every constructed instance.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    /// All-zeros matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    /// Matrix with every entry set to `v`.
    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![v; rows * cols],
        }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps an existing row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        if values.len() != rows * cols {
            return Err(TensorError::Invalid {
                op: "from_vec",
                reason: format!(
                    "buffer of length {} cannot form a {}x{} matrix",
                    values.len(),
                    rows,
                    cols
                ),
            });
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    /// Builds from nested slices; rows must agree in length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Invalid {
                    op: "from_rows",
                    reason: "ragged rows".into(),
                });
            }
            values.extend_from_slice(r);
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        out
    }

    /// Elementwise map into a fresh matrix.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &DenseMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `a * b`. Accumulation over the inner dimension runs in ascending order
/// for every output cell, so results are reproducible bit-for-bit.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = DenseMatrix::zeros(m, n);
    let body = |(i, row): (usize, &mut [f64])| {
        for p in 0..k {
            let a_ip = a.values[i * k + p];
            let brow = &b.values[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += a_ip * bv;
            }
        }
    };
    if m * n * k >= PAR_CELL_THRESHOLD {
        out.values.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.values.chunks_mut(n).enumerate().for_each(body);
    }
    Ok(out)
}

/// `a^T * b` without materializing the transpose. Output row `p` reduces
/// over ascending `i`, independently of other rows.
pub(crate) fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
    if a.rows != b.rows {
        return Err(shape_err("matmul_tn", a, b));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = DenseMatrix::zeros(k, n);
    let body = |(p, row): (usize, &mut [f64])| {
        for i in 0..m {
            let a_ip = a.values[i * k + p];
            let brow = &b.values[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += a_ip * bv;
            }
        }
    };
    if m * n * k >= PAR_CELL_THRESHOLD {
        out.values.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.values.chunks_mut(n).enumerate().for_each(body);
    }
    Ok(out)
}

/// `a * b^T`; each output cell is one dot product over ascending index.
pub(crate) fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_nt", a, b));
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = DenseMatrix::zeros(m, n);
    let body = |(i, row): (usize, &mut [f64])| {
        let arow = &a.values[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b.values[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m * n * k >= PAR_CELL_THRESHOLD {
        out.values.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.values.chunks_mut(n).enumerate().for_each(body);
    }
    Ok(out)
}

fn shape_err(op: &'static str, a: &DenseMatrix, b: &DenseMatrix) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs_rows: a.rows,
        lhs_cols: a.cols,
        rhs_rows: b.rows,
        rhs_cols: b.cols,
    }
}

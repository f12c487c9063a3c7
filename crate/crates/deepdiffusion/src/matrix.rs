//! Dense row-major matrices and the elementwise kernels everything else is
//! built on.
//!
//! Every reduction in this module runs in a fixed left-to-right order, so all
//! results are bit-reproducible for fixed inputs. Parallel variants split
//! work across independent output elements only; each element is still
//! produced by a single fixed-order loop, which keeps them bit-identical to
//! the serial code regardless of thread count.

use crate::error::{DdError, Result};
use rayon::prelude::*;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DdError::ShapeMismatch {
                op: "from_vec",
                detail: format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DdError::NonFinite {
                context: "from_vec",
                detail: format!("entry {pos} is {}", data[pos]),
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Identity matrix of side `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Borrow row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Transposed copy.
    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &DenseMatrix, scale: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(DdError::ShapeMismatch {
                op: "add_scaled",
                detail: format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }
}

/// Left-to-right dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Euclidean norm of a slice, summed left to right.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Euclidean norm of every row.
pub fn row_norms(m: &DenseMatrix) -> Vec<f64> {
    (0..m.rows()).map(|i| norm(m.row(i))).collect()
}

// Below this many multiply-adds a parallel launch costs more than it saves.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

fn matmul_check(a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.cols != b.rows {
        return Err(DdError::ShapeMismatch {
            op: "matmul",
            detail: format!(
                "left is {}x{}, right is {}x{}; inner dimensions must agree",
                a.rows, a.cols, b.rows, b.cols
            ),
        });
    }
    Ok(())
}

// Rows of `b` processed per blocking pass, sized so a block stays resident
// in L2 while every output row streams over it.
const MATMUL_K_BLOCK_DOUBLES: usize = 32 * 1024;

fn k_block_rows(cols: usize) -> usize {
    (MATMUL_K_BLOCK_DOUBLES / cols.max(1)).max(1)
}

fn matmul_row_block(out_row: &mut [f64], a_row: &[f64], b: &DenseMatrix, kb: usize, kend: usize) {
    // Within a block each output element accumulates in ascending-k order;
    // blocks are visited in ascending order too, so the overall per-element
    // reduction is exactly left-to-right. The 4-way step keeps that order
    // (the fused multiply-adds below are sequenced) while quartering the
    // out_row traffic.
    let cols = out_row.len();
    let mut k = kb;
    while k + 8 <= kend {
        let a0 = a_row[k];
        let a1 = a_row[k + 1];
        let a2 = a_row[k + 2];
        let a3 = a_row[k + 3];
        let a4 = a_row[k + 4];
        let a5 = a_row[k + 5];
        let a6 = a_row[k + 6];
        let a7 = a_row[k + 7];
        let b0 = &b.row(k)[..cols];
        let b1 = &b.row(k + 1)[..cols];
        let b2 = &b.row(k + 2)[..cols];
        let b3 = &b.row(k + 3)[..cols];
        let b4 = &b.row(k + 4)[..cols];
        let b5 = &b.row(k + 5)[..cols];
        let b6 = &b.row(k + 6)[..cols];
        let b7 = &b.row(k + 7)[..cols];
        for j in 0..cols {
            let mut acc = out_row[j];
            acc = a0.mul_add(b0[j], acc);
            acc = a1.mul_add(b1[j], acc);
            acc = a2.mul_add(b2[j], acc);
            acc = a3.mul_add(b3[j], acc);
            acc = a4.mul_add(b4[j], acc);
            acc = a5.mul_add(b5[j], acc);
            acc = a6.mul_add(b6[j], acc);
            acc = a7.mul_add(b7[j], acc);
            out_row[j] = acc;
        }
        k += 8;
    }
    while k < kend {
        let aik = a_row[k];
        let b_row = b.row(k);
        for j in 0..cols {
            out_row[j] = aik.mul_add(b_row[j], out_row[j]);
        }
        k += 1;
    }
}

fn matmul_rows_blocked(
    out_rows: &mut [f64],
    first_row: usize,
    row_count: usize,
    a: &DenseMatrix,
    b: &DenseMatrix,
) {
    let block = k_block_rows(b.cols);
    let mut kb = 0;
    while kb < a.cols {
        let kend = (kb + block).min(a.cols);
        for r in 0..row_count {
            matmul_row_block(
                &mut out_rows[r * b.cols..(r + 1) * b.cols],
                a.row(first_row + r),
                b,
                kb,
                kend,
            );
        }
        kb = kend;
    }
}

/// Matrix product `a * b` with a fixed per-element reduction order.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    matmul_check(a, b)?;
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    matmul_rows_blocked(&mut out.data, 0, a.rows, a, b);
    Ok(out)
}

/// Matrix product that may split row ranges of the output across threads.
///
/// Each output element is still a single fixed-order reduction computed by
/// exactly one thread, so the result is bit-identical to [`matmul`].
pub fn matmul_par(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    matmul_check(a, b)?;
    if a.rows * a.cols * b.cols < PAR_FLOP_THRESHOLD || a.rows < 2 {
        return matmul(a, b);
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    // A handful of chunks per thread balances load without shrinking tasks
    // below the rayon dispatch overhead.
    let chunks = (rayon::current_num_threads() * 4).max(1);
    let rows_per_chunk = a.rows.div_ceil(chunks);
    out.data
        .par_chunks_mut(rows_per_chunk * b.cols)
        .enumerate()
        .for_each(|(c, out_rows)| {
            let first_row = c * rows_per_chunk;
            let row_count = out_rows.len() / b.cols;
            matmul_rows_blocked(out_rows, first_row, row_count, a, b);
        });
    Ok(out)
}

/// Row-wise softmax with max-subtraction stabilization.
///
/// Each output row is a probability vector; constant rows map to uniform
/// rows and arbitrarily large finite inputs stay finite.
pub fn row_softmax(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Softmax of a single slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Normalizes every nonzero row to unit Euclidean norm; zero rows pass
/// through unchanged.
pub fn l2_normalize_rows(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let n = norm(row);
        if n > 0.0 {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
    }
    out
}

/// Indices of the `k` largest values, ties broken toward the lower index,
/// returned in descending value order.
pub fn top_k_indices(row: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > row.len() {
        return Err(DdError::InvalidArgument(format!(
            "top-k size {k} out of range for a row of length {}",
            row.len()
        )));
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_unstable_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
    idx.truncate(k);
    Ok(idx)
}

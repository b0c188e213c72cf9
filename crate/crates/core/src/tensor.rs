//! Dense row-major matrices in double precision.
//!
//! Only the handful of operations the attention path needs are provided.
//! Matrix products and row softmax report their arithmetic cost to a
//! per-thread counter (see [`count_flops`]) so the analytic cost model can
//! be checked against what the kernels actually execute.

use std::cell::Cell;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EgaError, Result};

/// FLOPs charged per softmax element (max pass, subtract, exp, sum, divide).
pub const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 5;

thread_local! {
    static FLOP_COUNTER: Cell<u64> = const { Cell::new(0) };
}

fn charge(flops: u64) {
    FLOP_COUNTER.with(|c| c.set(c.get() + flops));
}

/// Runs `f` and returns its result with the FLOPs charged by counted
/// kernels on this thread while it ran.
///
/// One multiply-add counts as 2 FLOPs; softmax counts
/// [`SOFTMAX_FLOPS_PER_ELEMENT`] per element. Elementwise work (scaling,
/// normalization, residual adds) is not charged.
pub fn count_flops<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = FLOP_COUNTER.with(Cell::get);
    let out = f();
    let after = FLOP_COUNTER.with(Cell::get);
    (out, after - before)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EgaError::shape("Matrix::new", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(EgaError::shape("Matrix::from_rows", (0, cols), (i, r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(EgaError::shape(op, self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest elementwise `|a − b|`; NaN if any difference is NaN.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(EgaError::shape("max_abs_diff", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, |m, d| if m.is_nan() || d.is_nan() { f64::NAN } else { m.max(d) }))
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row slice {start}..{end} out of {}", self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols, "col slice {start}..{end} out of {}", self.cols);
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Matrix { rows: self.rows, cols: end - start, data }
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(EgaError::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a.row(i).iter().enumerate() {
            for (o, &b_pj) in out_row.iter_mut().zip(b.row(p)) {
                *o += a_ip * b_pj;
            }
        }
    }
    charge(2 * (m * k * n) as u64);
    Ok(Matrix { rows: m, cols: n, data: out })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transpose_b(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(EgaError::shape("matmul_transpose_b", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out.push(ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum());
        }
    }
    charge(2 * (m * k * n) as u64);
    Ok(Matrix { rows: m, cols: n, data: out })
}

/// Numerically stable softmax over each row.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    charge(SOFTMAX_FLOPS_PER_ELEMENT * (m.rows * m.cols) as u64);
    out
}

/// Stacks `parts` vertically in the given order.
pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
    let Some(first) = parts.first() else {
        return Err(EgaError::Input("concat_rows needs at least one part".into()));
    };
    let cols = first.cols;
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
    for p in parts {
        if p.cols != cols {
            return Err(EgaError::shape("concat_rows", first.shape(), p.shape()));
        }
        data.extend_from_slice(&p.data);
    }
    Ok(Matrix { rows: parts.iter().map(|p| p.rows).sum(), cols, data })
}

/// Places `parts` side by side; all must share a row count.
pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
    let Some(first) = parts.first() else {
        return Err(EgaError::Input("concat_cols needs at least one part".into()));
    };
    let rows = first.rows;
    for p in parts {
        if p.rows != rows {
            return Err(EgaError::shape("concat_cols", first.shape(), p.shape()));
        }
    }
    let cols = parts.iter().map(|p| p.cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Matrix { rows, cols, data })
}

/// Deterministic matrix with entries uniform in `[-scale, scale]`.
pub fn seeded_init(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
    assert!(scale > 0.0, "seeded_init scale must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-scale, scale);
    let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
    Matrix { rows, cols, data }
}

/// Mixes a base seed with a path of indices into an independent stream seed
/// (splitmix64 finalizer).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut z = base;
    for &p in path {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

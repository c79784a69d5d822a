//! Dense row-major matrices and the elementary differentiable kernels used by
//! the adapter. All arithmetic is `f64`; one row is one sample.
//!
//! Backward helpers (`*_backward`) return vector-Jacobian products for the
//! corresponding forward kernel.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static MAC_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Total multiply-adds performed by the product kernels since the last reset.
pub fn mac_count() -> u64 {
    MAC_COUNTER.load(Ordering::Relaxed)
}

pub fn reset_mac_count() {
    MAC_COUNTER.store(0, Ordering::Relaxed);
}

fn record_macs(n: usize) {
    MAC_COUNTER.fetch_add(n as u64, Ordering::Relaxed);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Panics on a zero dimension; use [`Matrix::new`] for untrusted shapes.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be non-zero");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.iter_mut().for_each(|x| *x = value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (i, row.len()),
                    right: (r, c),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    /// Builds a matrix by evaluating `f(row, col)` for every entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Matrix> {
        if indices.is_empty() {
            return Err(Error::EmptyInput { what: "row indices" });
        }
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Shape {
                    op: "gather_rows",
                    left: (i, self.cols),
                    right: self.shape(),
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Matrix::new(indices.len(), self.cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Matrix) -> Result<f64> {
        same_shape("dot", self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        same_shape("axpy", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Sum over rows, one entry per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        out
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&self, bias: &[f64]) -> Result<Matrix> {
        if bias.len() != self.cols {
            return Err(Error::Shape {
                op: "add_row_vector",
                left: self.shape(),
                right: (1, bias.len()),
            });
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (x, b) in out.row_mut(i).iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(out)
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn zip_with(op: &'static str, a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    same_shape(op, a, b)?;
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

/// `a · b`, accumulated in a fixed order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    record_macs(a.rows * a.cols * b.cols);
    Ok(out)
}

/// `a · bᵀ`; rows of `a` against rows of `b`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    record_macs(a.rows * a.cols * b.rows);
    Ok(out)
}

/// `aᵀ · b`; used for weight gradients.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let ar = a.row(k);
        let br = b.row(k);
        for (i, &aki) in ar.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(br) {
                *o += aki * bkj;
            }
        }
    }
    record_macs(a.rows * a.cols * b.cols);
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Normalizes rows to unit Euclidean norm and returns the original norms.
pub fn l2_normalize_rows_with_norms(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows);
    for i in 0..m.rows {
        let n = norm(m.row(i));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateRow {
                op: "l2_normalize_rows",
                row: i,
            });
        }
        out.row_mut(i).iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    l2_normalize_rows_with_norms(m).map(|(m, _)| m)
}

/// VJP of row normalization: for `u = v/‖v‖`, `∂v = (∂u − u(u·∂u)) / ‖v‖`.
pub fn l2_normalize_rows_backward(normalized: &Matrix, norms: &[f64], grad: &Matrix) -> Result<Matrix> {
    same_shape("l2_normalize_rows_backward", normalized, grad)?;
    let mut out = grad.clone();
    for i in 0..normalized.rows {
        let u = normalized.row(i);
        let proj: f64 = u.iter().zip(grad.row(i)).map(|(a, b)| a * b).sum();
        let n = norms[i];
        for (o, &ui) in out.row_mut(i).iter_mut().zip(u) {
            *o = (*o - ui * proj) / n;
        }
    }
    Ok(out)
}

/// Pairwise cosine similarity, `[x.rows × y.rows]`.
pub fn cosine_rows(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    if x.cols != y.cols {
        return Err(Error::Shape {
            op: "cosine_rows",
            left: x.shape(),
            right: y.shape(),
        });
    }
    let xn = l2_normalize_rows(x)?;
    let yn = l2_normalize_rows(y)?;
    let mut out = matmul_nt(&xn, &yn)?;
    // rounding can push |cos| a hair past 1
    out.data.iter_mut().for_each(|c| *c = c.clamp(-1.0, 1.0));
    Ok(out)
}

/// VJP of [`cosine_rows`] with respect to both inputs.
pub fn cosine_rows_backward(x: &Matrix, y: &Matrix, grad: &Matrix) -> Result<(Matrix, Matrix)> {
    let (xn, xnorm) = l2_normalize_rows_with_norms(x)?;
    let (yn, ynorm) = l2_normalize_rows_with_norms(y)?;
    if grad.shape() != (x.rows, y.rows) {
        return Err(Error::Shape {
            op: "cosine_rows_backward",
            left: grad.shape(),
            right: (x.rows, y.rows),
        });
    }
    let gxn = matmul(grad, &yn)?;
    let gyn = matmul_tn(grad, &xn)?;
    Ok((
        l2_normalize_rows_backward(&xn, &xnorm, &gxn)?,
        l2_normalize_rows_backward(&yn, &ynorm, &gyn)?,
    ))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = libm::exp(*x - max);
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    out
}

/// Row-wise log-softmax, `z − max − ln Σ exp(z − max)`.
pub fn log_softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = libm::log(row.iter().map(|&x| libm::exp(x - max)).sum::<f64>()) + max;
        row.iter_mut().for_each(|x| *x -= lse);
    }
    out
}

/// VJP of [`softmax_rows`] given its output `p`: `p ⊙ (g − Σ g⊙p)`.
pub fn softmax_rows_backward(p: &Matrix, grad: &Matrix) -> Result<Matrix> {
    same_shape("softmax_rows_backward", p, grad)?;
    let mut out = grad.clone();
    for i in 0..p.rows {
        let pr = p.row(i);
        let s: f64 = pr.iter().zip(grad.row(i)).map(|(a, b)| a * b).sum();
        for (o, &pi) in out.row_mut(i).iter_mut().zip(pr) {
            *o = pi * (*o - s);
        }
    }
    Ok(out)
}

pub fn abs_diff(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    zip_with("abs_diff", a, b, |x, y| (x - y).abs())
}

pub fn exp_elementwise(m: &Matrix) -> Matrix {
    m.map(libm::exp)
}

pub fn scale(m: &Matrix, s: f64) -> Matrix {
    m.map(|x| x * s)
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    zip_with("hadamard", a, b, |x, y| x * y)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

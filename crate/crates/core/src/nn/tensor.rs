//! Dense row-major matrices and sparse row structures.
//!
//! `Tensor` is the unit of all learnable computation: a 2-D `f64` value
//! with an optional gradient slot of identical shape. `SparseRows` holds
//! adjacency-style data as per-row lists of `(column, weight)` pairs and
//! is never differentiated through.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols], grad: None }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Tensor { rows, cols, data, grad: None }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { rows: r, cols: c, data, grad: None }
    }

    /// Fan-in-scaled uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| (rng.uniform() * 2.0 - 1.0) * bound)
            .collect();
        Tensor { rows, cols, data, grad: None }
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Gradient slot; allocated on demand by the training step.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<f64>) {
        assert_eq!(g.len(), self.data.len(), "grad shape must match value shape");
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks the selected rows into a new tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(indices.len(), self.cols);
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Dim { op: "add", lhs: self.shape(), rhs: other.shape() });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { rows: self.rows, cols: self.cols, data, grad: None })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Dim { op: "sub", lhs: self.shape(), rhs: other.shape() });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { rows: self.rows, cols: self.cols, data, grad: None })
    }

    /// Largest absolute entry difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense product a @ b.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(Error::Dim { op: "matmul", lhs: a.shape(), rhs: b.shape() });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor { rows: m, cols: n, data: out, grad: None })
}

/// Adds a 1 x m bias row to every row of a.
pub fn add_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.rows != 1 || bias.cols != a.cols {
        return Err(Error::Dim { op: "add_bias", lhs: a.shape(), rhs: bias.shape() });
    }
    let mut out = a.clone();
    out.grad = None;
    for i in 0..a.rows {
        for (o, &b) in out.row_mut(i).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.grad = None;
    for i in 0..x.rows {
        let row = out.row_mut(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.grad = None;
    for i in 0..x.rows {
        let row = out.row_mut(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Per-row normalization to mean 0 / variance 1 (epsilon inside the
/// square root), then the affine gamma/beta transform.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if gamma.rows != 1 || gamma.cols != x.cols {
        return Err(Error::Dim { op: "layer_norm", lhs: x.shape(), rhs: gamma.shape() });
    }
    if beta.rows != 1 || beta.cols != x.cols {
        return Err(Error::Dim { op: "layer_norm", lhs: x.shape(), rhs: beta.shape() });
    }
    let d = x.cols as f64;
    let mut out = x.clone();
    out.grad = None;
    for i in 0..x.rows {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma.data[j] + beta.data[j];
        }
    }
    Ok(out)
}

/// Sparse matrix stored as per-row (column, weight) lists, columns
/// strictly increasing within each row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    n_cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        SparseRows { n_cols, rows: vec![Vec::new(); n_rows] }
    }

    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            let mut prev: Option<usize> = None;
            for &(j, w) in row {
                if j >= n_cols {
                    return Err(Error::Config(format!(
                        "sparse row {i}: column {j} out of range ({n_cols} columns)"
                    )));
                }
                if let Some(p) = prev {
                    if j <= p {
                        return Err(Error::Config(format!(
                            "sparse row {i}: columns not strictly increasing at {j}"
                        )));
                    }
                }
                if !w.is_finite() {
                    return Err(Error::Numeric(format!("sparse row {i}: non-finite weight")));
                }
                prev = Some(j);
            }
        }
        Ok(SparseRows { n_cols, rows })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn row_is_empty(&self, i: usize) -> bool {
        self.rows[i].is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// Inserts an entry, keeping columns sorted. Re-inserting a column
    /// overwrites its weight.
    pub fn insert(&mut self, i: usize, j: usize, w: f64) {
        let row = &mut self.rows[i];
        match row.binary_search_by_key(&j, |&(c, _)| c) {
            Ok(pos) => row[pos].1 = w,
            Err(pos) => row.insert(pos, (j, w)),
        }
    }

    pub fn set_row(&mut self, i: usize, row: Vec<(usize, f64)>) {
        debug_assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
        self.rows[i] = row;
    }

    pub fn clear_row(&mut self, i: usize) {
        self.rows[i].clear();
    }

    /// Stacks the selected rows into a new matrix over the same columns.
    pub fn gather_rows(&self, indices: &[usize]) -> SparseRows {
        SparseRows {
            n_cols: self.n_cols,
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.n_rows(), self.n_cols);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out.set(i, j, w);
            }
        }
        out
    }

    /// Row-normalized copy: each weight divided by the row weight sum.
    /// Empty rows stay empty.
    pub fn row_normalized(&self) -> SparseRows {
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let sum: f64 = row.iter().map(|&(_, w)| w).sum();
                if sum == 0.0 {
                    row.clone()
                } else {
                    row.iter().map(|&(j, w)| (j, w / sum)).collect()
                }
            })
            .collect();
        SparseRows { n_cols: self.n_cols, rows }
    }
}

/// Sparse-dense product a @ w.
pub fn spmm(a: &SparseRows, w: &Tensor) -> Result<Tensor> {
    if a.n_cols != w.rows() {
        return Err(Error::Dim { op: "spmm", lhs: (a.n_rows(), a.n_cols), rhs: w.shape() });
    }
    let n = w.cols();
    let mut out = Tensor::zeros(a.n_rows(), n);
    for (i, row) in a.rows.iter().enumerate() {
        let orow = &mut out.data[i * n..(i + 1) * n];
        for &(j, weight) in row {
            let wrow = &w.data[j * n..(j + 1) * n];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += weight * wv;
            }
        }
    }
    Ok(out)
}

/// a^T @ d, the gradient of spmm(a, w) with respect to w.
pub fn spmm_transpose(a: &SparseRows, d: &Tensor) -> Result<Tensor> {
    if a.n_rows() != d.rows() {
        return Err(Error::Dim { op: "spmm_transpose", lhs: (a.n_rows(), a.n_cols), rhs: d.shape() });
    }
    let n = d.cols();
    let mut out = Tensor::zeros(a.n_cols, n);
    for (i, row) in a.rows.iter().enumerate() {
        let drow = &d.data[i * n..(i + 1) * n];
        for &(j, weight) in row {
            let orow = &mut out.data[j * n..(j + 1) * n];
            for (o, &dv) in orow.iter_mut().zip(drow) {
                *o += weight * dv;
            }
        }
    }
    Ok(out)
}

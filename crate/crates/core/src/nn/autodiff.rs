//! Reverse-mode autodiff over a per-forward-pass tape of closures.
//!
//! Each training step builds a fresh [`Tape`], feeds parameter and data
//! tensors in as leaves, runs the forward pass through tape ops, and
//! calls [`Tape::backward`] on a scalar loss. Every op records a closure
//! that routes the output gradient to its parents. With gradients
//! disabled the same ops compute values only, which is the inference
//! path.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::nn::tensor::{self, SparseRows, Tensor};
use crate::rng::Rng;

/// Handle to a node on a [`Tape`]. Shape is carried for cheap checks.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Gradient routing context handed to backward closures.
pub struct BackwardCtx<'a> {
    values: &'a [Tensor],
    grad_out: &'a [f64],
    out: usize,
    grads: &'a mut [Vec<f64>],
}

impl BackwardCtx<'_> {
    fn value(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    fn out_value(&self) -> &Tensor {
        &self.values[self.out]
    }

    fn grad_out(&self) -> &[f64] {
        self.grad_out
    }

    fn add_to(&mut self, idx: usize, f: impl FnOnce(&mut [f64])) {
        f(&mut self.grads[idx]);
    }
}

type BackFn = Box<dyn Fn(&mut BackwardCtx)>;

struct Record {
    out: usize,
    back: BackFn,
}

struct TapeInner {
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    records: Vec<Record>,
    grad_enabled: bool,
}

pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                values: Vec::new(),
                grads: Vec::new(),
                records: Vec::new(),
                grad_enabled: true,
            }),
        }
    }

    /// Tape that records no backward closures; ops become value-only.
    pub fn inference() -> Self {
        let tape = Tape::new();
        tape.inner.borrow_mut().grad_enabled = false;
        tape
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.values.len();
        let var = Var { idx, rows: value.rows(), cols: value.cols() };
        inner.grads.push(Vec::new());
        inner.values.push(value);
        var
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().values[v.idx].clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().values[v.idx])
    }

    /// Scalar payload of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!((v.rows, v.cols), (1, 1));
        self.inner.borrow().values[v.idx].get(0, 0)
    }

    /// Gradient accumulated at `v` by the last [`Tape::backward`] call.
    /// Zero tensor if the node was never touched.
    pub fn grad(&self, v: Var) -> Tensor {
        let inner = self.inner.borrow();
        let g = &inner.grads[v.idx];
        if g.is_empty() {
            Tensor::zeros(v.rows, v.cols)
        } else {
            Tensor::from_vec(v.rows, v.cols, g.clone())
        }
    }

    fn push(&self, value: Tensor, back: Option<BackFn>) -> Var {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.values.len();
        let var = Var { idx, rows: value.rows(), cols: value.cols() };
        inner.grads.push(Vec::new());
        inner.values.push(value);
        if let Some(back) = back {
            if inner.grad_enabled {
                inner.records.push(Record { out: idx, back });
            }
        }
        var
    }

    fn record_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    /// Runs the recorded closures in reverse, seeding d(root)/d(root)=1.
    /// The root must be 1x1.
    pub fn backward(&self, root: Var) -> Result<()> {
        if (root.rows, root.cols) != (1, 1) {
            return Err(Error::Dim { op: "backward", lhs: root.shape(), rhs: (1, 1) });
        }
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        for (g, v) in inner.grads.iter_mut().zip(&inner.values) {
            g.clear();
            g.resize(v.rows() * v.cols(), 0.0);
        }
        inner.grads[root.idx][0] = 1.0;
        for rec in inner.records.iter().rev() {
            let grad_out = std::mem::take(&mut inner.grads[rec.out]);
            if grad_out.iter().all(|&g| g == 0.0) {
                inner.grads[rec.out] = grad_out;
                continue;
            }
            let mut ctx = BackwardCtx {
                values: &inner.values,
                grad_out: &grad_out,
                out: rec.out,
                grads: &mut inner.grads,
            };
            (rec.back)(&mut ctx);
            inner.grads[rec.out] = grad_out;
        }
        Ok(())
    }

    // ── ops ─────────────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            tensor::matmul(&inner.values[a.idx], &inner.values[b.idx])?
        };
        let back: Option<BackFn> = if self.record_enabled() {
            Some(Box::new(move |ctx| {
                let (m, n) = ctx.out_value().shape();
                let gout = Tensor::from_vec(m, n, ctx.grad_out().to_vec());
                let da = tensor::matmul(&gout, &ctx.value(b.idx).transpose()).unwrap();
                let db = tensor::matmul(&ctx.value(a.idx).transpose(), &gout).unwrap();
                ctx.add_to(a.idx, |g| accumulate(g, da.data()));
                ctx.add_to(b.idx, |g| accumulate(g, db.data()));
            }))
        } else {
            None
        };
        Ok(self.push(out, back))
    }

    /// Sparse-dense product; gradient flows into the dense operand only.
    pub fn spmm(&self, a: &SparseRows, w: Var) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            tensor::spmm(a, &inner.values[w.idx])?
        };
        let back: Option<BackFn> = if self.record_enabled() {
            let a = a.clone();
            Some(Box::new(move |ctx| {
                let (m, n) = ctx.out_value().shape();
                let gout = Tensor::from_vec(m, n, ctx.grad_out().to_vec());
                let dw = tensor::spmm_transpose(&a, &gout).unwrap();
                ctx.add_to(w.idx, |g| accumulate(g, dw.data()));
            }))
        } else {
            None
        };
        Ok(self.push(out, back))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            inner.values[a.idx].add(&inner.values[b.idx])?
        };
        let back: Option<BackFn> = if self.record_enabled() {
            Some(Box::new(move |ctx| {
                let gout = ctx.grad_out().to_vec();
                ctx.add_to(a.idx, |g| accumulate(g, &gout));
                ctx.add_to(b.idx, |g| accumulate(g, &gout));
            }))
        } else {
            None
        };
        Ok(self.push(out, back))
    }

    /// Broadcasts a 1 x m bias over the rows of x.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            tensor::add_bias(&inner.values[x.idx], &inner.values[bias.idx])?
        };
        let cols = x.cols;
        let back: Option<BackFn> = if self.record_enabled() {
            Some(Box::new(move |ctx| {
                let gout = ctx.grad_out().to_vec();
                ctx.add_to(x.idx, |g| accumulate(g, &gout));
                ctx.add_to(bias.idx, |g| {
                    for (k, &v) in gout.iter().enumerate() {
                        g[k % cols] += v;
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(out, back))
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.values[x.idx].scale(s)
        };
        let back: Option<BackFn> = if self.record_enabled() {
            Some(Box::new(move |ctx| {
                let gout: Vec<f64> = ctx.grad_out().iter().map(|&g| g * s).collect();
                ctx.add_to(x.idx, |g| accumulate(g, &gout));
            }))
        } else {
            None
        };
        self.push(out, back)
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            tensor::relu(&inner.values[x.idx])
        };
        let back: Option<BackFn> = if self.record_enabled() {
            Some(Box::new(move |ctx| {
                let xin = ctx.value(x.idx).data().to_vec();
                let gout = ctx.grad_out().to_vec();
                ctx.add_to(x.idx, |g| {
                    for ((gi, &go), &xv) in g.iter_mut().zip(&gout).zip(&xin) {
                        if xv > 0.0 {
                            *gi += go;
                        }
                    }
                });
            }))
        } else {
            None
        };
        self.push(out, back)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            tensor::sigmoid(&inner.values[x.idx])
        };
        let back: Option<BackFn> = if self.record_enabled() {
            Some(Box::new(move |ctx| {
                let y = ctx.out_value().data().to_vec();
                let gout = ctx.grad_out().to_vec();
                ctx.add_to(x.idx, |g| {
                    for ((gi, &go), &yv) in g.iter_mut().zip(&gout).zip(&y) {
                        *gi += go * yv * (1.0 - yv);
                    }
                });
            }))
        } else {
            None
        };
        self.push(out, back)
    }

    pub fn softmax_rows(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            tensor::softmax_rows(&inner.values[x.idx])
        };
        let (rows, cols) = (x.rows, x.cols);
        let back: Option<BackFn> = if self.record_enabled() {
            Some(Box::new(move |ctx| {
                let y = ctx.out_value().data().to_vec();
                let gout = ctx.grad_out().to_vec();
                ctx.add_to(x.idx, |g| {
                    for i in 0..rows {
                        let ys = &y[i * cols..(i + 1) * cols];
                        let gs = &gout[i * cols..(i + 1) * cols];
                        let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..cols {
                            g[i * cols + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }))
        } else {
            None
        };
        self.push(out, back)
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            tensor::layer_norm(
                &inner.values[x.idx],
                &inner.values[gamma.idx],
                &inner.values[beta.idx],
                eps,
            )?
        };
        let (rows, cols) = (x.rows, x.cols);
        let back: Option<BackFn> = if self.record_enabled() {
            Some(Box::new(move |ctx| {
                let xin = ctx.value(x.idx).data().to_vec();
                let gam = ctx.value(gamma.idx).data().to_vec();
                let gout = ctx.grad_out().to_vec();
                let d = cols as f64;
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for i in 0..rows {
                    let xs = &xin[i * cols..(i + 1) * cols];
                    let gs = &gout[i * cols..(i + 1) * cols];
                    let mean = xs.iter().sum::<f64>() / d;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
                    for j in 0..cols {
                        dgamma[j] += gs[j] * xhat[j];
                        dbeta[j] += gs[j];
                    }
                    let dxhat: Vec<f64> = gs.iter().zip(&gam).map(|(&g, &gm)| g * gm).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / d;
                    for j in 0..cols {
                        dx[i * cols + j] =
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                ctx.add_to(x.idx, |g| accumulate(g, &dx));
                ctx.add_to(gamma.idx, |g| accumulate(g, &dgamma));
                ctx.add_to(beta.idx, |g| accumulate(g, &dbeta));
            }))
        } else {
            None
        };
        Ok(self.push(out, back))
    }

    /// Training-mode dropout; identity when `training` is false.
    pub fn dropout(&self, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            let out = self.inner.borrow().values[x.idx].clone();
            let back: Option<BackFn> = if self.record_enabled() {
                Some(Box::new(move |ctx| {
                    let gout = ctx.grad_out().to_vec();
                    ctx.add_to(x.idx, |g| accumulate(g, &gout));
                }))
            } else {
                None
            };
            return Ok(self.push(out, back));
        }
        let keep = 1.0 / (1.0 - p);
        let n = x.rows * x.cols;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.values[x.idx];
            let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            Tensor::from_vec(x.rows, x.cols, data)
        };
        let back: Option<BackFn> = if self.record_enabled() {
            Some(Box::new(move |ctx| {
                let gout: Vec<f64> =
                    ctx.grad_out().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                ctx.add_to(x.idx, |g| accumulate(g, &gout));
            }))
        } else {
            None
        };
        Ok(self.push(out, back))
    }

    /// Gathers the given rows into a new node; backward scatter-adds.
    pub fn select_rows(&self, x: Var, indices: &[usize]) -> Result<Var> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows) {
            return Err(Error::Config(format!("select_rows: row {bad} out of range")));
        }
        let out = {
            let inner = self.inner.borrow();
            inner.values[x.idx].gather_rows(indices)
        };
        let cols = x.cols;
        let back: Option<BackFn> = if self.record_enabled() {
            let indices = indices.to_vec();
            Some(Box::new(move |ctx| {
                let gout = ctx.grad_out().to_vec();
                ctx.add_to(x.idx, |g| {
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..cols {
                            g[i * cols + j] += gout[k * cols + j];
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(out, back))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        if a.rows != b.rows {
            return Err(Error::Dim { op: "concat_cols", lhs: a.shape(), rhs: b.shape() });
        }
        let (rows, ca, cb) = (a.rows, a.cols, b.cols);
        let out = {
            let inner = self.inner.borrow();
            let (av, bv) = (&inner.values[a.idx], &inner.values[b.idx]);
            let mut data = Vec::with_capacity(rows * (ca + cb));
            for i in 0..rows {
                data.extend_from_slice(av.row(i));
                data.extend_from_slice(bv.row(i));
            }
            Tensor::from_vec(rows, ca + cb, data)
        };
        let back: Option<BackFn> = if self.record_enabled() {
            Some(Box::new(move |ctx| {
                let gout = ctx.grad_out().to_vec();
                let w = ca + cb;
                ctx.add_to(a.idx, |g| {
                    for i in 0..rows {
                        for j in 0..ca {
                            g[i * ca + j] += gout[i * w + j];
                        }
                    }
                });
                ctx.add_to(b.idx, |g| {
                    for i in 0..rows {
                        for j in 0..cb {
                            g[i * cb + j] += gout[i * w + ca + j];
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(out, back))
    }

    /// Row-wise gated blend (1-alpha) * zx + alpha * za, with the n x 1
    /// alpha broadcast across columns.
    pub fn lerp_rows(&self, alpha: Var, zx: Var, za: Var) -> Result<Var> {
        if zx.shape() != za.shape() {
            return Err(Error::Dim { op: "lerp_rows", lhs: zx.shape(), rhs: za.shape() });
        }
        if alpha.rows != zx.rows || alpha.cols != 1 {
            return Err(Error::Dim { op: "lerp_rows", lhs: alpha.shape(), rhs: (zx.rows, 1) });
        }
        let (rows, cols) = zx.shape();
        let out = {
            let inner = self.inner.borrow();
            let al = &inner.values[alpha.idx];
            let zxv = &inner.values[zx.idx];
            let zav = &inner.values[za.idx];
            let mut data = vec![0.0; rows * cols];
            for i in 0..rows {
                let a = al.get(i, 0);
                for j in 0..cols {
                    data[i * cols + j] = (1.0 - a) * zxv.get(i, j) + a * zav.get(i, j);
                }
            }
            Tensor::from_vec(rows, cols, data)
        };
        let back: Option<BackFn> = if self.record_enabled() {
            Some(Box::new(move |ctx| {
                let a = ctx.value(alpha.idx).data().to_vec();
                let zxv = ctx.value(zx.idx).data().to_vec();
                let zav = ctx.value(za.idx).data().to_vec();
                let gout = ctx.grad_out().to_vec();
                ctx.add_to(zx.idx, |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            g[i * cols + j] += (1.0 - a[i]) * gout[i * cols + j];
                        }
                    }
                });
                ctx.add_to(za.idx, |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            g[i * cols + j] += a[i] * gout[i * cols + j];
                        }
                    }
                });
                ctx.add_to(alpha.idx, |g| {
                    for i in 0..rows {
                        let mut s = 0.0;
                        for j in 0..cols {
                            s += gout[i * cols + j] * (zav[i * cols + j] - zxv[i * cols + j]);
                        }
                        g[i] += s;
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(out, back))
    }

    /// Mean cross-entropy of softmax(scores) against integer labels,
    /// fused for stability. Returns a 1x1 node.
    pub fn softmax_cross_entropy(&self, scores: Var, labels: &[usize]) -> Result<Var> {
        if labels.len() != scores.rows {
            return Err(Error::Dim {
                op: "softmax_cross_entropy",
                lhs: scores.shape(),
                rhs: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= scores.cols) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {} classes",
                scores.cols
            )));
        }
        let (loss, probs) = {
            let inner = self.inner.borrow();
            let s = &inner.values[scores.idx];
            let logp = tensor::log_softmax_rows(s);
            let mut loss = 0.0;
            for (i, &l) in labels.iter().enumerate() {
                loss -= logp.get(i, l);
            }
            loss /= scores.rows as f64;
            (loss, logp.map(f64::exp))
        };
        let n = scores.rows as f64;
        let back: Option<BackFn> = if self.record_enabled() {
            let labels = labels.to_vec();
            Some(Box::new(move |ctx| {
                let go = ctx.grad_out()[0];
                let cols = probs.cols();
                ctx.add_to(scores.idx, |g| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..cols {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            g[i * cols + j] += go * (probs.get(i, j) - onehot) / n;
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::from_vec(1, 1, vec![loss]), back))
    }

    /// Mean KL(teacher || softmax(scores)) over rows, fused for
    /// stability. The teacher matrix is data: gradient reaches only the
    /// student scores. Returns a 1x1 node.
    pub fn softmax_kl(&self, scores: Var, teacher: &Tensor) -> Result<Var> {
        if teacher.shape() != scores.shape() {
            return Err(Error::Dim { op: "softmax_kl", lhs: scores.shape(), rhs: teacher.shape() });
        }
        let (rows, cols) = scores.shape();
        let (loss, probs) = {
            let inner = self.inner.borrow();
            let s = &inner.values[scores.idx];
            let logp = tensor::log_softmax_rows(s);
            let mut loss = 0.0;
            for i in 0..rows {
                for j in 0..cols {
                    let t = teacher.get(i, j);
                    if t > 0.0 {
                        loss += t * (t.max(1e-12).ln() - logp.get(i, j));
                    }
                }
            }
            loss /= rows as f64;
            (loss, logp.map(f64::exp))
        };
        let n = rows as f64;
        let back: Option<BackFn> = if self.record_enabled() {
            let teacher = teacher.clone();
            Some(Box::new(move |ctx| {
                let go = ctx.grad_out()[0];
                ctx.add_to(scores.idx, |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            g[i * cols + j] +=
                                go * (probs.get(i, j) - teacher.get(i, j)) / n;
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::from_vec(1, 1, vec![loss]), back))
    }
}

fn accumulate(g: &mut [f64], contribution: &[f64]) {
    debug_assert_eq!(g.len(), contribution.len());
    for (gi, &c) in g.iter_mut().zip(contribution) {
        *gi += c;
    }
}

/// Mean of -ln(probs[i, label_i]) with the log clamped at 1e-12.
/// Value-level companion of the fused tape op.
pub fn cross_entropy_probs(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.rows() {
        return Err(Error::Dim {
            op: "cross_entropy",
            lhs: probs.shape(),
            rhs: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= probs.cols()) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {} classes",
            probs.cols()
        )));
    }
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        loss -= probs.get(i, l).max(1e-12).ln();
    }
    Ok(loss / probs.rows() as f64)
}

/// Mean over rows of sum_j t_ij (ln t_ij - ln s_ij), logs clamped at
/// 1e-12. Value-level companion of the fused tape op.
pub fn kl_div_probs(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::Dim { op: "kl_div", lhs: student.shape(), rhs: teacher.shape() });
    }
    let mut loss = 0.0;
    for i in 0..student.rows() {
        for j in 0..student.cols() {
            let t = teacher.get(i, j);
            if t > 0.0 {
                loss += t * (t.max(1e-12).ln() - student.get(i, j).max(1e-12).ln());
            }
        }
    }
    Ok(loss / student.rows() as f64)
}

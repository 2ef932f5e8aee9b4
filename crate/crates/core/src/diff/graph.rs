//! Dynamic reverse-mode operation graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking them backwards is a valid topological order
//! for the backward pass. Parameters enter the graph through a [`Session`],
//! which borrows a [`ParamStore`] immutably and hands back gradients and
//! batch-norm running-stat updates for the caller to apply.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{Gradients, ParamStore};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{shape_err, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// User-defined differentiable operation.
pub trait CustomOp: Send + Sync {
    /// Gradient contribution for each input (`None` when the input receives none).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

/// Sparse matrix in row-list form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rows * self.cols];
        for (i, row) in self.entries.iter().enumerate() {
            for &(j, v) in row {
                d[i * self.cols + j] += v;
            }
        }
        d
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    EdgeLinear {
        x: usize,
        w: usize,
        neighbors: Arc<Vec<usize>>,
        k: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Softplus(usize),
    LogSoftmax(usize),
    NeighborMax {
        x: usize,
        argmax: Vec<usize>,
    },
    Concat(Vec<usize>),
    Slice {
        x: usize,
        start: usize,
    },
    Add(usize, usize),
    LinComb(Vec<(usize, f64)>),
    SpMM(Arc<SparseMatrix>, usize),
    Gram(usize),
    Mean(usize),
    NllMean {
        logp: usize,
        labels: Arc<Vec<usize>>,
    },
    L1Mean {
        x: usize,
        targets: Arc<Vec<f64>>,
    },
    PairBce {
        logits: usize,
        pairs: Arc<Vec<(usize, usize)>>,
        labels: Arc<Vec<f64>>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(shape_err(format!(
            "{what}: expected a matrix, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit against a {0,1} label, in log space.
#[inline]
pub fn bce_with_logit(logit: f64, label: f64) -> f64 {
    // -[y log σ(l) + (1-y) log(1-σ(l))] = softplus(l) - y l
    softplus(logit) - label * logit
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = check_2d(self.value(a), "matmul lhs")?;
        let (k2, m) = check_2d(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(shape_err(format!("matmul inner dims {k} vs {k2}")));
        }
        let out = matmul(self.value(a).data(), n, k, self.value(b).data(), m);
        Ok(self.push(
            Tensor::matrix(n, m, out)?,
            Op::MatMul(a.0, b.0),
            &[a.0, b.0],
        ))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = check_2d(self.value(x), "bias input")?;
        if self.value(b).len() != m {
            return Err(shape_err(format!(
                "bias of length {} for {m} columns",
                self.value(b).len()
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m.max(1)) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        debug_assert_eq!(out.rows(), n);
        Ok(self.push(out, Op::AddBias(x.0, b.0), &[x.0, b.0]))
    }

    /// `y = xW + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Shared linear map over EdgeConv edge inputs `[x_i, x_j - x_i]`.
    ///
    /// `neighbors` holds `k` indices per point (row-major `[n, k]`); the
    /// output has one row per edge, `[n*k, c_out]`, for `w` of shape
    /// `[2c, c_out]`. Evaluated as `x_i (W1 - W2) + x_j W2` so the matrix
    /// products run per point rather than per edge.
    pub fn edge_linear(
        &mut self,
        x: Var,
        w: Var,
        neighbors: Arc<Vec<usize>>,
        k: usize,
    ) -> Result<Var> {
        let (n, c) = check_2d(self.value(x), "edge input")?;
        let (c2, co) = check_2d(self.value(w), "edge weight")?;
        if c2 != 2 * c {
            return Err(shape_err(format!(
                "edge weight has {c2} rows, need {}",
                2 * c
            )));
        }
        if neighbors.len() != n * k || k == 0 {
            return Err(shape_err("neighbor table does not match point count"));
        }
        if neighbors.iter().any(|&j| j >= n) {
            return Err(shape_err("neighbor index out of range"));
        }
        let wd = self.value(w).data();
        let (w1, w2) = wd.split_at(c * co);
        let wdiff: Vec<f64> = w1.iter().zip(w2).map(|(a, b)| a - b).collect();
        let xd = self.value(x).data();
        let a = matmul(xd, n, c, &wdiff, co);
        let bm = matmul(xd, n, c, w2, co);
        let mut out = vec![0.0; n * k * co];
        for i in 0..n {
            let arow = &a[i * co..(i + 1) * co];
            for t in 0..k {
                let j = neighbors[i * k + t];
                let brow = &bm[j * co..(j + 1) * co];
                let orow = &mut out[(i * k + t) * co..(i * k + t + 1) * co];
                for ((o, av), bv) in orow.iter_mut().zip(arow).zip(brow) {
                    *o = av + bv;
                }
            }
        }
        Ok(self.push(
            Tensor::matrix(n * k, co, out)?,
            Op::EdgeLinear {
                x: x.0,
                w: w.0,
                neighbors,
                k,
            },
            &[x.0, w.0],
        ))
    }

    /// Batch normalization over rows. With `running = Some((mean, var))`
    /// the given statistics are used instead of the batch's.
    pub(crate) fn batchnorm_raw(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c) = check_2d(self.value(x), "batchnorm input")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err(
                "batchnorm affine parameters do not match channels",
            ));
        }
        let xd = self.value(x).data();
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                if n < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "batch normalization in training needs at least 2 rows, got {n}"
                    )));
                }
                let mut mean = vec![0.0; c];
                for row in xd.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in xd.chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for (r, row) in xd.chunks(c).enumerate() {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat[r * c + ch] = h;
                out[r * c + ch] = g[ch] * h + b[ch];
            }
        }
        let v = self.push(
            Tensor::matrix(n, c, out)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            &[x.0, gamma.0, beta.0],
        );
        Ok((v, mean, var))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(t, op, &[x.0])
    }

    /// LeakyReLU; the gradient at exactly 0 uses the positive branch.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            |v| if v >= 0.0 { v } else { slope * v },
            Op::LeakyRelu(x.0, slope),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x.0))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let c = src.cols().max(1);
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::LogSoftmax(x.0), &[x.0])
    }

    /// Max over groups of `k` consecutive rows: `[n*k, c] -> [n, c]`.
    /// A 3-D `[n, k, c]` input is accepted as well. Ties go to the first row.
    pub fn neighborhood_max(&mut self, x: Var, k: usize) -> Result<Var> {
        let src = self.value(x);
        let c = src.cols();
        let total = src.rows();
        if k == 0 || total % k != 0 {
            return Err(shape_err(format!(
                "{total} rows do not split into groups of {k}"
            )));
        }
        let n = total / k;
        let d = src.data();
        let mut out = vec![0.0; n * c];
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            for ch in 0..c {
                let mut best = d[(i * k) * c + ch];
                let mut arg = 0;
                for t in 1..k {
                    let v = d[(i * k + t) * c + ch];
                    if v > best {
                        best = v;
                        arg = t;
                    }
                }
                out[i * c + ch] = best;
                argmax[i * c + ch] = i * k + arg;
            }
        }
        Ok(self.push(
            Tensor::matrix(n, c, out)?,
            Op::NeighborMax { x: x.0, argmax },
            &[x.0],
        ))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = check_2d(self.value(p), "concat input")?;
            if r != n {
                return Err(shape_err("concat row mismatch"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            Tensor::matrix(n, total, out)?,
            Op::Concat(ids.clone()),
            &ids,
        ))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = check_2d(self.value(x), "slice input")?;
        if start + len > c {
            return Err(shape_err("column slice out of range"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        Ok(self.push(
            Tensor::matrix(n, len, out)?,
            Op::Slice { x: x.0, start },
            &[x.0],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("add shape mismatch"));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// `Σ c_k v_k` over same-shaped terms.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let shape = self.value(terms[0].0).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(shape_err("lin_comb shape mismatch"));
            }
            for (o, x) in out.data_mut().iter_mut().zip(t.data()) {
                *o += c * x;
            }
        }
        let ids: Vec<(usize, f64)> = terms.iter().map(|&(v, c)| (v.0, c)).collect();
        let inputs: Vec<usize> = ids.iter().map(|t| t.0).collect();
        Ok(self.push(out, Op::LinComb(ids), &inputs))
    }

    /// Sparse-dense product `m · h`.
    pub fn spmm(&mut self, m: Arc<SparseMatrix>, h: Var) -> Result<Var> {
        let (n, c) = check_2d(self.value(h), "spmm rhs")?;
        if m.cols != n {
            return Err(shape_err(format!(
                "sparse matrix has {} columns for {n} rows",
                m.cols
            )));
        }
        let hd = self.value(h).data();
        let mut out = vec![0.0; m.rows * c];
        for (i, row) in m.entries.iter().enumerate() {
            let orow = &mut out[i * c..(i + 1) * c];
            for &(j, w) in row {
                for (o, v) in orow.iter_mut().zip(&hd[j * c..(j + 1) * c]) {
                    *o += w * v;
                }
            }
        }
        let rows = m.rows;
        Ok(self.push(Tensor::matrix(rows, c, out)?, Op::SpMM(m, h.0), &[h.0]))
    }

    /// `z · zᵀ`.
    pub fn gram(&mut self, z: Var) -> Result<Var> {
        let (n, d) = check_2d(self.value(z), "gram input")?;
        let zd = self.value(z).data();
        let out = matmul_nt(zd, n, d, zd, n);
        Ok(self.push(Tensor::matrix(n, n, out)?, Op::Gram(z.0), &[z.0]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(m), Op::Mean(x.0), &[x.0])
    }

    /// `-mean_i logp[i, label_i]` for row-wise log-probabilities.
    pub fn nll_mean(&mut self, logp: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let (n, c) = check_2d(self.value(logp), "nll input")?;
        if labels.len() != n || n == 0 {
            return Err(shape_err("label count does not match rows"));
        }
        if labels.iter().any(|&l| l >= c) {
            return Err(shape_err("label out of range"));
        }
        let d = self.value(logp).data();
        let s: f64 = labels.iter().enumerate().map(|(i, &l)| -d[i * c + l]).sum();
        Ok(self.push(
            Tensor::scalar(s / n as f64),
            Op::NllMean {
                logp: logp.0,
                labels,
            },
            &[logp.0],
        ))
    }

    /// `mean_i |x_i - t_i|`.
    pub fn l1_mean(&mut self, x: Var, targets: Arc<Vec<f64>>) -> Result<Var> {
        let t = self.value(x);
        if t.len() != targets.len() || targets.is_empty() {
            return Err(shape_err("target count does not match input"));
        }
        let s: f64 = t
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let n = targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(s / n),
            Op::L1Mean { x: x.0, targets },
            &[x.0],
        ))
    }

    /// Mean binary cross-entropy with logits over selected entries of a
    /// square logit matrix.
    pub fn pair_bce(
        &mut self,
        logits: Var,
        pairs: Arc<Vec<(usize, usize)>>,
        labels: Arc<Vec<f64>>,
    ) -> Result<Var> {
        let (n, m) = check_2d(self.value(logits), "pair logits")?;
        if pairs.is_empty() {
            return Err(Error::Empty("pair mask is empty".into()));
        }
        if pairs.len() != labels.len() {
            return Err(shape_err("pair/label count mismatch"));
        }
        if pairs.iter().any(|&(i, j)| i >= n || j >= m) {
            return Err(shape_err("pair index out of range"));
        }
        let d = self.value(logits).data();
        let s: f64 = pairs
            .iter()
            .zip(labels.iter())
            .map(|(&(i, j), &y)| bce_with_logit(d[i * m + j], y))
            .sum();
        let v = Tensor::scalar(s / pairs.len() as f64);
        Ok(self.push(
            v,
            Op::PairBce {
                logits: logits.0,
                pairs,
                labels,
            },
            &[logits.0],
        ))
    }

    /// Appends a node computed outside the graph with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push(
            value,
            Op::Custom {
                inputs: ids.clone(),
                op,
            },
            &ids,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one. Entry `i` is `None` for nodes outside the gradient path.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            for (target, contrib) in self.local_grads(idx, &g)? {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        let same = |i: usize, data: Vec<f64>| Tensor::new(val(i).shape().to_vec(), data);
        let gd = g.data();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (n, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let m = val(*b).shape()[1];
                let ga = matmul_nt(gd, n, m, val(*b).data(), k);
                let gb = matmul_tn(val(*a).data(), n, k, gd, m);
                vec![(*a, same(*a, ga)?), (*b, same(*b, gb)?)]
            }
            Op::AddBias(x, b) => {
                let m = val(*b).len();
                let mut gb = vec![0.0; m];
                for row in gd.chunks(m.max(1)) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                vec![(*x, g.clone()), (*b, same(*b, gb)?)]
            }
            Op::EdgeLinear { x, w, neighbors, k } => {
                let (n, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let co = val(*w).shape()[1];
                let wd = val(*w).data();
                let (w1, w2) = wd.split_at(c * co);
                let mut ga = vec![0.0; n * co];
                let mut gb = vec![0.0; n * co];
                for i in 0..n {
                    for t in 0..*k {
                        let e = i * k + t;
                        let j = neighbors[e];
                        let grow = &gd[e * co..(e + 1) * co];
                        for ch in 0..co {
                            ga[i * co + ch] += grow[ch];
                            gb[j * co + ch] += grow[ch];
                        }
                    }
                }
                let wdiff: Vec<f64> = w1.iter().zip(w2).map(|(a, b)| a - b).collect();
                let xd = val(*x).data();
                let mut gx = matmul_nt(&ga, n, co, &wdiff, c);
                let gx2 = matmul_nt(&gb, n, co, w2, c);
                gx.iter_mut().zip(&gx2).for_each(|(a, b)| *a += b);
                let gw1 = matmul_tn(xd, n, c, &ga, co);
                let gdiff: Vec<f64> = gb.iter().zip(&ga).map(|(b, a)| b - a).collect();
                let gw2 = matmul_tn(xd, n, c, &gdiff, co);
                let mut gw = gw1;
                gw.extend(gw2);
                vec![(*x, same(*x, gx)?), (*w, same(*w, gw)?)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let n = xhat.len() / c.max(1);
                let gam = val(*gamma).data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for r in 0..n {
                    for ch in 0..c {
                        let gv = gd[r * c + ch];
                        ggamma[ch] += gv * xhat[r * c + ch];
                        gbeta[ch] += gv;
                    }
                }
                let mut gx = vec![0.0; n * c];
                if *batch_stats {
                    let nf = n as f64;
                    for ch in 0..c {
                        let sum_dh = gbeta[ch] * gam[ch];
                        let sum_dh_h = ggamma[ch] * gam[ch];
                        for r in 0..n {
                            let dh = gd[r * c + ch] * gam[ch];
                            gx[r * c + ch] =
                                inv_std[ch] / nf * (nf * dh - sum_dh - xhat[r * c + ch] * sum_dh_h);
                        }
                    }
                } else {
                    for r in 0..n {
                        for ch in 0..c {
                            gx[r * c + ch] = gd[r * c + ch] * gam[ch] * inv_std[ch];
                        }
                    }
                }
                vec![
                    (*x, same(*x, gx)?),
                    (*gamma, same(*gamma, ggamma)?),
                    (*beta, same(*beta, gbeta)?),
                ]
            }
            Op::LeakyRelu(x, slope) => {
                let gx = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v >= 0.0 { gv } else { slope * gv })
                    .collect();
                vec![(*x, same(*x, gx)?)]
            }
            Op::Sigmoid(x) => {
                let gx = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                vec![(*x, same(*x, gx)?)]
            }
            Op::Softplus(x) => {
                let gx = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| gv * sigmoid(v))
                    .collect();
                vec![(*x, same(*x, gx)?)]
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols().max(1);
                let mut gx = vec![0.0; gd.len()];
                for ((orow, grow), yrow) in gx
                    .chunks_mut(c)
                    .zip(gd.chunks(c))
                    .zip(node.value.data().chunks(c))
                {
                    let s: f64 = grow.iter().sum();
                    for ((o, gv), y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o = gv - y.exp() * s;
                    }
                }
                vec![(*x, same(*x, gx)?)]
            }
            Op::NeighborMax { x, argmax } => {
                let c = node.value.cols();
                let mut gx = vec![0.0; val(*x).len()];
                for (o, (&src, &gv)) in argmax.iter().zip(gd).enumerate() {
                    gx[src * c + o % c] += gv;
                }
                vec![(*x, same(*x, gx)?)]
            }
            Op::Concat(parts) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = val(p).cols();
                    let mut gp = Vec::with_capacity(n * w);
                    for r in 0..n {
                        gp.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                    }
                    off += w;
                    out.push((p, same(p, gp)?));
                }
                out
            }
            Op::Slice { x, start } => {
                let c = val(*x).cols();
                let len = node.value.cols();
                let mut gx = vec![0.0; val(*x).len()];
                for r in 0..node.value.rows() {
                    gx[r * c + start..r * c + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                vec![(*x, same(*x, gx)?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::LinComb(terms) => terms
                .iter()
                .map(|&(v, c)| Ok((v, same(v, gd.iter().map(|x| c * x).collect())?)))
                .collect::<Result<_>>()?,
            Op::SpMM(m, h) => {
                let c = val(*h).cols();
                let mut gh = vec![0.0; val(*h).len()];
                for (i, row) in m.entries.iter().enumerate() {
                    let grow = &gd[i * c..(i + 1) * c];
                    for &(j, w) in row {
                        for (o, gv) in gh[j * c..(j + 1) * c].iter_mut().zip(grow) {
                            *o += w * gv;
                        }
                    }
                }
                vec![(*h, same(*h, gh)?)]
            }
            Op::Gram(z) => {
                let (n, d) = (val(*z).shape()[0], val(*z).shape()[1]);
                let mut sym = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        sym[i * n + j] = gd[i * n + j] + gd[j * n + i];
                    }
                }
                let gz = matmul(&sym, n, n, val(*z).data(), d);
                vec![(*z, same(*z, gz)?)]
            }
            Op::Mean(x) => {
                let n = val(*x).len().max(1) as f64;
                vec![(*x, Tensor::filled(val(*x).shape(), gd[0] / n))]
            }
            Op::NllMean { logp, labels } => {
                let c = val(*logp).cols();
                let n = labels.len() as f64;
                let mut gx = vec![0.0; val(*logp).len()];
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * c + l] = -gd[0] / n;
                }
                vec![(*logp, same(*logp, gx)?)]
            }
            Op::L1Mean { x, targets } => {
                let n = targets.len() as f64;
                let gx = val(*x)
                    .data()
                    .iter()
                    .zip(targets.iter())
                    .map(|(a, t)| {
                        let s = if a > t {
                            1.0
                        } else if a < t {
                            -1.0
                        } else {
                            0.0
                        };
                        s * gd[0] / n
                    })
                    .collect();
                vec![(*x, same(*x, gx)?)]
            }
            Op::PairBce {
                logits,
                pairs,
                labels,
            } => {
                let m = val(*logits).cols();
                let n = pairs.len() as f64;
                let ld = val(*logits).data();
                let mut gx = vec![0.0; ld.len()];
                for (&(i, j), &y) in pairs.iter().zip(labels.iter()) {
                    gx[i * m + j] += (sigmoid(ld[i * m + j]) - y) * gd[0] / n;
                }
                vec![(*logits, same(*logits, gx)?)]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                let gs = op.backward(&ins, &node.value, g);
                inputs
                    .iter()
                    .zip(gs)
                    .filter_map(|(&i, gi)| gi.map(|t| (i, t)))
                    .collect()
            }
        })
    }
}

/// Batch-norm statistics policy for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics, running averages updated.
    Train,
    /// Batch statistics, running averages untouched.
    TrainFrozen,
    /// Running statistics.
    Eval,
}

/// A forward pass bound to a parameter store.
pub struct Session<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    bn: BnMode,
    params: HashMap<String, Var>,
    bn_updates: Vec<(String, Tensor)>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, bn: BnMode) -> Self {
        Self {
            g: Graph::new(),
            store,
            bn,
            params: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn bn_mode(&self) -> BnMode {
        self.bn
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for a named parameter; repeated lookups return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let v = self.g.leaf(p.value.clone(), p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `xW (+ b)` with parameters `{prefix}.w` and optional `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = if bias {
            Some(self.param(&format!("{prefix}.b"))?)
        } else {
            None
        };
        self.g.affine(x, w, b)
    }

    /// Batch normalization with parameters `{prefix}.gamma`, `{prefix}.beta`
    /// and running statistics `{prefix}.running_mean`, `{prefix}.running_var`.
    /// `force_batch` uses batch statistics even in [`BnMode::Eval`].
    pub fn batchnorm(&mut self, x: Var, prefix: &str, force_batch: bool) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let rm_name = format!("{prefix}.running_mean");
        let rv_name = format!("{prefix}.running_var");
        let rm = self.store.value(&rm_name)?;
        let rv = self.store.value(&rv_name)?;
        let n = self.g.value(x).rows();
        let use_running = self.bn == BnMode::Eval && !(force_batch && n >= 2);
        if use_running {
            let (y, _, _) = self
                .g
                .batchnorm_raw(x, gamma, beta, Some((rm.data(), rv.data())))?;
            return Ok(y);
        }
        let (y, mean, var) = self.g.batchnorm_raw(x, gamma, beta, None)?;
        if self.bn == BnMode::Train {
            let unbias = n as f64 / (n as f64 - 1.0);
            let new_m: Vec<f64> = rm
                .data()
                .iter()
                .zip(&mean)
                .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
                .collect();
            let new_v: Vec<f64> = rv
                .data()
                .iter()
                .zip(&var)
                .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias)
                .collect();
            let shape = rm.shape().to_vec();
            self.bn_updates
                .push((rm_name, Tensor::new(shape.clone(), new_m)?));
            self.bn_updates.push((rv_name, Tensor::new(shape, new_v)?));
        }
        Ok(y)
    }

    /// Running-stat updates collected during the forward pass.
    pub fn take_bn_updates(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Backward from `loss`, returning gradients keyed by parameter name.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let grads = self.g.backward(loss)?;
        let mut out = Gradients::new();
        for (name, v) in &self.params {
            if !self.g.nodes[v.0].requires_grad {
                continue;
            }
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.g.value(*v).shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

/// Registers `{prefix}.gamma/beta/running_mean/running_var` for `c` channels.
pub fn insert_batchnorm(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), Tensor::filled(&[c], 1.0), true)?;
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[c]), true)?;
    store.insert(
        &format!("{prefix}.running_mean"),
        Tensor::zeros(&[c]),
        false,
    )?;
    store.insert(
        &format!("{prefix}.running_var"),
        Tensor::filled(&[c], 1.0),
        false,
    )?;
    Ok(())
}

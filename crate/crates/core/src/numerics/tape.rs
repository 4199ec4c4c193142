//! Reverse-mode differentiation over a flat tape of matrix operations.
//!
//! Every value on the tape is a `rows × cols` matrix. Parameters are bound by
//! reference, so building a tape never copies model weights; gradients for a
//! bound parameter are read back with [`Tape::grad_of`].

use std::borrow::Cow;
use std::collections::HashMap;

use super::tensor::{dot, log_sum_exp, matmul_into, matmul_nt_into, matmul_tn_into, row_stats, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Mask(Var, Vec<f64>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    grad: Vec<f64>,
    tracked: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    bound: HashMap<usize, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [f64]>, tracked: bool, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            grad: Vec::new(),
            tracked,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a tensor by reference. Binding the same tensor twice returns the same variable.
    pub fn bind(&mut self, t: &'a Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let (r, c) = t.rows_cols();
        let v = self.push(r, c, Cow::Borrowed(t.data()), t.requires_grad, Op::Leaf);
        self.bound.insert(key, v);
        v
    }

    /// Owned input; tracked only when `requires_grad`.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let (r, c) = t.rows_cols();
        self.push(r, c, Cow::Owned(t.into_data()), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.value.to_vec()).expect("tape nodes are non-empty")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let g = &self.nodes[v.0].grad;
        (!g.is_empty()).then_some(g.as_slice())
    }

    pub fn grad_of(&self, t: &Tensor) -> Option<&[f64]> {
        let key = t as *const Tensor as usize;
        self.bound.get(&key).and_then(|&v| self.grad(v))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dims("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(m, n, Cow::Owned(out), tr, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dims("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a), self.value(b), &mut out, m, k, n);
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(m, n, Cow::Owned(out), tr, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            let (da, db) = (self.dims(a), self.dims(b));
            return Err(Error::dims("add", &[da.0, da.1], &[db.0, db.1]));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.dims(a);
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(r, c, Cow::Owned(out), tr, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let (r, c) = self.dims(a);
        let tr = self.tracked(a);
        self.push(r, c, Cow::Owned(out), tr, Op::Scale(a, s))
    }

    /// Elementwise product with a fixed mask (used for dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Var {
        assert_eq!(mask.len(), self.value(a).len(), "mask size");
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let (r, c) = self.dims(a);
        let tr = self.tracked(a);
        self.push(r, c, Cow::Owned(out), tr, Op::Mask(a, mask))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
            .collect();
        let (r, c) = self.dims(a);
        let tr = self.tracked(a);
        self.push(r, c, Cow::Owned(out), tr, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::dims("layer_norm", &[rows, cols], &[self.value(gain).len()]));
        }
        let mut out = vec![0.0; rows * cols];
        let mut stats = Vec::with_capacity(rows);
        {
            let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
            for (row, o) in xv.chunks(cols).zip(out.chunks_mut(cols)) {
                let (mean, rstd) = row_stats(row);
                for j in 0..cols {
                    o[j] = (row[j] - mean) * rstd * g[j] + b[j];
                }
                stats.push((mean, rstd));
            }
        }
        let tr = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(rows, cols, Cow::Owned(out), tr, Op::LayerNorm { x, gain, bias, stats }))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Argument(format!("row {bad} out of range 0..{rows}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let tr = self.tracked(table);
        Ok(self.push(
            ids.len(),
            cols,
            Cow::Owned(out),
            tr,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention on already projected `q`, `k`, `v`.
    /// With `causal`, query `i` only attends to keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (tq, d) = self.dims(q);
        let (tk, dk) = self.dims(k);
        if dk != d || self.dims(v) != (tk, d) || heads == 0 || d % heads != 0 {
            return Err(Error::dims("attention", &[tq, d], &[tk, dk]));
        }
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                    let qi = &qv[i * d + off..i * d + off + dh];
                    let lim = if causal { (i + 1).min(tk) } else { tk };
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..lim {
                        let s = dot(qi, &kv[j * d + off..j * d + off + dh]) * inv;
                        p[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for pj in p[..lim].iter_mut() {
                        *pj = (*pj - max).exp();
                        sum += *pj;
                    }
                    let o = &mut out[i * d + off..i * d + off + dh];
                    for j in 0..lim {
                        p[j] /= sum;
                        let vj = &vv[j * d + off..j * d + off + dh];
                        for (oo, x) in o.iter_mut().zip(vj) {
                            *oo += p[j] * x;
                        }
                    }
                }
            }
        }
        let tr = self.tracked(q) || self.tracked(k) || self.tracked(v);
        Ok(self.push(tq, d, Cow::Owned(out), tr, Op::Attention { q, k, v, heads, probs }))
    }

    /// Mean token-level negative log-likelihood; a 1×1 result.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(logits);
        if rows != targets.len() {
            return Err(Error::dims("cross_entropy", &[rows, cols], &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Argument(format!("target class {t} out of range 0..{cols}")));
        }
        let lv = self.value(logits);
        if lv.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for ((row, p), &t) in lv.chunks(cols).zip(probs.chunks_mut(cols)).zip(targets) {
            let lse = log_sum_exp(row);
            total += lse - row[t];
            for (pp, x) in p.iter_mut().zip(row) {
                *pp = (x - lse).exp();
            }
        }
        let tr = self.tracked(logits);
        Ok(self.push(
            1,
            1,
            Cow::Owned(vec![total / rows as f64]),
            tr,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let tr = self.tracked(a);
        self.push(1, 1, Cow::Owned(vec![s]), tr, Op::Sum(a))
    }

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.tracked {
            return;
        }
        if node.grad.is_empty() {
            node.grad = contrib.to_vec();
        } else {
            for (g, c) in node.grad.iter_mut().zip(contrib) {
                *g += c;
            }
        }
    }

    /// Back-propagates from a scalar `loss` (seed gradient 1).
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.dims(loss), (1, 1), "backward needs a scalar");
        if !self.tracked(loss) {
            return;
        }
        self.nodes[loss.0].grad = vec![1.0];
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked || self.nodes[i].grad.is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.nodes[i].grad);
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = g;
        }
    }

    fn backward_op(&mut self, i: usize, op: &Op, g: &[f64]) {
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(g, self.value(*b), &mut da, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(self.value(*a), g, &mut db, m, k, n);
                    self.accumulate(*b, &db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, self.value(*b), &mut da, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; n * k];
                    matmul_tn_into(g, self.value(*a), &mut db, m, n, k);
                    self.accumulate(*b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = g.iter().map(|x| x * s).collect();
                self.accumulate(*a, &d);
            }
            Op::Mask(a, m) => {
                let d: Vec<f64> = g.iter().zip(m).map(|(x, y)| x * y).collect();
                self.accumulate(*a, &d);
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = self
                    .value(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                self.accumulate(*a, &d);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let n = cols as f64;
                let mut dx = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                {
                    let (xv, gv) = (self.value(*x), self.value(*gain));
                    let mut xhat = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        let row = &xv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            xhat[j] = (row[j] - mean) * rstd;
                            dxhat[j] = gr[j] * gv[j];
                            dg[j] += gr[j] * xhat[j];
                            db[j] += gr[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / n;
                        let m2 = dot(&dxhat, &xhat) / n;
                        for j in 0..cols {
                            dx[r * cols + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dg);
                self.accumulate(*bias, &db);
            }
            Op::Gather { table, ids } => {
                if self.tracked(*table) {
                    let (tr, tc) = self.dims(*table);
                    let mut dt = vec![0.0; tr * tc];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..tc {
                            dt[id * tc + j] += g[r * tc + j];
                        }
                    }
                    self.accumulate(*table, &dt);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (tq, d) = (rows, cols);
                let tk = self.dims(*k).0;
                let dh = d / heads;
                let inv = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; tq * d];
                let mut dk = vec![0.0; tk * d];
                let mut dv = vec![0.0; tk * d];
                {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dp = vec![0.0; tk];
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..tq {
                            let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                            let go = &g[i * d + off..i * d + off + dh];
                            let mut acc = 0.0;
                            for j in 0..tk {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vv[j * d + off..j * d + off + dh];
                                dp[j] = dot(go, vj);
                                acc += dp[j] * p[j];
                                let dvj = &mut dv[j * d + off..j * d + off + dh];
                                for (x, y) in dvj.iter_mut().zip(go) {
                                    *x += p[j] * y;
                                }
                            }
                            let qi = &qv[i * d + off..i * d + off + dh];
                            for j in 0..tk {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - acc) * inv;
                                let kj = &kv[j * d + off..j * d + off + dh];
                                let dqi = &mut dq[i * d + off..i * d + off + dh];
                                for (x, y) in dqi.iter_mut().zip(kj) {
                                    *x += ds * y;
                                }
                                let dkj = &mut dk[j * d + off..j * d + off + dh];
                                for (x, y) in dkj.iter_mut().zip(qi) {
                                    *x += ds * y;
                                }
                            }
                        }
                    }
                }
                self.accumulate(*q, &dq);
                self.accumulate(*k, &dk);
                self.accumulate(*v, &dv);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (r, c) = self.dims(*logits);
                let s = g[0] / r as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (row, &t) in targets.iter().enumerate() {
                    dl[row * c + t] -= s;
                }
                self.accumulate(*logits, &dl);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(*a, &vec![g[0]; n]);
            }
        }
    }
}

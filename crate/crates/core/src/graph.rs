//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! Every op computes each output row from the corresponding input rows (or,
//! for causal attention, from rows at or before it) in a fixed order. A row's
//! value therefore does not depend on how many other rows share the batch,
//! which is what lets sampling reproduce teacher-forced values bit for bit.

use std::collections::HashMap;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gather {
        src: Var,
        idx: Vec<Option<usize>>,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    BlockCausal {
        x: Var,
        w: Var,
        block: usize,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        // per head, packed lower-triangular softmax rows
        probs: Vec<Vec<f64>>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    WeightedNll {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

#[inline]
fn tri(t: usize) -> usize {
    t * (t + 1) / 2
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().expect("node value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row");
        let mut out = self.value(x).clone();
        assert_eq!(out.cols(), b.cols(), "bias width");
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, bias))
    }

    /// `x * w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= s;
        }
        self.push(out, Op::Scale(x, s))
    }

    /// Row `i` of the output is row `idx[i]` of `src`, or zeros for `None`.
    pub fn gather(&mut self, src: Var, idx: Vec<Option<usize>>) -> Var {
        let s = self.value(src);
        let mut out = Tensor::zeros(idx.len(), s.cols());
        for (i, j) in idx.iter().enumerate() {
            if let Some(j) = *j {
                out.row_mut(i).copy_from_slice(s.row(j));
            }
        }
        self.push(out, Op::Gather { src, idx })
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        self.gather(src, idx.iter().copied().map(Some).collect())
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(x).clone().reshaped(rows, cols);
        self.push(out, Op::Reshape(x))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat width");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts))
    }

    /// Strictly causal mixing inside blocks: `x` rows hold `block` slot
    /// vectors of width `d = cols / block`; output slot `j` is
    /// `sum_{k<j} x_k * W[k, j]` using the `d x d` sub-block of `w`.
    /// Sub-blocks with `k >= j` are never read.
    pub fn block_causal(&mut self, x: Var, w: Var, block: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cols) = xv.shape();
        assert_eq!(cols % block, 0, "block width");
        let d = cols / block;
        assert_eq!(wv.shape(), (cols, cols), "block weight shape");
        let mut out = Tensor::zeros(n, cols);
        for r in 0..n {
            let xr = xv.row(r);
            let orow = out.row_mut(r);
            for j in 1..block {
                let oj = &mut orow[j * d..(j + 1) * d];
                for k in 0..j {
                    for (i, &xi) in xr[k * d..(k + 1) * d].iter().enumerate() {
                        let wrow = &wv.row(k * d + i)[j * d..(j + 1) * d];
                        for (o, wv) in oj.iter_mut().zip(wrow) {
                            *o += xi * wv;
                        }
                    }
                }
            }
        }
        self.push(out, Op::BlockCausal { x, w, block })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let t = (GELU_C * (*v + 0.044715 * *v * *v * *v)).tanh();
            *v = 0.5 * *v * (1.0 + t);
        }
        self.push(out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let (n, d) = xv.shape();
        let mut xhat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let o = out.row_mut(r);
            for i in 0..d {
                o[i] = xhat.get(r, i) * g.data()[i] + b.data()[i];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head causal self-attention on packed `[Q | K | V]` rows.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Var {
        let qv = self.value(qkv);
        let (n, cols) = qv.shape();
        assert_eq!(cols % 3, 0, "qkv width");
        let d = cols / 3;
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut p = vec![0.0; tri(n)];
            for t in 0..n {
                let q = &qv.row(t)[h * dh..(h + 1) * dh];
                let pt = &mut p[tri(t)..tri(t) + t + 1];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in pt.iter_mut().enumerate() {
                    let k = &qv.row(j)[d + h * dh..d + (h + 1) * dh];
                    *s = dot(q, k) * scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in pt.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in pt.iter_mut() {
                    *s /= sum;
                }
                let o = &mut out.row_mut(t)[h * dh..(h + 1) * dh];
                for (j, &pj) in pt.iter().enumerate() {
                    let v = &qv.row(j)[2 * d + h * dh..2 * d + (h + 1) * dh];
                    for (oi, vi) in o.iter_mut().zip(v) {
                        *oi += pj * vi;
                    }
                }
            }
            probs.push(p);
        }
        self.push(out, Op::Attention { qkv, heads, probs })
    }

    /// Multiplies elementwise by a precomputed mask (already scaled by `1/keep`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.data().len(), mask.len(), "dropout mask length");
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    /// `(1/n) * sum_i w_i * -ln softmax(logits_i)[target_i]` as a `1 x 1` value.
    pub fn weighted_nll(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Var {
        let lv = self.value(logits);
        let (n, c) = lv.shape();
        assert_eq!(targets.len(), n, "targets length");
        assert_eq!(weights.len(), n, "weights length");
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for i in 0..n {
            assert!(targets[i] < c, "target out of range");
            loss += weights[i] * -log_softmax_at(lv.row(i), targets[i]);
        }
        if n > 0 {
            loss /= n as f64;
        }
        self.push(
            Tensor::scalar(loss),
            Op::WeightedNll {
                logits,
                targets,
                weights,
                probs,
            },
        )
    }

    /// Back-propagates from a scalar output and returns parameter gradients.
    pub fn backward(&self, output: Var) -> Grads {
        let mut grads = self.params.zeros_like();
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let out_shape = self.shape(output);
        assert_eq!(out_shape, (1, 1), "backward needs a scalar output");
        adj[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddBias(x, bias) => {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut adj, *bias, gb);
                    acc(&mut adj, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Scale(x, s) => {
                    let mut gx = g;
                    for v in gx.data_mut() {
                        *v *= s;
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::Gather { src, idx } => {
                    let (rows, cols) = self.shape(*src);
                    let mut gs = Tensor::zeros(rows, cols);
                    for (r, j) in idx.iter().enumerate() {
                        if let Some(j) = *j {
                            for (o, v) in gs.row_mut(j).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                    acc(&mut adj, *src, gs);
                }
                Op::Reshape(x) => {
                    let (r, c) = self.shape(*x);
                    acc(&mut adj, *x, g.reshaped(r, c));
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let part = Tensor::from_vec(r, c, g.data()[start * c..(start + r) * c].to_vec());
                        start += r;
                        acc(&mut adj, p, part);
                    }
                }
                Op::BlockCausal { x, w, block } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, cols) = xv.shape();
                    let d = cols / block;
                    let mut gx = Tensor::zeros(n, cols);
                    let mut gw = Tensor::zeros(cols, cols);
                    for r in 0..n {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        for j in 1..*block {
                            let gj = &gr[j * d..(j + 1) * d];
                            for k in 0..j {
                                for i in 0..d {
                                    let wrow = &wv.row(k * d + i)[j * d..(j + 1) * d];
                                    gx.row_mut(r)[k * d + i] += dot(gj, wrow);
                                    let xi = xr[k * d + i];
                                    if xi != 0.0 {
                                        let gwrow = &mut gw.row_mut(k * d + i)[j * d..(j + 1) * d];
                                        for (o, v) in gwrow.iter_mut().zip(gj) {
                                            *o += xi * v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut adj, *x, gx);
                    acc(&mut adj, *w, gw);
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    for (gv, &v) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let (n, d) = xhat.shape();
                    let mut gx = Tensor::zeros(n, d);
                    let mut gg = Tensor::zeros(1, d);
                    let mut gb = Tensor::zeros(1, d);
                    for r in 0..n {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut dxhat = vec![0.0; d];
                        for i in 0..d {
                            gg.data_mut()[i] += gr[i] * xh[i];
                            gb.data_mut()[i] += gr[i];
                            dxhat[i] = gr[i] * gv.data()[i];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxhat, xh) / d as f64;
                        for (i, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[i] - m1 - xh[i] * m2);
                        }
                    }
                    acc(&mut adj, *x, gx);
                    acc(&mut adj, *gamma, gg);
                    acc(&mut adj, *beta, gb);
                }
                Op::Attention { qkv, heads, probs } => {
                    let qv = self.value(*qkv);
                    let (n, cols) = qv.shape();
                    let d = cols / 3;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Tensor::zeros(n, cols);
                    for (h, p) in probs.iter().enumerate() {
                        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                        for t in 0..n {
                            let go = &g.row(t)[h * dh..(h + 1) * dh];
                            let pt = &p[tri(t)..tri(t) + t + 1];
                            let dp: Vec<f64> = (0..=t).map(|j| dot(go, &qv.row(j)[vo..vo + dh])).collect();
                            let inner = dot(pt, &dp);
                            for j in 0..=t {
                                // dV_j += P_tj * dO_t
                                for i in 0..dh {
                                    gq.row_mut(j)[vo + i] += pt[j] * go[i];
                                }
                                let ds = pt[j] * (dp[j] - inner) * scale;
                                for i in 0..dh {
                                    let kji = qv.get(j, ko + i);
                                    let qti = qv.get(t, qo + i);
                                    gq.row_mut(t)[qo + i] += ds * kji;
                                    gq.row_mut(j)[ko + i] += ds * qti;
                                }
                            }
                        }
                    }
                    acc(&mut adj, *qkv, gq);
                }
                Op::Dropout { x, mask } => {
                    let mut gx = g;
                    for (v, m) in gx.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::WeightedNll {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let upstream = g.item();
                    let (n, c) = probs.shape();
                    let mut gl = Tensor::zeros(n, c);
                    for r in 0..n {
                        let coef = upstream * weights[r] / n as f64;
                        for (k, o) in gl.row_mut(r).iter_mut().enumerate() {
                            let y = if k == targets[r] { 1.0 } else { 0.0 };
                            *o = coef * (probs.get(r, k) - y);
                        }
                    }
                    acc(&mut adj, *logits, gl);
                }
            }
        }
        grads
    }
}

fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[k] - lse
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    for r in 0..t.rows() {
        out.row_mut(r).copy_from_slice(&softmax(t.row(r)));
    }
    out
}

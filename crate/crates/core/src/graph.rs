//! A small reverse-mode autodiff tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over node ids is
//! a valid topological order for back-propagation. Parameter nodes borrow
//! their values from a [`ParamStore`]; their gradients land in a
//! [`Gradients`] buffer of the same layout.

use crate::counters;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{dot, matmul_acc, matmul_t_acc, t_matmul_acc, Matrix};

/// Guard on cosine denominators.
pub const COSINE_EPS: f64 = 1e-8;
/// Value written into top-K slots that have no score behind them.
pub const TOPK_PAD: f64 = -1.0;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Deliberate backward-pass defects, used to prove the gradient checker notices them.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the recurrent-weight gradient of the GRU by 1.5.
    GruRecurrentGrad,
}

#[derive(Debug)]
struct GruCache {
    z: Matrix,
    r: Matrix,
    n: Matrix,
    hn: Matrix,
}

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Embed {
        table: ParamId,
        ids: Vec<usize>,
    },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<Matrix>,
    },
    Gru {
        x: NodeId,
        wx: NodeId,
        uh: NodeId,
        b: NodeId,
        cache: GruCache,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    GroupMean {
        x: NodeId,
        groups: Vec<Vec<usize>>,
    },
    Cosine {
        a: NodeId,
        b: NodeId,
        inv_na: Vec<f64>,
        inv_nb: Vec<f64>,
        a_active: Vec<bool>,
        b_active: Vec<bool>,
    },
    Flatten(Vec<NodeId>),
    TopK {
        x: NodeId,
        selected: Vec<Option<usize>>,
    },
    Listwise {
        f: NodeId,
        target: Vec<f64>,
        pred: Vec<f64>,
    },
    Sum(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    value: Option<Matrix>,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    faults: Vec<Fault>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            faults: Vec::new(),
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.faults.push(fault);
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "scalar() on non-scalar node");
        v[(0, 0)]
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value: Some(value), op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Row lookup into an embedding table parameter. Ids must be in range.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> NodeId {
        let value = self.store.get(table).select_rows(ids);
        self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// `x + 1·bias` where `bias` is a single row.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        let mut value = self.value(x).clone();
        assert_eq!(value.cols(), b.cols(), "bias width mismatch");
        for i in 0..value.rows() {
            for (o, bj) in value.row_mut(i).iter_mut().zip(b.as_slice()) {
                *o += bj;
            }
        }
        self.push(value, Op::AddRowBias(x, bias))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w);
        self.add_row_bias(xw, b)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: ParamId, bias: ParamId) -> NodeId {
        let gain = self.param(gain);
        let bias = self.param(bias);
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let g = self.value(gain).as_slice();
        let b = self.value(bias).as_slice();
        let mut value = xhat.clone();
        for i in 0..rows {
            for ((o, gj), bj) in value.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gj + bj;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product self-attention core: `softmax(QKᵀ/√d_h)V`
    /// per head, heads concatenated along columns.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert_eq!(kv.shape(), (n, d));
        assert_eq!(vv.shape(), (n, d));
        assert!(heads >= 1 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &qv.row(i)[cols.clone()];
                let prow = p.row_mut(i);
                for (j, pij) in prow.iter_mut().enumerate() {
                    *pij = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                }
                softmax_in_place(prow);
            }
            for i in 0..n {
                let mut acc = vec![0.0; dh];
                for j in 0..n {
                    let pij = p[(i, j)];
                    for (a, vj) in acc.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *a += pij * vj;
                    }
                }
                out.row_mut(i)[cols.clone()].copy_from_slice(&acc);
            }
            counters::add_attention(2 * (n * n * dh) as u64);
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// Single-direction GRU over the rows of `x`, zero initial state. Gate
    /// blocks in `wx`, `uh`, `b` are ordered update, reset, candidate.
    pub fn gru(&mut self, x: NodeId, wx: ParamId, uh: ParamId, b: ParamId) -> NodeId {
        let wx = self.param(wx);
        let uh = self.param(uh);
        let b = self.param(b);
        let (xv, wxv, uhv, bv) = (self.value(x), self.value(wx), self.value(uh), self.value(b));
        let l = xv.rows();
        let d = uhv.rows();
        assert_eq!(uhv.cols(), 3 * d, "recurrent weight must be d x 3d");
        assert_eq!(wxv.shape(), (xv.cols(), 3 * d), "input weight shape mismatch");
        let mut gx = Matrix::zeros(l, 3 * d);
        matmul_acc(xv, wxv, &mut gx);
        let mut cache = GruCache {
            z: Matrix::zeros(l, d),
            r: Matrix::zeros(l, d),
            n: Matrix::zeros(l, d),
            hn: Matrix::zeros(l, d),
        };
        let mut out = Matrix::zeros(l, d);
        let mut h = Matrix::zeros(1, d);
        for t in 0..l {
            let mut gh = Matrix::zeros(1, 3 * d);
            matmul_acc(&h, uhv, &mut gh);
            let gxt = gx.row(t);
            let ght = gh.row(0);
            let bs = bv.as_slice();
            for j in 0..d {
                let z = sigmoid(gxt[j] + ght[j] + bs[j]);
                let r = sigmoid(gxt[d + j] + ght[d + j] + bs[d + j]);
                let hn = ght[2 * d + j];
                let n = (gxt[2 * d + j] + r * hn + bs[2 * d + j]).tanh();
                let hprev = h[(0, j)];
                out[(t, j)] = (1.0 - z) * n + z * hprev;
                cache.z[(t, j)] = z;
                cache.r[(t, j)] = r;
                cache.n[(t, j)] = n;
                cache.hn[(t, j)] = hn;
            }
            h.row_mut(0).copy_from_slice(out.row(t));
        }
        self.push(out, Op::Gru { x, wx, uh, b, cache })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId], cols: usize) -> NodeId {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats, cols);
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let idx: Vec<usize> = (start..start + len).collect();
        let value = self.value(x).select_rows(&idx);
        self.push(value, Op::SliceRows { x, start })
    }

    /// Row `c` of the output is the mean of the rows of `x` listed in
    /// `groups[c]`. Singleton groups act as a row gather.
    pub fn group_mean(&mut self, x: NodeId, groups: Vec<Vec<usize>>) -> NodeId {
        let value = self.value(x).group_mean(&groups);
        self.push(value, Op::GroupMean { x, groups })
    }

    /// Row-wise cosine similarity `S[i][j] = <a_i, b_j> / (max(|a_i|,ε) max(|b_j|,ε))`.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (value, inv_na, inv_nb, a_active, b_active) = cosine_forward(av, bv);
        self.push(
            value,
            Op::Cosine {
                a,
                b,
                inv_na,
                inv_nb,
                a_active,
                b_active,
            },
        )
    }

    /// Row-major flattening of every part, concatenated into one row.
    pub fn flatten(&mut self, parts: &[NodeId]) -> NodeId {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).as_slice());
        }
        let value = Matrix::from_vec(1, data.len(), data);
        self.push(value, Op::Flatten(parts.to_vec()))
    }

    /// Gathers the flat entries listed in `selected` into one row; `None`
    /// slots hold [`TOPK_PAD`] and receive no gradient.
    pub fn select_flat(&mut self, x: NodeId, selected: Vec<Option<usize>>) -> NodeId {
        let xs = self.value(x).as_slice();
        let data = selected
            .iter()
            .map(|s| s.map_or(TOPK_PAD, |i| xs[i]))
            .collect::<Vec<_>>();
        let value = Matrix::from_vec(1, data.len(), data);
        self.push(value, Op::TopK { x, selected })
    }

    /// Listwise cross-entropy between `softmax(target)` and `softmax(f)`.
    pub fn listwise_loss(&mut self, f: NodeId, target: &[f64]) -> NodeId {
        let fv = self.value(f).as_slice();
        assert_eq!(fv.len(), target.len(), "prediction/label length mismatch");
        let (loss, pred, target_dist) = listwise_forward(fv, target);
        self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::Listwise {
                f,
                target: target_dist,
                pred,
            },
        )
    }

    pub fn sum(&mut self, parts: &[NodeId]) -> NodeId {
        let mut value = Matrix::zeros(1, 1);
        for &p in parts {
            value.add_assign(self.value(p));
        }
        self.push(value, Op::Sum(parts.to_vec()))
    }

    /// Back-propagates `seed` (same shape as `output`) and accumulates
    /// parameter gradients into `grads`.
    pub fn backward_with(&self, output: NodeId, seed: Matrix, grads: &mut Gradients) {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape mismatch");
        let mut g: Vec<Option<Matrix>> = (0..=output.0).map(|_| None).collect();
        g[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let Some(gout) = g[id].take() else { continue };
            self.backprop_node(id, &gout, &mut g, grads);
        }
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, output: NodeId, grads: &mut Gradients) {
        self.backward_with(output, Matrix::filled(1, 1, 1.0), grads);
    }

    fn backprop_node(&self, id: usize, gout: &Matrix, g: &mut [Option<Matrix>], grads: &mut Gradients) {
        let acc = |g: &mut [Option<Matrix>], target: NodeId, delta: Matrix| match &mut g[target.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &self.nodes[id].op {
            Op::Const => {}
            Op::Param(p) => grads.accumulate(*p, gout),
            Op::Embed { table, ids } => {
                let t = self.store.get(*table);
                let tg = grads.entry(*table, t.rows(), t.cols());
                for (r, &tok) in ids.iter().enumerate() {
                    for (o, v) in tg.row_mut(tok).iter_mut().zip(gout.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                matmul_t_acc(gout, bv, &mut ga);
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                t_matmul_acc(av, gout, &mut gb);
                acc(g, *a, ga);
                acc(g, *b, gb);
            }
            Op::Add(a, b) => {
                acc(g, *a, gout.clone());
                acc(g, *b, gout.clone());
            }
            Op::AddRowBias(x, bias) => {
                let mut gb = Matrix::zeros(1, gout.cols());
                for row in gout.row_iter() {
                    for (o, v) in gb.row_mut(0).iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(g, *x, gout.clone());
                acc(g, *bias, gb);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut gx = gout.clone();
                for (o, &xi) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    *o *= gelu_grad(xi);
                }
                acc(g, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[id].value.as_ref().expect("sigmoid value");
                let mut gx = gout.clone();
                for (o, &s) in gx.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *o *= s * (1.0 - s);
                }
                acc(g, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).as_slice();
                let (rows, cols) = xhat.shape();
                let mut gg = Matrix::zeros(1, cols);
                let mut gbias = Matrix::zeros(1, cols);
                let mut gx = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    let dy = gout.row(i);
                    let xh = xhat.row(i);
                    let dxhat: Vec<f64> = dy.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        gx[(i, j)] = rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        gg[(0, j)] += dy[j] * xh[j];
                        gbias[(0, j)] += dy[j];
                    }
                }
                acc(g, *x, gx);
                acc(g, *gain, gg);
                acc(g, *bias, gbias);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.shape();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Matrix::zeros(n, d);
                let mut gk = Matrix::zeros(n, d);
                let mut gvv = Matrix::zeros(n, d);
                for (h, p) in probs.iter().enumerate() {
                    let cols = h * dh..(h + 1) * dh;
                    // dP = dO · V_hᵀ, dV_h = Pᵀ · dO
                    let mut dp = Matrix::zeros(n, n);
                    for i in 0..n {
                        let go = &gout.row(i)[cols.clone()];
                        for j in 0..n {
                            dp[(i, j)] = dot(go, &vv.row(j)[cols.clone()]);
                            let pij = p[(i, j)];
                            for (o, gi) in gvv.row_mut(j)[cols.clone()].iter_mut().zip(go) {
                                *o += pij * gi;
                            }
                        }
                    }
                    // softmax backward, then the 1/√d_h scale
                    for i in 0..n {
                        let s: f64 = (0..n).map(|j| dp[(i, j)] * p[(i, j)]).sum();
                        for j in 0..n {
                            dp[(i, j)] = p[(i, j)] * (dp[(i, j)] - s) * scale;
                        }
                    }
                    for i in 0..n {
                        for j in 0..n {
                            let ds = dp[(i, j)];
                            if ds == 0.0 {
                                continue;
                            }
                            for (o, kj) in gq.row_mut(i)[cols.clone()].iter_mut().zip(&kv.row(j)[cols.clone()]) {
                                *o += ds * kj;
                            }
                            for (o, qi) in gk.row_mut(j)[cols.clone()].iter_mut().zip(&qv.row(i)[cols.clone()]) {
                                *o += ds * qi;
                            }
                        }
                    }
                }
                acc(g, *q, gq);
                acc(g, *k, gk);
                acc(g, *v, gvv);
            }
            Op::Gru { x, wx, uh, b, cache } => {
                let out = self.nodes[id].value.as_ref().expect("gru value");
                let (xv, wxv, uhv) = (self.value(*x), self.value(*wx), self.value(*uh));
                let (l, d) = out.shape();
                let mut gwx = Matrix::zeros(wxv.rows(), wxv.cols());
                let mut guh = Matrix::zeros(uhv.rows(), uhv.cols());
                let mut gb = Matrix::zeros(1, 3 * d);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                let mut dh_next = vec![0.0; d];
                for t in (0..l).rev() {
                    let mut dgx = Matrix::zeros(1, 3 * d);
                    let mut dgh = Matrix::zeros(1, 3 * d);
                    let mut dh_prev = vec![0.0; d];
                    for j in 0..d {
                        let dh = gout[(t, j)] + dh_next[j];
                        let z = cache.z[(t, j)];
                        let r = cache.r[(t, j)];
                        let nn = cache.n[(t, j)];
                        let hn = cache.hn[(t, j)];
                        let hprev = if t == 0 { 0.0 } else { out[(t - 1, j)] };
                        let dn = dh * (1.0 - z);
                        let dz = dh * (hprev - nn);
                        dh_prev[j] = dh * z;
                        let dn_pre = dn * (1.0 - nn * nn);
                        let dr = dn_pre * hn;
                        let dz_pre = dz * z * (1.0 - z);
                        let dr_pre = dr * r * (1.0 - r);
                        dgx[(0, j)] = dz_pre;
                        dgx[(0, d + j)] = dr_pre;
                        dgx[(0, 2 * d + j)] = dn_pre;
                        dgh[(0, j)] = dz_pre;
                        dgh[(0, d + j)] = dr_pre;
                        dgh[(0, 2 * d + j)] = dn_pre * r;
                    }
                    gb.add_assign(&dgx);
                    let xt = Matrix::row_vector(xv.row(t));
                    t_matmul_acc(&xt, &dgx, &mut gwx);
                    let mut gxt = Matrix::zeros(1, xv.cols());
                    matmul_t_acc(&dgx, wxv, &mut gxt);
                    gx.row_mut(t).copy_from_slice(gxt.row(0));
                    if t > 0 {
                        let hprev = Matrix::row_vector(out.row(t - 1));
                        t_matmul_acc(&hprev, &dgh, &mut guh);
                        let mut back = Matrix::from_vec(1, d, dh_prev);
                        matmul_t_acc(&dgh, uhv, &mut back);
                        dh_next = back.into_vec();
                    } else {
                        dh_next = dh_prev;
                    }
                }
                if self.faults.contains(&Fault::GruRecurrentGrad) {
                    guh = guh.scale(1.5);
                }
                acc(g, *x, gx);
                acc(g, *wx, gwx);
                acc(g, *uh, guh);
                acc(g, *b, gb);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let idx: Vec<usize> = (start..start + rows).collect();
                    acc(g, p, gout.select_rows(&idx));
                    start += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..gout.rows() {
                    gx.row_mut(start + i).copy_from_slice(gout.row(i));
                }
                acc(g, *x, gx);
            }
            Op::GroupMean { x, groups } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for (c, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.len() as f64;
                    for &i in grp {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(gout.row(c)) {
                            *o += v * inv;
                        }
                    }
                }
                acc(g, *x, gx);
            }
            Op::Cosine {
                a,
                b,
                inv_na,
                inv_nb,
                a_active,
                b_active,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let s = self.nodes[id].value.as_ref().expect("cosine value");
                let (m, n) = s.shape();
                let d = av.cols();
                let mut ga = Matrix::zeros(m, d);
                let mut gb = Matrix::zeros(n, d);
                for i in 0..m {
                    for j in 0..n {
                        let gij = gout[(i, j)];
                        if gij == 0.0 {
                            continue;
                        }
                        let w = gij * inv_na[i] * inv_nb[j];
                        let sij = s[(i, j)];
                        let (ai, bj) = (av.row(i), bv.row(j));
                        let ca = if a_active[i] {
                            gij * sij * inv_na[i] * inv_na[i]
                        } else {
                            0.0
                        };
                        let cb = if b_active[j] {
                            gij * sij * inv_nb[j] * inv_nb[j]
                        } else {
                            0.0
                        };
                        for t in 0..d {
                            ga[(i, t)] += w * bj[t] - ca * ai[t];
                            gb[(j, t)] += w * ai[t] - cb * bj[t];
                        }
                    }
                }
                acc(g, *a, ga);
                acc(g, *b, gb);
            }
            Op::Flatten(parts) => {
                let flat = gout.as_slice();
                let mut start = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    let len = r * c;
                    acc(g, p, Matrix::from_vec(r, c, flat[start..start + len].to_vec()));
                    start += len;
                }
            }
            Op::TopK { x, selected } => {
                let (r, c) = self.value(*x).shape();
                let mut gx = Matrix::zeros(r, c);
                for (slot, sel) in selected.iter().enumerate() {
                    if let Some(i) = sel {
                        gx.as_mut_slice()[*i] += gout.as_slice()[slot];
                    }
                }
                acc(g, *x, gx);
            }
            Op::Listwise { f, target, pred } => {
                let gl = gout[(0, 0)];
                let (r, c) = self.value(*f).shape();
                let data = pred.iter().zip(target).map(|(p, t)| gl * (p - t)).collect();
                acc(g, *f, Matrix::from_vec(r, c, data));
            }
            Op::Sum(parts) => {
                for &p in parts {
                    acc(g, p, gout.clone());
                }
            }
        }
    }
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Returns `(loss, softmax(f), softmax(y))`.
pub(crate) fn listwise_forward(f: &[f64], y: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut pred = f.to_vec();
    softmax_in_place(&mut pred);
    let mut target = y.to_vec();
    softmax_in_place(&mut target);
    let lse = log_sum_exp(f);
    let loss = target.iter().zip(f).map(|(t, fi)| -t * (fi - lse)).sum();
    (loss, pred, target)
}

type CosineParts = (Matrix, Vec<f64>, Vec<f64>, Vec<bool>, Vec<bool>);

pub(crate) fn cosine_forward(a: &Matrix, b: &Matrix) -> CosineParts {
    assert_eq!(a.cols(), b.cols(), "cosine operands differ in width");
    // Squared norms, clamped at eps^2. The denominator is sqrt(sa * sb), which
    // is exact for identical rows, so self-similarity comes out as exactly 1.
    let sq = |m: &Matrix| -> (Vec<f64>, Vec<bool>) {
        m.row_iter()
            .map(|r| {
                let n2 = dot(r, r);
                if n2.sqrt() > COSINE_EPS {
                    (n2, true)
                } else {
                    (COSINE_EPS * COSINE_EPS, false)
                }
            })
            .unzip()
    };
    let (sa, a_active) = sq(a);
    let (sb, b_active) = sq(b);
    let (m, n) = (a.rows(), b.rows());
    let mut s = Matrix::zeros(m, n);
    for i in 0..m {
        let ai = a.row(i);
        for j in 0..n {
            s[(i, j)] = (dot(ai, b.row(j)) / (sa[i] * sb[j]).sqrt()).clamp(-1.0, 1.0);
        }
    }
    let inv_na = sa.iter().map(|v| 1.0 / v.sqrt()).collect();
    let inv_nb = sb.iter().map(|v| 1.0 / v.sqrt()).collect();
    counters::add_cosine((m * n * a.cols()) as u64);
    (s, inv_na, inv_nb, a_active, b_active)
}

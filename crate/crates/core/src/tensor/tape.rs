use super::kernels::{
    dot, gelu, gelu_grad, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, softmax_in_place,
};
use super::Tensor;
use crate::error::{DogeError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add {
        a: NodeId,
        b: NodeId,
        row_broadcast: bool,
    },
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        indices: Vec<usize>,
    },
    SliceCols {
        a: NodeId,
        start: usize,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only record of a forward computation.
///
/// Leaves created with [`Tape::leaf`] collect gradients; every call to
/// [`Tape::backward`] adds into those slots until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a leaf; `None` until a backward pass reaches it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.nodes[id.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(DogeError::dim(
                "matmul",
                format!("[{m}x{k}] x [{k2}x{n}]: inner dimensions differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum. `b` may also be a vector matching the last axis of `a`,
    /// in which case it is added to every row.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let row_broadcast = if sa == sb {
            false
        } else if sb.len() == 1 && sb[0] == *sa.last().unwrap() {
            true
        } else {
            return Err(DogeError::dim("add", format!("{sa:?} + {sb:?}")));
        };
        let av = self.value(a);
        let bv = self.value(b).data();
        let cols = bv.len();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + if row_broadcast { bv[i % cols] } else { bv[i] })
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b, row_broadcast }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(DogeError::dim("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let shape = av.shape().to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(a, c), rg))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu(x)).collect();
        let shape = av.shape().to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gelu(a), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let cols = av.last_dim();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = av.shape().to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SoftmaxRows(a), rg))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let cols = xv.last_dim();
        for (name, id) in [("gain", gain), ("bias", bias)] {
            if self.value(id).shape() != [cols] {
                return Err(DogeError::dim(
                    "layer_norm",
                    format!("{name} shape {:?}, expected [{cols}]", self.value(id).shape()),
                ));
            }
        }
        let rows = xv.len() / cols;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in xv.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v - mean) * is));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * g[i % cols] + b[i % cols])
            .collect();
        let shape = xv.shape().to_vec();
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` ([vocab, dim]) into a [indices.len(), dim] matrix.
    pub fn embedding_lookup(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (vocab, dim) = self.value(table).dims2("embedding_lookup")?;
        if indices.is_empty() {
            return Err(DogeError::contract("embedding_lookup with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(DogeError::data(format!(
                "embedding_lookup: index {bad} outside table of {vocab} rows"
            )));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), dim], data)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).dims2("slice_cols")?;
        if start >= end || end > cols {
            return Err(DogeError::dim("slice_cols", format!("{start}..{end} of {cols} columns")));
        }
        let width = end - start;
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&av[r * cols + start..r * cols + end]);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![rows, width], data)?, Op::SliceCols { a, start }, rg))
    }

    /// Multi-head causal self-attention.
    ///
    /// `q`, `k`, `v` are [batch * seq, dim] with rows grouped by sequence;
    /// head `h` uses columns `h * dim / heads .. (h + 1) * dim / heads`.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let (rows, dim) = self.value(q).dims2("causal_attention")?;
        for id in [k, v] {
            if self.value(id).shape() != [rows, dim] {
                return Err(DogeError::dim(
                    "causal_attention",
                    format!("q is [{rows}x{dim}], k/v is {:?}", self.value(id).shape()),
                ));
            }
        }
        if seq == 0 || rows % seq != 0 {
            return Err(DogeError::dim(
                "causal_attention",
                format!("{rows} rows not divisible into sequences of {seq}"),
            ));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(DogeError::dim(
                "causal_attention",
                format!("dim {dim} not divisible by {heads} heads"),
            ));
        }
        let batch = rows / seq;
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * dim];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * hd;
                let base = (b * heads + h) * seq * seq;
                for t in 0..seq {
                    let qt = &qv[(b * seq + t) * dim + col..][..hd];
                    let p = &mut probs[base + t * seq..base + t * seq + t + 1];
                    for (s, ps) in p.iter_mut().enumerate() {
                        *ps = scale * dot(qt, &kv[(b * seq + s) * dim + col..][..hd]);
                    }
                    softmax_in_place(p);
                    let o = &mut out[(b * seq + t) * dim + col..][..hd];
                    for (s, &ps) in p.iter().enumerate() {
                        let vs = &vv[(b * seq + s) * dim + col..][..hd];
                        for (oi, vi) in o.iter_mut().zip(vs) {
                            *oi += ps * vi;
                        }
                    }
                }
            }
        }
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![rows, dim], out)?,
            Op::CausalAttention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let (rows, vocab) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != rows {
            return Err(DogeError::dim(
                "cross_entropy",
                format!("{rows} logit rows, {} targets", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(DogeError::data(format!(
                "cross_entropy: target {bad} outside vocabulary of {vocab}"
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(DogeError::contract("cross_entropy: no predicted positions"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, target) in probs.chunks_mut(vocab).zip(targets) {
            softmax_in_place(row);
            if let Some(t) = *target {
                total -= row[t].ln();
            }
        }
        let loss = total / count as f64;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    /// Reverse pass from a scalar node; adds d(loss)/d(leaf) into every
    /// reachable leaf's gradient slot.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(DogeError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut sink = Sink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                &Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[a.0].value.dims2("matmul")?;
                    let n = node.value.shape()[1];
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    sink.add_with(a, |da| matmul_a_bt_acc(&g, bv, da, m, n, k));
                    sink.add_with(b, |db| matmul_at_b_acc(av, &g, db, m, k, n));
                }
                &Op::Add { a, b, row_broadcast } => {
                    sink.add_with(a, |da| axpy(da, &g, 1.0));
                    if row_broadcast {
                        sink.add_with(b, |db| {
                            let cols = db.len();
                            for row in g.chunks(cols) {
                                axpy(db, row, 1.0);
                            }
                        });
                    } else {
                        sink.add_with(b, |db| axpy(db, &g, 1.0));
                    }
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    sink.add_with(a, |da| {
                        for ((d, gi), bi) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gi * bi;
                        }
                    });
                    sink.add_with(b, |db| {
                        for ((d, gi), ai) in db.iter_mut().zip(&g).zip(av) {
                            *d += gi * ai;
                        }
                    });
                }
                &Op::Scale(a, c) => sink.add_with(a, |da| axpy(da, &g, c)),
                &Op::Gelu(a) => {
                    let xv = self.nodes[a.0].value.data();
                    sink.add_with(a, |da| {
                        for ((d, gi), &x) in da.iter_mut().zip(&g).zip(xv) {
                            *d += gi * gelu_grad(x);
                        }
                    });
                }
                &Op::SoftmaxRows(a) => {
                    let y = node.value.data();
                    let cols = node.value.last_dim();
                    sink.add_with(a, |da| {
                        for ((drow, grow), yrow) in
                            da.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                        {
                            let inner = dot(grow, yrow);
                            for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += yi * (gi - inner);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let cols = node.value.last_dim();
                    let gv = self.nodes[gain.0].value.data();
                    sink.add_with(*gain, |dg| {
                        for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for ((d, gi), hi) in dg.iter_mut().zip(grow).zip(hrow) {
                                *d += gi * hi;
                            }
                        }
                    });
                    sink.add_with(*bias, |db| {
                        for grow in g.chunks(cols) {
                            axpy(db, grow, 1.0);
                        }
                    });
                    sink.add_with(*x, |dx| {
                        let n = cols as f64;
                        let mut dh = vec![0.0; cols];
                        for (((dxrow, grow), hrow), &is) in dx
                            .chunks_mut(cols)
                            .zip(g.chunks(cols))
                            .zip(xhat.chunks(cols))
                            .zip(inv_std)
                        {
                            for ((d, gi), gn) in dh.iter_mut().zip(grow).zip(gv) {
                                *d = gi * gn;
                            }
                            let mean_dh = dh.iter().sum::<f64>() / n;
                            let mean_dh_h = dot(&dh, hrow) / n;
                            for ((d, dhi), hi) in dxrow.iter_mut().zip(&dh).zip(hrow) {
                                *d += is * (dhi - mean_dh - hi * mean_dh_h);
                            }
                        }
                    });
                }
                Op::Embedding { table, indices } => {
                    let dim = node.value.last_dim();
                    sink.add_with(*table, |dt| {
                        for (&i, grow) in indices.iter().zip(g.chunks(dim)) {
                            axpy(&mut dt[i * dim..(i + 1) * dim], grow, 1.0);
                        }
                    });
                }
                &Op::SliceCols { a, start } => {
                    let width = node.value.last_dim();
                    let cols = self.nodes[a.0].value.last_dim();
                    sink.add_with(a, |da| {
                        for (drow, grow) in da.chunks_mut(cols).zip(g.chunks(width)) {
                            axpy(&mut drow[start..start + width], grow, 1.0);
                        }
                    });
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    seq,
                    heads,
                    probs,
                } => {
                    let grads_qkv = attention_backward(
                        &g,
                        self.nodes[q.0].value.data(),
                        self.nodes[k.0].value.data(),
                        self.nodes[v.0].value.data(),
                        probs,
                        node.value.last_dim(),
                        *seq,
                        *heads,
                    );
                    for (id, d) in [*q, *k, *v].into_iter().zip(grads_qkv) {
                        sink.add_with(id, |acc| axpy(acc, &d, 1.0));
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let vocab = self.nodes[logits.0].value.last_dim();
                    let s = g[0] / *count as f64;
                    sink.add_with(*logits, |dl| {
                        for ((drow, prow), target) in
                            dl.chunks_mut(vocab).zip(probs.chunks(vocab)).zip(targets)
                        {
                            if let Some(t) = *target {
                                axpy(drow, prow, s);
                                drow[t] -= s;
                            }
                        }
                    });
                }
                &Op::Sum(a) => sink.add_with(a, |da| {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }),
            }
        }

        for (id, g) in leaf_grads {
            match &mut self.nodes[id].grad {
                Some(acc) => axpy(acc, &g, 1.0),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

struct Sink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Sink<'_> {
    fn add_with(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }
}

fn axpy(acc: &mut [f64], x: &[f64], a: f64) {
    for (y, xi) in acc.iter_mut().zip(x) {
        *y += a * xi;
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dim: usize,
    seq: usize,
    heads: usize,
) -> [Vec<f64>; 3] {
    let rows = q.len() / dim;
    let batch = rows / seq;
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * hd;
            let base = (b * heads + h) * seq * seq;
            for t in 0..seq {
                let row_t = (b * seq + t) * dim + col;
                let gt = &g[row_t..row_t + hd];
                let p = &probs[base + t * seq..base + t * seq + t + 1];
                for s in 0..=t {
                    let row_s = (b * seq + s) * dim + col;
                    dp[s] = dot(gt, &v[row_s..row_s + hd]);
                    axpy(&mut dv[row_s..row_s + hd], gt, p[s]);
                }
                let inner = dot(&dp[..=t], p);
                for s in 0..=t {
                    let ds = p[s] * (dp[s] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let row_s = (b * seq + s) * dim + col;
                    axpy(&mut dq[row_t..row_t + hd], &k[row_s..row_s + hd], ds);
                    axpy(&mut dk[row_s..row_s + hd], &q[row_t..row_t + hd], ds);
                }
            }
        }
    }
    [dq, dk, dv]
}

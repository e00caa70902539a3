//! A recording computation graph with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order: every input of a node has a smaller index.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layout::AttentionMask;

use super::kernels::{self, MatRef};
use super::{softmax_dims, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a trainable leaf across graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    Scale(Var, f64),
    MaskedSoftmax(Var, Arc<AttentionMask>),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Silu { x: Var, sig: Vec<f64> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    SliceSeq { x: Var, start: usize },
    ConcatSeq(Vec<Var>),
    BroadcastBatch(Var),
    Reshape(Var),
    MeanSeq(Var),
    L2Normalize { x: Var, norms: Vec<f64> },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every registered parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: ParamId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn dims3(t: &Tensor, op: &'static str) -> Result<[usize; 3]> {
    match t.shape() {
        &[a, b, c] => Ok([a, b, c]),
        s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0],
        }),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf: no gradient is reported for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// A trainable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        self.push(t, Op::Param(id))
    }

    /// `a: [.., k] · b: [k, n] -> [.., n]`; leading dims of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let k = ta.last_dim();
        let [k2, n] = super::dims2(tb, "matmul")?;
        if ta.shape().is_empty() || k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let m = leading(ta);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatRef::row_major(ta.data(), m, k),
            MatRef::row_major(tb.data(), k, n),
            &mut out,
            0.0,
        );
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Batched product over the leading dim: `[g,m,k]·[g,k,n]`, or
    /// `[g,m,k]·[g,n,k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [g, m, k] = dims3(ta, "batch_matmul")?;
        let [g2, b1, b2] = dims3(tb, "batch_matmul")?;
        let (bk, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if g != g2 || k != bk {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            let av = MatRef::row_major(&ta.data()[i * m * k..], m, k);
            let bs = &tb.data()[i * b1 * b2..];
            let bv = if trans_b {
                MatRef::row_major(bs, n, k).t()
            } else {
                MatRef::row_major(bs, k, n)
            };
            kernels::gemm(av, bv, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        let t = Tensor::new([g, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, trans_b }))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds `b` broadcast over the leading dims of `a`; `b`'s shape must be a
    /// suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb || tb.is_empty() {
            return Err(shape_err("add_broadcast", ta, tb));
        }
        let n = tb.len();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let t = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(t, Op::AddSuffix(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn masked_softmax(&mut self, x: Var, mask: Arc<AttentionMask>) -> Result<Var> {
        let tx = self.value(x);
        let (q, k) = softmax_dims(tx, &mask)?;
        let mut out = vec![0.0; tx.len()];
        kernels::masked_softmax(tx.data(), &mask, q, k, &mut out)?;
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::MaskedSoftmax(x, mask)))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.last_dim();
        if tg.shape() != [d] {
            return Err(shape_err("rms_norm", tx, tg));
        }
        let mut out = vec![0.0; tx.len()];
        let inv_rms = kernels::rms_norm(tx.data(), tg.data(), d, &mut out);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let sig: Vec<f64> = tx.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let data = tx.data().iter().zip(&sig).map(|(v, s)| v * s).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Silu { x, sig })
    }

    /// `[b, l, h·e] -> [b·h, l, e]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        let [b, l, d] = dims3(tx, "split_heads")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape {
                op: "split_heads",
                lhs: tx.shape().to_vec(),
                rhs: vec![heads],
            });
        }
        let e = d / heads;
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let s = (bi * l + li) * d + h * e;
                    let o = ((bi * heads + h) * l + li) * e;
                    out[o..o + e].copy_from_slice(&src[s..s + e]);
                }
            }
        }
        let t = Tensor::new([b * heads, l, e], out)?;
        Ok(self.push(t, Op::SplitHeads { x, heads }))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        let [bh, l, e] = dims3(tx, "merge_heads")?;
        if heads == 0 || bh % heads != 0 {
            return Err(Error::Shape {
                op: "merge_heads",
                lhs: tx.shape().to_vec(),
                rhs: vec![heads],
            });
        }
        let out = merge_heads_data(tx.data(), bh / heads, heads, l, e);
        let t = Tensor::new([bh / heads, l, heads * e], out)?;
        Ok(self.push(t, Op::MergeHeads { x, heads }))
    }

    /// Positions `start..start+len` along axis 1 of a `[b, l, d]` tensor.
    pub fn slice_seq(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let [b, l, d] = dims3(tx, "slice_seq")?;
        if start + len > l {
            return Err(Error::Shape {
                op: "slice_seq",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            let s = (bi * l + start) * d;
            out.extend_from_slice(&tx.data()[s..s + len * d]);
        }
        let t = Tensor::new([b, len, d], out)?;
        Ok(self.push(t, Op::SliceSeq { x, start }))
    }

    /// Concatenates `[b, l_i, d]` parts along axis 1.
    pub fn concat_seq(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape {
            op: "concat_seq",
            lhs: vec![],
            rhs: vec![],
        })?;
        let [b, _, d] = dims3(self.value(first), "concat_seq")?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            let [pb, pl, pd] = dims3(tp, "concat_seq")?;
            if pb != b || pd != d {
                return Err(shape_err("concat_seq", self.value(first), tp));
            }
            lens.push(pl);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for (&p, &pl) in parts.iter().zip(&lens) {
                let src = self.value(p).data();
                out.extend_from_slice(&src[bi * pl * d..(bi + 1) * pl * d]);
            }
        }
        let t = Tensor::new([b, total, d], out)?;
        Ok(self.push(t, Op::ConcatSeq(parts.to_vec())))
    }

    /// Repeats a tensor along a new leading batch axis.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Var {
        let tx = self.value(x);
        let mut shape = vec![batch];
        shape.extend_from_slice(tx.shape());
        let data = tx.data().repeat(batch);
        let t = Tensor::new(shape, data).expect("broadcast shape");
        self.push(t, Op::BroadcastBatch(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Mean over axis 1 of `[b, l, d]`.
    pub fn mean_seq(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [b, l, d] = dims3(tx, "mean_seq")?;
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for li in 0..l {
                let row = &tx.data()[(bi * l + li) * d..(bi * l + li + 1) * d];
                for (o, v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / l.max(1) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new([b, d], out)?;
        Ok(self.push(t, Op::MeanSeq(x)))
    }

    /// L2-normalizes every vector along the last dimension.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = tx.last_dim().max(1);
        let mut out = tx.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::L2Normalize { x, norms })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::scalar(tx.sum() / tx.len().max(1) as f64);
        self.push(t, Op::Mean(x))
    }

    /// Reverse sweep from a scalar `loss`. Every parameter leaf recorded in
    /// the graph gets an entry; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape().to_vec(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(g) = grads[idx].take() else {
                if let Op::Param(id) = node.op {
                    accumulate_param(&mut out, id, Tensor::zeros(node.value.shape().to_vec()));
                }
                continue;
            };
            self.backprop_node(node, g, &mut grads, &mut out)?;
        }
        // parameters recorded after the loss node are unreachable too
        for node in &self.nodes[loss.0 + 1..] {
            if let Op::Param(id) = node.op {
                accumulate_param(&mut out, id, Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Input => {}
            Op::Param(id) => accumulate_param(out, *id, g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let k = ta.last_dim();
                let n = tb.last_dim();
                let m = leading(ta);
                let mut da = vec![0.0; m * k];
                kernels::gemm(
                    MatRef::row_major(g.data(), m, n),
                    MatRef::row_major(tb.data(), k, n).t(),
                    &mut da,
                    0.0,
                );
                let mut db = vec![0.0; k * n];
                kernels::gemm(
                    MatRef::row_major(ta.data(), m, k).t(),
                    MatRef::row_major(g.data(), m, n),
                    &mut db,
                    0.0,
                );
                accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let [gn, m, k] = dims3(ta, "batch_matmul")?;
                let [_, b1, b2] = dims3(tb, "batch_matmul")?;
                let n = if *trans_b { b1 } else { b2 };
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                for i in 0..gn {
                    let gv = MatRef::row_major(&g.data()[i * m * n..], m, n);
                    let av = MatRef::row_major(&ta.data()[i * m * k..], m, k);
                    let bs = &tb.data()[i * b1 * b2..];
                    let da_i = &mut da[i * m * k..(i + 1) * m * k];
                    let db_i = &mut db[i * b1 * b2..(i + 1) * b1 * b2];
                    if *trans_b {
                        // out = a·bᵀ with b: n×k
                        let bv = MatRef::row_major(bs, n, k);
                        kernels::gemm(gv, bv, da_i, 0.0);
                        kernels::gemm(gv.t(), av, db_i, 0.0);
                    } else {
                        let bv = MatRef::row_major(bs, k, n);
                        kernels::gemm(gv, bv.t(), da_i, 0.0);
                        kernels::gemm(av.t(), gv, db_i, 0.0);
                    }
                }
                accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *b, g.map(|v| -v));
                accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let da: Vec<f64> = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
            }
            Op::AddSuffix(a, b) => {
                let tb = val(*b);
                let mut db = vec![0.0; tb.len()];
                for chunk in g.data().chunks(tb.len()) {
                    for (d, v) in db.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                accumulate(grads, *a, g);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::MaskedSoftmax(x, mask) => {
                let y = &node.value;
                let k = mask.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(k).zip(y.data().chunks(k)).zip(g.data().chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (val(*x), val(*gain));
                let d = tg.len();
                let mut dx = vec![0.0; tx.len()];
                let mut dgain = vec![0.0; d];
                for (((xr, gr), dxr), &r) in tx
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.chunks_mut(d))
                    .zip(inv_rms)
                {
                    let mut dot = 0.0;
                    for j in 0..d {
                        dgain[j] += gr[j] * xr[j] * r;
                        dot += gr[j] * tg.data()[j] * xr[j];
                    }
                    let c = r * r * r * dot / d as f64;
                    for j in 0..d {
                        dxr[j] = r * tg.data()[j] * gr[j] - c * xr[j];
                    }
                }
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
                accumulate(grads, *gain, Tensor::new(tg.shape().to_vec(), dgain)?);
            }
            Op::Silu { x, sig } => {
                let tx = val(*x);
                let dx = tx
                    .data()
                    .iter()
                    .zip(sig)
                    .zip(g.data())
                    .map(|((&v, &s), &gv)| gv * s * (1.0 + v * (1.0 - s)))
                    .collect();
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
            }
            Op::SplitHeads { x, heads } => {
                let tx = val(*x);
                let [b, l, d] = dims3(tx, "split_heads")?;
                let dx = merge_heads_data(g.data(), b, *heads, l, d / heads);
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
            }
            Op::MergeHeads { x, heads } => {
                let tx = val(*x);
                let [bh, l, e] = dims3(tx, "merge_heads")?;
                let b = bh / heads;
                let d = heads * e;
                let mut dx = vec![0.0; tx.len()];
                for bi in 0..b {
                    for li in 0..l {
                        for h in 0..*heads {
                            let s = (bi * l + li) * d + h * e;
                            let o = ((bi * heads + h) * l + li) * e;
                            dx[o..o + e].copy_from_slice(&g.data()[s..s + e]);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
            }
            Op::SliceSeq { x, start } => {
                let tx = val(*x);
                let [b, l, d] = dims3(tx, "slice_seq")?;
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; tx.len()];
                for bi in 0..b {
                    let o = (bi * l + start) * d;
                    dx[o..o + len * d].copy_from_slice(&g.data()[bi * len * d..(bi + 1) * len * d]);
                }
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
            }
            Op::ConcatSeq(parts) => {
                let [b, total, d] = dims3(&node.value, "concat_seq")?;
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let pl = tp.shape()[1];
                    let mut dp = Vec::with_capacity(tp.len());
                    for bi in 0..b {
                        let s = (bi * total + offset) * d;
                        dp.extend_from_slice(&g.data()[s..s + pl * d]);
                    }
                    accumulate(grads, p, Tensor::new(tp.shape().to_vec(), dp)?);
                    offset += pl;
                }
            }
            Op::BroadcastBatch(x) => {
                let tx = val(*x);
                let mut dx = vec![0.0; tx.len()];
                if !dx.is_empty() {
                    for chunk in g.data().chunks(tx.len()) {
                        for (d, v) in dx.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
            }
            Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                accumulate(grads, *x, g.reshape(shape)?);
            }
            Op::MeanSeq(x) => {
                let tx = val(*x);
                let [b, l, d] = dims3(tx, "mean_seq")?;
                let inv = 1.0 / l.max(1) as f64;
                let mut dx = vec![0.0; tx.len()];
                for bi in 0..b {
                    let gr = &g.data()[bi * d..(bi + 1) * d];
                    for li in 0..l {
                        let o = (bi * l + li) * d;
                        for (dv, gv) in dx[o..o + d].iter_mut().zip(gr) {
                            *dv = gv * inv;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let d = y.last_dim().max(1);
                let mut dx = vec![0.0; y.len()];
                for (((dr, yr), gr), &n) in dx
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(g.data().chunks(d))
                    .zip(norms)
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = (gv - yv * dot) / n;
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()?),
            Op::Sum(x) => {
                let tx = val(*x);
                accumulate(grads, *x, Tensor::full(tx.shape().to_vec(), g.data()[0]));
            }
            Op::Mean(x) => {
                let tx = val(*x);
                let v = g.data()[0] / tx.len().max(1) as f64;
                accumulate(grads, *x, Tensor::full(tx.shape().to_vec(), v));
            }
        }
        Ok(())
    }
}

/// Product of all but the last dimension.
fn leading(t: &Tensor) -> usize {
    let s = t.shape();
    s[..s.len().saturating_sub(1)].iter().product()
}

fn merge_heads_data(src: &[f64], b: usize, heads: usize, l: usize, e: usize) -> Vec<f64> {
    let d = heads * e;
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for h in 0..heads {
            for li in 0..l {
                let s = ((bi * heads + h) * l + li) * e;
                let o = (bi * l + li) * d + h * e;
                out[o..o + e].copy_from_slice(&src[s..s + e]);
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_param(out: &mut Gradients, id: ParamId, g: Tensor) {
    match out.grads.get_mut(&id) {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => {
            out.grads.insert(id, g);
        }
    }
}

//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node vector is already topologically sorted and
//! backward is a single reverse sweep.
//!
//! Reductions over unordered sets (attention over context rows, the region
//! mean, loss sums) accumulate in a content-defined order. Their results are
//! therefore bitwise invariant under any permutation of the set.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::{set_sum, Scalar};

use super::kernels::{self, gelu, gelu_grad, sigmoid};
use super::params::{Gradients, ParamId, ParamStore};
use super::{Mask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }

    /// Handle for node `i` of some graph; only meaningful for that graph.
    pub fn from_index(i: usize) -> Self {
        NodeId(i)
    }
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, T),
    Gelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: NodeId,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SetMeanRows(NodeId),
    SumAll(NodeId),
    Softmax(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: Option<Rc<Mask>>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<T>,
        probs: Vec<T>,
    },
    Nll {
        logits: NodeId,
        ids: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape(NodeId),
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SetMeanRows(..) => "set_mean_rows",
            Op::SumAll(..) => "sum_all",
            Op::Softmax(..) => "softmax",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Nll { .. } => "nll",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Recorded forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, NodeId>,
    first_nonfinite: Option<usize>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct GradTable<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradTable<T> {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            first_nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.value(id).item()
    }

    pub fn op_kind(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.kind()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let id = self.nodes.len();
        if cfg!(debug_assertions) && self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(id);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        NodeId(id)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool, param: Option<ParamId>) -> NodeId {
        let id = self.push(value, Op::Leaf, &[]);
        self.nodes[id.0].needs_grad = needs_grad;
        self.nodes[id.0].param = param;
        id
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf(t, false, None)
    }

    /// Differentiable input that is not a stored parameter.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf(t, true, None)
    }

    /// Bind a stored parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.bound.get(&id) {
            return n;
        }
        let n = self.leaf(store.get(id).clone(), true, Some(id));
        self.bound.insert(id, n);
        n
    }

    /// First node holding a NaN or infinity, as an error.
    pub fn check_finite(&self) -> Result<()> {
        let bad = if cfg!(debug_assertions) {
            self.first_nonfinite
        } else {
            self.nodes.iter().position(|n| !n.value.is_finite())
        };
        match bad {
            Some(i) => Err(Error::NonFinite {
                node: i,
                op: self.nodes[i].op.kind(),
            }),
            None => Ok(()),
        }
    }

    /// Name of the parameter feeding the first non-finite node, if any.
    pub fn first_nonfinite_param(&self, store: &ParamStore<T>) -> Option<String> {
        self.nodes
            .iter()
            .find(|n| n.param.is_some() && !n.value.is_finite())
            .and_then(|n| n.param)
            .map(|p| store.name(p).to_string())
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(shape_err("transpose", x.shape(), &[]));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        let out = Tensor::matrix(c, r, data)?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    // ----- elementwise ----------------------------------------------------

    fn zip_same(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a trailing-dimension bias to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let cols = xv.cols();
        if bv.len() != cols {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % cols])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: NodeId, scale: T, shift: T) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| scale * v + shift).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        self.affine(x, c, T::zero())
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[x])
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, T::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    // ----- normalization --------------------------------------------------

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if d < 2 {
            return Err(Error::contract("layer_norm needs a trailing extent of at least 2"));
        }
        if gv.len() != d || bv.len() != d {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let (y, xhat, rstd) = kernels::layer_norm_rows(xv.data(), d, gv.data(), bv.data(), eps);
        let out = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            if row.iter().all(|v| *v == T::neg_infinity()) {
                return Err(Error::MaskedRow { row: r });
            }
            kernels::softmax_row(row, &mut out[r * c..(r + 1) * c]);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    // ----- indexing and layout ---------------------------------------------

    /// Rows `idx` of a rank-2 `table` (embedding lookup when `table` is a
    /// parameter).
    pub fn gather(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(shape_err("gather", tv.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::Vocab {
                id: bad,
                size: tv.rows(),
            });
        }
        if idx.is_empty() {
            return Err(Error::contract("gather with no indices"));
        }
        let out = tv.select_rows(idx);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(first), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(shape_err("concat_cols", self.shape(first), v.shape()));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || len == 0 || start + len > xv.rows() {
            return Err(shape_err("slice_rows", xv.shape(), &[start, len]));
        }
        let c = xv.cols();
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::matrix(len, c, data)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    // ----- set reductions ---------------------------------------------------

    /// Column means of a rank-2 node, as a `1 x cols` row.
    pub fn set_mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(shape_err("set_mean_rows", xv.shape(), &[]));
        }
        let (r, c) = (xv.rows(), xv.cols());
        let n = T::of(r as f64);
        let mut col = vec![T::zero(); r];
        let mut out = Vec::with_capacity(c);
        for j in 0..c {
            for (i, slot) in col.iter_mut().enumerate() {
                *slot = xv.data()[i * c + j];
            }
            out.push(set_sum(&mut col) / n);
        }
        let out = Tensor::matrix(1, c, out)?;
        Ok(self.push(out, Op::SetMeanRows(x), &[x]))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut vals = self.value(x).data().to_vec();
        let s = set_sum(&mut vals);
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = T::of(self.value(x).len() as f64);
        let s = self.sum_all(x);
        self.scale(s, T::one() / n)
    }

    // ----- attention --------------------------------------------------------

    /// Multi-head scaled dot-product attention core (no projections).
    ///
    /// `q` is `tq x d`, `k` and `v` are `tc x d`. Disallowed context rows are
    /// excluded from the softmax, which is what a `-1e9` additive bias
    /// reduces to once exponentiated. Allowed rows are visited in a canonical
    /// order of their key/value contents.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: Option<Rc<Mask>>,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = (qv.rows(), qv.cols());
        let tc = kv.rows();
        if kv.cols() != d {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        if vv.rows() != tc || vv.cols() != d {
            return Err(shape_err("attention", kv.shape(), vv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(m) = &mask {
            if m.rows() != tq || m.cols() != tc {
                return Err(shape_err("attention mask", &[m.rows(), m.cols()], &[tq, tc]));
            }
            if let Some(row) = m.first_empty_row() {
                return Err(Error::MaskedRow { row });
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let order = canonical_row_order(kv, vv);

        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![T::zero(); heads * tq * tc];
        let mut out = vec![T::zero(); tq * d];
        let mut allowed: Vec<usize> = Vec::with_capacity(tc);
        let mut scores: Vec<T> = vec![T::zero(); tc];
        for i in 0..tq {
            allowed.clear();
            allowed.extend(
                order
                    .iter()
                    .copied()
                    .filter(|&c| mask.as_ref().is_none_or(|m| m.allowed(i, c))),
            );
            for h in 0..heads {
                let off = h * dh;
                let qrow = &qd[i * d + off..i * d + off + dh];
                let mut max = T::neg_infinity();
                for &c in &allowed {
                    let krow = &kd[c * d + off..c * d + off + dh];
                    let mut s = T::zero();
                    for (&a, &b) in qrow.iter().zip(krow) {
                        s = s + a * b;
                    }
                    s = s * scale;
                    scores[c] = s;
                    max = max.max(s);
                }
                let mut z = T::zero();
                for &c in &allowed {
                    let e = (scores[c] - max).exp();
                    scores[c] = e;
                    z = z + e;
                }
                let prow = &mut probs[(h * tq + i) * tc..(h * tq + i + 1) * tc];
                let orow = &mut out[i * d + off..i * d + off + dh];
                for &c in &allowed {
                    let p = scores[c] / z;
                    prow[c] = p;
                    let vrow = &vd[c * d + off..c * d + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o = *o + p * x;
                    }
                }
            }
        }
        let out = Tensor::matrix(tq, d, out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
            &[q, k, v],
        ))
    }

    // ----- losses -------------------------------------------------------------

    /// Per-row `-sum_c t_c log softmax(z)_c` against target weights.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &Tensor<T>) -> Result<NodeId> {
        let zv = self.value(logits);
        if zv.shape().len() != 2 || targets.rows() != zv.rows() || targets.cols() != zv.cols() {
            return Err(shape_err("cross_entropy", zv.shape(), targets.shape()));
        }
        let c = zv.cols();
        let mut losses = Vec::with_capacity(zv.rows());
        let mut probs = vec![T::zero(); zv.len()];
        for r in 0..zv.rows() {
            let row = zv.row(r);
            let lse = kernels::log_sum_exp(row);
            let t = targets.row(r);
            let mut l = T::zero();
            for j in 0..c {
                if t[j] != T::zero() {
                    l = l + t[j] * (lse - row[j]);
                }
            }
            losses.push(l);
            kernels::softmax_row(row, &mut probs[r * c..(r + 1) * c]);
        }
        let out = Tensor::vector(losses)?;
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Per-row negative log-likelihood of class `ids[r]`.
    pub fn nll_rows(&mut self, logits: NodeId, ids: &[usize]) -> Result<NodeId> {
        let zv = self.value(logits);
        if zv.shape().len() != 2 || ids.len() != zv.rows() {
            return Err(shape_err("nll", zv.shape(), &[ids.len()]));
        }
        let c = zv.cols();
        if let Some(&bad) = ids.iter().find(|&&i| i >= c) {
            return Err(Error::Vocab { id: bad, size: c });
        }
        let mut losses = Vec::with_capacity(ids.len());
        let mut probs = vec![T::zero(); zv.len()];
        for (r, &id) in ids.iter().enumerate() {
            let row = zv.row(r);
            losses.push(kernels::log_sum_exp(row) - row[id]);
            kernels::softmax_row(row, &mut probs[r * c..(r + 1) * c]);
        }
        let out = Tensor::vector(losses)?;
        Ok(self.push(
            out,
            Op::Nll {
                logits,
                ids: ids.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ----- backward -------------------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<GradTable<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        Ok(GradTable { grads })
    }

    /// Parameter gradients for every tensor in `store`; parameters the graph
    /// never touched receive zeros.
    pub fn param_grads(&self, table: &GradTable<T>, store: &ParamStore<T>) -> Gradients<T> {
        let mut out = Gradients::zeros_like(store);
        for (&pid, &nid) in &self.bound {
            if let Some(g) = table.wrt(nid) {
                out.set(pid, Some(g.clone()));
            }
        }
        out
    }

    pub fn backward_params(&self, loss: NodeId, store: &ParamStore<T>) -> Result<Gradients<T>> {
        let table = self.backward(loss)?;
        Ok(self.param_grads(&table, store))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::matmul_bt_acc(g, bv.data(), m, n, k, ga);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    kernels::matmul_at_acc(av.data(), g, m, k, n, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let ga = slot(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        acc_all(slot(grads, id, g.len()), g, T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc_all(slot(grads, *a, g.len()), g, T::one());
                }
                if wants(*b) {
                    acc_all(slot(grads, *b, g.len()), g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b).data();
                    let ga = slot(grads, *a, g.len());
                    for ((s, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *s = *s + gi * y;
                    }
                }
                if wants(*b) {
                    let av = val(*a).data();
                    let gb = slot(grads, *b, g.len());
                    for ((s, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *s = *s + gi * x;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    acc_all(slot(grads, *x, g.len()), g, T::one());
                }
                if wants(*b) {
                    let cols = val(*b).len();
                    let gb = slot(grads, *b, cols);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % cols] = gb[i % cols] + gi;
                    }
                }
            }
            Op::Affine(x, c) => acc_all(slot(grads, *x, g.len()), g, *c),
            Op::Gelu(x) => {
                let xv = val(*x).data();
                let gx = slot(grads, *x, g.len());
                for ((s, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                    *s = *s + gi * gelu_grad(v);
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let gx = slot(grads, *x, g.len());
                for ((s, &gi), &yv) in gx.iter_mut().zip(g).zip(y) {
                    *s = *s + gi * (T::one() - yv * yv);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = slot(grads, *x, g.len());
                for ((s, &gi), &yv) in gx.iter_mut().zip(g).zip(y) {
                    *s = *s + gi * yv * (T::one() - yv);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let gx = slot(grads, *x, g.len());
                for ((s, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *s = *s + gi;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).len();
                let gam = val(*gamma).data();
                let rows = g.len() / d;
                if wants(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] = gg[c] + g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, *beta, d);
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] = gb[c] + g[r * d + c];
                        }
                    }
                }
                if wants(*x) {
                    let n = T::of(d as f64);
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            let v = g[r * d + c] * gam[c];
                            dxhat[c] = v;
                            m1 = m1 + v;
                            m2 = m2 + v * xhat[r * d + c];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for c in 0..d {
                            let h = xhat[r * d + c];
                            gx[r * d + c] = gx[r * d + c] + rstd[r] * (dxhat[c] - m1 - h * m2);
                        }
                    }
                }
            }
            Op::Gather { table, idx } => {
                let c = val(*table).cols();
                let gt = slot(grads, *table, val(*table).len());
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gt[i * c + j] = gt[i * c + j] + g[r * c + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        acc_all(slot(grads, p, n), &g[off..off + n], T::one());
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut coff = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if wants(p) {
                        let gp = slot(grads, p, rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] = gp[r * c + j] + g[r * total + coff + j];
                            }
                        }
                    }
                    coff += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = val(*x).cols();
                let gx = slot(grads, *x, val(*x).len());
                let base = start * c;
                for (j, &gi) in g.iter().enumerate() {
                    gx[base + j] = gx[base + j] + gi;
                }
            }
            Op::SetMeanRows(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                let inv = T::one() / T::of(r as f64);
                let gx = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + g[j] * inv;
                    }
                }
            }
            Op::SumAll(x) => {
                let n = val(*x).len();
                let gx = slot(grads, *x, n);
                for s in gx.iter_mut() {
                    *s = *s + g[0];
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let gx = slot(grads, *x, y.len());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for j in 0..c {
                        gx[r * c + j] = gx[r * c + j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => self.backprop_attention(g, *q, *k, *v, *heads, mask.as_deref(), probs, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = val(*logits).cols();
                let gz = slot(grads, *logits, probs.len());
                for (r, &gr) in g.iter().enumerate() {
                    let t = &targets[r * c..(r + 1) * c];
                    let mass = t.iter().fold(T::zero(), |a, &b| a + b);
                    for j in 0..c {
                        gz[r * c + j] = gz[r * c + j] + gr * (mass * probs[r * c + j] - t[j]);
                    }
                }
            }
            Op::Nll { logits, ids, probs } => {
                let c = val(*logits).cols();
                let gz = slot(grads, *logits, probs.len());
                for (r, (&gr, &id)) in g.iter().zip(ids).enumerate() {
                    for j in 0..c {
                        let onehot = if j == id { T::one() } else { T::zero() };
                        gz[r * c + j] = gz[r * c + j] + gr * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::Reshape(x) => acc_all(slot(grads, *x, g.len()), g, T::one()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        g: &[T],
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: Option<&Mask>,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d, tc) = (qv.rows(), qv.cols(), kv.rows());
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = vec![T::zero(); tq * d];
        let mut dk = vec![T::zero(); tc * d];
        let mut dv = vec![T::zero(); tc * d];
        let mut dp = vec![T::zero(); tc];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let prow = &probs[(h * tq + i) * tc..(h * tq + i + 1) * tc];
                let grow = &g[i * d + off..i * d + off + dh];
                let mut sum_pd = T::zero();
                for c in 0..tc {
                    if mask.is_some_and(|m| !m.allowed(i, c)) {
                        dp[c] = T::zero();
                        continue;
                    }
                    let vrow = &vd[c * d + off..c * d + off + dh];
                    let s = grow.iter().zip(vrow).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    dp[c] = s;
                    sum_pd = sum_pd + prow[c] * s;
                    for j in 0..dh {
                        dv[c * d + off + j] = dv[c * d + off + j] + prow[c] * grow[j];
                    }
                }
                for c in 0..tc {
                    let p = prow[c];
                    if p == T::zero() {
                        continue;
                    }
                    let ds = p * (dp[c] - sum_pd) * scale;
                    for j in 0..dh {
                        dq[i * d + off + j] = dq[i * d + off + j] + ds * kd[c * d + off + j];
                        dk[c * d + off + j] = dk[c * d + off + j] + ds * qd[i * d + off + j];
                    }
                }
            }
        }
        for (id, local) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[id.0].needs_grad {
                acc_all(slot(grads, id, local.len()), &local, T::one());
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, n: usize) -> &mut Vec<T> {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn acc_all<T: Scalar>(dst: &mut [T], src: &[T], c: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + c * s;
    }
}

/// Row order defined by the bit contents of `k` then `v`; identical rows are
/// interchangeable, so the order is a function of the row multiset.
fn canonical_row_order<T: Scalar>(k: &Tensor<T>, v: &Tensor<T>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k.rows()).collect();
    order.sort_by(|&a, &b| {
        let ka = k.row(a).iter().zip(k.row(b));
        let va = v.row(a).iter().zip(v.row(b));
        ka.chain(va)
            .map(|(x, y)| x.cmp_total(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records primitive operations in execution order together with
//! their output values. [`Graph::backward`] walks the tape in exact reverse
//! order and accumulates gradients additively, so fan-out needs no special
//! handling. The primitive set is closed: matmul, add, mul, scale, reshape,
//! transpose, softmax, layernorm, GELU, SiLU, gather, concat, slice, sum, mean.

use std::collections::BTreeMap;

use crate::error::{NumericsError, Result};
use crate::kernels::{broadcast_map, matmul_nn, matmul_nt, matmul_tn, permute};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Broadcast {
    Same,
    /// `b` equals the trailing axes of `a`.
    Suffix,
    /// General right-aligned broadcast with unit axes.
    Map(Vec<usize>),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId, bcast: Broadcast },
    Mul { a: NodeId, b: NodeId, bcast: Broadcast },
    Scale { a: NodeId, c: f64 },
    Reshape { a: NodeId },
    Transpose { a: NodeId, perm: Vec<usize> },
    Softmax { a: NodeId },
    LayerNorm { a: NodeId },
    Gelu { a: NodeId },
    Silu { a: NodeId },
    Gather { table: NodeId, ids: Vec<usize> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    Sum { a: NodeId },
    Mean { a: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu { .. } => "gelu",
            Op::Silu { .. } => "silu",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
    /// Per-op cache (layernorm keeps 1/σ per row).
    aux: Vec<S>,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients<S: Scalar> {
    map: BTreeMap<NodeId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor<S>)> {
        self.map.iter()
    }
}

pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    fault: Option<&'static str>,
    layernorm_eps: f64,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None, layernorm_eps: 1e-6 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// First primitive that produced a non-finite value, if any.
    pub fn check(&self) -> Result<()> {
        match self.fault {
            Some(op) => Err(NumericsError::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs_grad: bool, aux: Vec<S>) -> NodeId {
        if self.fault.is_none() && !value.all_finite() {
            self.fault = Some(op.name());
        }
        self.nodes.push(Node { value, op, needs_grad, aux });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Records a leaf; gradients are reported for it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> NodeId {
        let ng = tensor.requires_grad();
        self.push(tensor, Op::Leaf, ng, Vec::new())
    }

    pub fn param(&mut self, tensor: Tensor<S>) -> NodeId {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> NodeId {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// `[M,K]·[K,N]` or batched `[B,M,K]·[B,K,N]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => panic!("matmul shape mismatch: {sa:?} x {sb:?}"),
        };
        let mut out = vec![S::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                matmul_nn(
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b }, ng, Vec::new())
    }

    fn broadcast_kind(&self, op: &str, a: NodeId, b: NodeId) -> Broadcast {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Broadcast::Same;
        }
        assert!(sb.len() <= sa.len(), "{op}: cannot broadcast {sb:?} onto {sa:?}");
        let off = sa.len() - sb.len();
        let ok = sb.iter().enumerate().all(|(i, &d)| d == 1 || d == sa[i + off]);
        assert!(ok, "{op}: cannot broadcast {sb:?} onto {sa:?}");
        if sb == &sa[off..] {
            Broadcast::Suffix
        } else {
            Broadcast::Map(broadcast_map(sa, sb))
        }
    }

    fn binary(&mut self, a: NodeId, b: NodeId, mul: bool) -> NodeId {
        let bcast = self.broadcast_kind(if mul { "mul" } else { "add" }, a, b);
        let va = self.value(a);
        let vb = self.value(b).data();
        let f = |x: S, y: S| if mul { x * y } else { x + y };
        let out: Vec<S> = match &bcast {
            Broadcast::Same => va.data().iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Suffix => {
                let nb = vb.len();
                va.data().iter().enumerate().map(|(i, &x)| f(x, vb[i % nb])).collect()
            }
            Broadcast::Map(map) => va.data().iter().zip(map).map(|(&x, &j)| f(x, vb[j])).collect(),
        };
        let shape = va.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        let op = if mul { Op::Mul { a, b, bcast } } else { Op::Add { a, b, bcast } };
        self.push(Tensor::from_parts(shape, out), op, ng, Vec::new())
    }

    /// Elementwise sum; `b` may broadcast (right-aligned, unit axes repeat).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, false)
    }

    /// Elementwise product; `b` may broadcast like in [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, true)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cs = S::from_f64(c);
        let v = self.value(a).map(|x| x * cs);
        let ng = self.ng(a);
        self.push(v, Op::Scale { a, c }, ng, Vec::new())
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .reshaped(shape)
            .unwrap_or_else(|e| panic!("{e}"))
            .with_requires_grad(false);
        let ng = self.ng(a);
        self.push(v, Op::Reshape { a }, ng, Vec::new())
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, a: NodeId, perm: &[usize]) -> NodeId {
        let v = self.value(a);
        assert_eq!(perm.len(), v.rank(), "transpose: permutation rank");
        let (shape, data) = permute(v.data(), v.shape(), perm);
        let ng = self.ng(a);
        self.push(Tensor::from_parts(shape, data), Op::Transpose { a, perm: perm.to_vec() }, ng, Vec::new())
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let d = *v.shape().last().expect("softmax on scalar");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let mut s = S::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s = s + *x;
            }
            let inv = S::one() / s;
            for x in row.iter_mut() {
                *x = *x * inv;
            }
        }
        let shape = v.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::from_parts(shape, out), Op::Softmax { a }, ng, Vec::new())
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, a: NodeId) -> NodeId {
        let eps = S::from_f64(self.layernorm_eps);
        let v = self.value(a);
        let d = *v.shape().last().expect("layernorm on scalar");
        let dn = S::from_f64(d as f64);
        let mut out = v.data().to_vec();
        let mut rstds = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / dn;
            let rstd = S::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let shape = v.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::from_parts(shape, out), Op::LayerNorm { a }, ng, rstds)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| {
            let (t, _) = gelu_parts(x);
            S::from_f64(0.5) * x * (S::one() + t)
        });
        let ng = self.ng(a);
        self.push(v, Op::Gelu { a }, ng, Vec::new())
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(v, Op::Silu { a }, ng, Vec::new())
    }

    /// Row lookup into a `[V,D]` table; returns `[ids.len(), D]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let (v, d) = match t.shape() {
            [v, d] => (*v, *d),
            s => panic!("gather: table must be 2-D, got {s:?}"),
        };
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "gather: id {i} out of range {v}");
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather { table, ids: ids.to_vec() },
            ng,
            Vec::new(),
        )
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.len() == first.len() && s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                "concat shape mismatch {s:?} vs {first:?} on axis {axis}"
            );
            total_axis += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_parts(shape, out), Op::Concat { parts: parts.to_vec(), axis }, ng, Vec::new())
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = self.value(a);
        let s = v.shape().to_vec();
        assert!(start + len <= s[axis], "slice {start}+{len} exceeds axis {axis} of {s:?}");
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(a);
        self.push(Tensor::from_parts(shape, out), Op::Slice { a, axis, start }, ng, Vec::new())
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum::<S>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, ng, Vec::new())
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<S>() / S::from_f64(v.numel() as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, ng, Vec::new())
    }

    /// Reverse pass from a scalar `loss`. The recorded values are left intact.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        self.check()?;
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(NumericsError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFinite { op: "backward" });
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut map = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = grads[idx].take().unwrap_or_else(|| vec![S::zero(); node.value.numel()]);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NumericsError::NonFinite { op: "backward" });
                }
                map.insert(NodeId(idx), Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Ok(Gradients { map })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], id: NodeId, contrib: Vec<S>) {
        if !self.ng(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a = *a + c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn reduce_broadcast(&self, g: &[S], b: NodeId, bcast: &Broadcast) -> Vec<S> {
        let nb = self.value(b).numel();
        match bcast {
            Broadcast::Same => g.to_vec(),
            Broadcast::Suffix => {
                let mut out = vec![S::zero(); nb];
                for chunk in g.chunks(nb) {
                    for (o, &v) in out.iter_mut().zip(chunk) {
                        *o = *o + v;
                    }
                }
                out
            }
            Broadcast::Map(map) => {
                let mut out = vec![S::zero(); nb];
                for (&v, &j) in g.iter().zip(map) {
                    out[j] = out[j] + v;
                }
                out
            }
        }
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let mut ga = vec![S::zero(); batch * m * k];
                    for bi in 0..batch {
                        matmul_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &db[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = vec![S::zero(); batch * k * n];
                    for bi in 0..batch {
                        matmul_tn(
                            &da[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add { a, b, bcast } => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.ng(*b) {
                    let gb = self.reduce_broadcast(g, *b, bcast);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul { a, b, bcast } => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let b_at = |i: usize| -> S {
                    match bcast {
                        Broadcast::Same => vb[i],
                        Broadcast::Suffix => vb[i % vb.len()],
                        Broadcast::Map(m) => vb[m[i]],
                    }
                };
                if self.ng(*a) {
                    let ga: Vec<S> = g.iter().enumerate().map(|(i, &gi)| gi * b_at(i)).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let full: Vec<S> = g.iter().zip(va).map(|(&gi, &x)| gi * x).collect();
                    let gb = self.reduce_broadcast(&full, *b, bcast);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale { a, c } => {
                let cs = S::from_f64(*c);
                self.accumulate(grads, *a, g.iter().map(|&x| x * cs).collect());
            }
            Op::Reshape { a } => self.accumulate(grads, *a, g.to_vec()),
            Op::Transpose { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, back) = permute(g, node.value.shape(), &inv);
                self.accumulate(grads, *a, back);
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut out = vec![S::zero(); y.len()];
                for ((yr, gr), or) in y.chunks(d).zip(g.chunks(d)).zip(out.chunks_mut(d)) {
                    let dotp = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum::<S>();
                    for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dotp);
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::LayerNorm { a } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let dn = S::from_f64(d as f64);
                let mut out = vec![S::zero(); y.len()];
                for (r, ((yr, gr), or)) in y.chunks(d).zip(g.chunks(d)).zip(out.chunks_mut(d)).enumerate() {
                    let rstd = node.aux[r];
                    let mg = gr.iter().copied().sum::<S>() / dn;
                    let mgy = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum::<S>() / dn;
                    for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                        *o = rstd * (gv - mg - yv * mgy);
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                let out = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| {
                        let (t, du) = gelu_parts(xv);
                        let half = S::from_f64(0.5);
                        gv * (half * (S::one() + t) + half * xv * (S::one() - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *a, out);
            }
            Op::Silu { a } => {
                let x = self.value(*a).data();
                let out = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| {
                        let s = sigmoid(xv);
                        gv * s * (S::one() + xv * (S::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *a, out);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut out = vec![S::zero(); t.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &gv) in out[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o = *o + gv;
                    }
                }
                self.accumulate(grads, *table, out);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let src = self.shape(*a);
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut out = vec![S::zero(); numel(src)];
                for o in 0..outer {
                    let base = (o * src[*axis] + start) * inner;
                    out[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, out);
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                let v = g[0] / S::from_f64(n as f64);
                self.accumulate(grads, *a, vec![v; n]);
            }
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// tanh(u) and du/dx for the GELU tanh approximation.
#[inline]
fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64(0.044715);
    let u = c * (x + k * x * x * x);
    let du = c * (S::one() + S::from_f64(3.0) * k * x * x);
    (u.tanh(), du)
}

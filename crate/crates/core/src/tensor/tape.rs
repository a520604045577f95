//! Reverse-mode differentiation tape.
//!
//! Every primitive appends a node holding its forward value plus whatever the
//! backward rule needs. Nodes are only ever appended, so a node's inputs
//! always precede it and a single reverse sweep visits each node once.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{DlfError, Result};

use super::scalar::{gemm, MatRef};
use super::{Gradients, ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool, alpha: T },
    Linear { x: Var, w: Var, b: Option<Var> },
    Binary { kind: Binary, a: Var, b: Var, broadcast: bool },
    Scale { a: Var, s: T },
    Relu { a: Var },
    Sigmoid { a: Var },
    MaxScalar { a: Var, floor: T },
    Softmax { a: Var },
    Gather { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var> },
    Slice { a: Var, start: usize },
    Dropout { a: Var, mask: Vec<T> },
    Reshape { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    SigmoidBce { logits: Var, labels: Vec<T> },
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitives over a read-only [`ParamStore`]. Single owner; not
/// shared between threads.
pub struct Tape<'p, T> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<'p, T>>,
    params: HashMap<ParamId, Var>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Tape { store: Some(store), nodes: Vec::new(), params: HashMap::new() }
    }

    /// A tape with no parameter store; only [`Tape::leaf`] inputs.
    pub fn detached() -> Self {
        Tape { store: None, nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Node reading a stored parameter without copying it.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        self.nodes.push(Node { value: Value::Borrowed(store.get(id)), op: Op::Param(id), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(DlfError::shape(format!("{what} expects a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(DlfError::shape(format!(
                "matmul of {:?} by {:?}: inner dimensions differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), MatRef::new(self.value(a).data(), m, k), MatRef::new(self.value(b).data(), k, n), T::zero(), &mut out);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose { a }, &[a]))
    }

    /// `alpha * op(a[i]) * op(b[i])` for each leading index `i` of two rank-3
    /// tensors, where `op` optionally transposes the trailing matrix.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool, alpha: T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(DlfError::shape(format!("batch_matmul of {sa:?} by {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(DlfError::shape(format!(
                "batch_matmul of {sa:?} by {sb:?} (transpose {ta}/{tb}): inner dimensions differ"
            )));
        }
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        bmm_into(self.value(a).data(), &sa, ta, self.value(b).data(), &sb, tb, alpha, &mut out);
        Ok(self.push(Tensor::new(&[batch, m, n], out)?, Op::BatchMatMul { a, b, ta, tb, alpha }, &[a, b]))
    }

    /// `x * w^T + b` applied to every row of `x` (shape `[.., in]`), with
    /// `w` of shape `[out, in]` and `b` of shape `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (out_dim, in_dim) = self.matrix_dims(w, "linear weight")?;
        let xs = self.shape(x).to_vec();
        if xs.last() != Some(&in_dim) {
            return Err(DlfError::shape(format!(
                "linear input {xs:?} does not end in weight input width {in_dim} (weight {:?})",
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(DlfError::shape(format!("linear bias {:?} for output width {out_dim}", self.shape(b))));
            }
        }
        let rows = self.value(x).outer_rows();
        let mut out = vec![T::zero(); rows * out_dim];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::new(self.value(x).data(), rows, in_dim),
            MatRef::new(self.value(w).data(), out_dim, in_dim).t(),
            beta,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().expect("nonempty") = out_dim;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, &inputs))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = if sa == sb {
            false
        } else if sb.len() == 1 && sa.last() == sb.first() {
            true
        } else {
            return Err(DlfError::shape(format!("{kind:?} of {sa:?} with {sb:?}")));
        };
        let av = self.value(a);
        let bv = self.value(b).data();
        let width = bv.len();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<T> = if broadcast {
            av.data().chunks(width).flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y))).collect()
        } else {
            av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Binary { kind, a, b, broadcast }, &[a, b]))
    }

    /// Element-wise sum; `b` may also be a vector matching the last axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Element-wise (Hadamard) product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale { a, s }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(stable_sigmoid);
        self.push(out, Op::Sigmoid { a }, &[a])
    }

    /// `max(a, floor)` element-wise; gradient is zero where the floor wins.
    pub fn max_scalar(&mut self, a: Var, floor: T) -> Var {
        let out = self.value(a).map(|v| if v > floor { v } else { floor });
        self.push(out, Op::MaxScalar { a, floor }, &[a])
    }

    /// Softmax over the last axis, with row-max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.data().iter().any(|v| v.is_nan()) {
            return Err(DlfError::Numeric("softmax input contains NaN".into()));
        }
        let width = av.last_dim();
        if width == 0 {
            return Err(DlfError::shape("softmax over an empty axis"));
        }
        let mut out = av.data().to_vec();
        out.chunks_mut(width).for_each(softmax_in_place);
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a }, &[a]))
    }

    /// Looks up rows of `table` (`[V, d]`). Output shape is `ids_shape + [d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims(table, "gather table")?;
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(DlfError::shape(format!("{} ids do not fill shape {ids_shape:?}", ids.len())));
        }
        if let Some(pos) = ids.iter().position(|&i| i >= vocab) {
            return Err(DlfError::Index(format!(
                "id {} at flat position {pos} is outside table of {vocab} rows",
                ids[pos]
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| DlfError::shape("concat of zero tensors"))?;
        let lead = &self.shape(first)[..self.shape(first).len().saturating_sub(1)];
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(DlfError::shape(format!(
                    "concat of {:?} with {:?}: leading dimensions differ",
                    self.shape(first),
                    s
                )));
            }
        }
        let rows = self.value(first).outer_rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let width = av.last_dim();
        if start + len > width || av.rank() == 0 {
            return Err(DlfError::shape(format!("slice {start}..{} of {:?}", start + len, av.shape())));
        }
        let out: Vec<T> = av.data().chunks(width).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { a, start }, &[a]))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DlfError::config(format!("dropout rate {rate} must lie in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let av = self.value(a);
        let out: Vec<T> = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Dropout { a, mask }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { a }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().copied().sum::<T>() / T::of(av.numel().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`.
    ///
    /// The value uses probabilities clipped to `[1e-7, 1 - 1e-7]`; the
    /// gradient is `(sigmoid(z) - y) / n`.
    pub fn sigmoid_bce(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != labels.len() {
            return Err(DlfError::shape(format!("{} logits against {} labels", lv.numel(), labels.len())));
        }
        let probs: Vec<f64> = lv.data().iter().map(|&z| stable_sigmoid(z).f64()).collect();
        let ys: Vec<f64> = labels.iter().map(|y| y.f64()).collect();
        let loss = crate::metrics::clipped_bce(&probs, &ys)?;
        Ok(self.push(Tensor::scalar(T::of(loss)), Op::SigmoidBce { logits, labels: labels.to_vec() }, &[logits]))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Backward<T>> {
        if self.value(root).numel() != 1 {
            return Err(DlfError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        let n_params = self.store.map_or(0, ParamStore::len);
        let mut params = Gradients::empty(n_params);
        let mut leaves = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some(g) = grads[idx].take() else { continue };
            let t = Tensor::new(node.value.get().shape(), g)?;
            match node.op {
                Op::Param(id) => params.set(id, t),
                Op::Leaf => {
                    leaves.insert(idx, t);
                }
                _ => {}
            }
        }
        Ok(Backward { params, leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<'_, T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = node.value.get();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b } => {
                let (m, k) = self.matrix_dims(a, "matmul")?;
                let n = out.shape()[1];
                let gm = MatRef::new(g, m, n);
                if self.wants(a) {
                    let ga = slot(grads, a, m * k);
                    gemm(T::one(), gm, MatRef::new(self.value(b).data(), k, n).t(), T::one(), ga);
                }
                if self.wants(b) {
                    let gb = slot(grads, b, k * n);
                    gemm(T::one(), MatRef::new(self.value(a).data(), m, k).t(), gm, T::one(), gb);
                }
            }
            &Op::Transpose { a } => {
                if self.wants(a) {
                    let (r, c) = self.matrix_dims(a, "transpose")?;
                    let ga = slot(grads, a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            &Op::BatchMatMul { a, b, ta, tb, alpha } => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let so = out.shape().to_vec();
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.wants(a) {
                    let ga = slot(grads, a, av.len());
                    // d op(a) = alpha * g * op(b)^T
                    if ta {
                        bmm_into(bv, &sb, tb, g, &so, true, alpha, ga);
                    } else {
                        bmm_into(g, &so, false, bv, &sb, !tb, alpha, ga);
                    }
                }
                if self.wants(b) {
                    let gb = slot(grads, b, bv.len());
                    // d op(b) = alpha * op(a)^T * g
                    if tb {
                        bmm_into(g, &so, true, av, &sa, ta, alpha, gb);
                    } else {
                        bmm_into(av, &sa, !ta, g, &so, false, alpha, gb);
                    }
                }
            }
            &Op::Linear { x, w, b } => {
                let (out_dim, in_dim) = self.matrix_dims(w, "linear weight")?;
                let rows = self.value(x).outer_rows();
                let gm = MatRef::new(g, rows, out_dim);
                if self.wants(x) {
                    let gx = slot(grads, x, rows * in_dim);
                    gemm(T::one(), gm, MatRef::new(self.value(w).data(), out_dim, in_dim), T::one(), gx);
                }
                if self.wants(w) {
                    let gw = slot(grads, w, out_dim * in_dim);
                    gemm(T::one(), gm.t(), MatRef::new(self.value(x).data(), rows, in_dim), T::one(), gw);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let gb = slot(grads, b, out_dim);
                    column_sums_into(g, out_dim, gb);
                }
            }
            &Op::Binary { kind, a, b, broadcast } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let width = bv.len();
                if self.wants(a) {
                    let ga = slot(grads, a, av.len());
                    match kind {
                        Binary::Add | Binary::Sub => add_into(ga, g),
                        Binary::Mul => {
                            for (i, (acc, &gi)) in ga.iter_mut().zip(g).enumerate() {
                                let bi = if broadcast { bv[i % width] } else { bv[i] };
                                *acc = *acc + gi * bi;
                            }
                        }
                    }
                }
                if self.wants(b) {
                    let sign = if kind == Binary::Sub { -T::one() } else { T::one() };
                    let gb = slot(grads, b, width);
                    if broadcast {
                        let mut local = vec![T::zero(); width];
                        for (i, &gi) in g.iter().enumerate() {
                            let term = if kind == Binary::Mul { gi * av[i] } else { gi };
                            local[i % width] = local[i % width] + term;
                        }
                        for (acc, v) in gb.iter_mut().zip(local) {
                            *acc = *acc + sign * v;
                        }
                    } else {
                        for (i, (acc, &gi)) in gb.iter_mut().zip(g).enumerate() {
                            let term = if kind == Binary::Mul { gi * av[i] } else { gi };
                            *acc = *acc + sign * term;
                        }
                    }
                }
            }
            &Op::Scale { a, s } => {
                if self.wants(a) {
                    let ga = slot(grads, a, g.len());
                    for (acc, &gi) in ga.iter_mut().zip(g) {
                        *acc = *acc + s * gi;
                    }
                }
            }
            &Op::Relu { a } => {
                if self.wants(a) {
                    let ga = slot(grads, a, g.len());
                    for ((acc, &gi), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        if y > T::zero() {
                            *acc = *acc + gi;
                        }
                    }
                }
            }
            &Op::Sigmoid { a } => {
                if self.wants(a) {
                    let ga = slot(grads, a, g.len());
                    for ((acc, &gi), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *acc = *acc + gi * y * (T::one() - y);
                    }
                }
            }
            &Op::MaxScalar { a, floor } => {
                if self.wants(a) {
                    let av = self.value(a).data();
                    let ga = slot(grads, a, g.len());
                    for ((acc, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x > floor {
                            *acc = *acc + gi;
                        }
                    }
                }
            }
            &Op::Softmax { a } => {
                if self.wants(a) {
                    let width = out.last_dim();
                    let ga = slot(grads, a, g.len());
                    for ((acc, gr), y) in ga.chunks_mut(width).zip(g.chunks(width)).zip(out.data().chunks(width)) {
                        let dot: T = gr.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                        for ((ai, &gi), &yi) in acc.iter_mut().zip(gr).zip(y) {
                            *ai = *ai + yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let d = self.value(*table).last_dim();
                    let gt = slot(grads, *table, self.value(*table).numel());
                    for (pos, &id) in ids.iter().enumerate() {
                        let row = &mut gt[id * d..(id + 1) * d];
                        add_into(row, &g[pos * d..(pos + 1) * d]);
                    }
                }
            }
            Op::Concat { parts } => {
                let total = out.last_dim();
                let rows = out.outer_rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.wants(p) {
                        let gp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            &Op::Slice { a, start } => {
                if self.wants(a) {
                    let width = self.value(a).last_dim();
                    let len = out.last_dim();
                    let ga = slot(grads, a, self.value(a).numel());
                    for (row, gr) in ga.chunks_mut(width).zip(g.chunks(len)) {
                        add_into(&mut row[start..start + len], gr);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if self.wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((acc, &gi), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *acc = *acc + gi * m;
                    }
                }
            }
            &Op::Reshape { a } => {
                if self.wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
            }
            &Op::Sum { a } => {
                if self.wants(a) {
                    let ga = slot(grads, a, self.value(a).numel());
                    for acc in ga.iter_mut() {
                        *acc = *acc + g[0];
                    }
                }
            }
            &Op::Mean { a } => {
                if self.wants(a) {
                    let n = self.value(a).numel();
                    let share = g[0] / T::of(n.max(1) as f64);
                    let ga = slot(grads, a, n);
                    for acc in ga.iter_mut() {
                        *acc = *acc + share;
                    }
                }
            }
            Op::SigmoidBce { logits, labels } => {
                if self.wants(*logits) {
                    let z = self.value(*logits).data();
                    let n = T::of(labels.len().max(1) as f64);
                    let gl = slot(grads, *logits, z.len());
                    for ((acc, &zi), &y) in gl.iter_mut().zip(z).zip(labels) {
                        *acc = *acc + g[0] * (stable_sigmoid(zi) - y) / n;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
pub struct Backward<T> {
    params: Gradients<T>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Backward<T> {
    /// Gradient with respect to a leaf created by [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> &Gradients<T> {
        &self.params
    }

    pub fn into_params(self) -> Gradients<T> {
        self.params
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

fn column_sums_into<T: Scalar>(g: &[T], width: usize, acc: &mut [T]) {
    for row in g.chunks(width) {
        add_into(acc, row);
    }
}

#[allow(clippy::too_many_arguments)]
fn bmm_into<T: Scalar>(a: &[T], sa: &[usize], ta: bool, b: &[T], sb: &[usize], tb: bool, alpha: T, out: &mut [T]) {
    let (m, _) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
    let n = if tb { sb[1] } else { sb[2] };
    let (a_size, b_size) = (sa[1] * sa[2], sb[1] * sb[2]);
    if m * n == 0 {
        return;
    }
    out.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
        let mut av = MatRef::new(&a[i * a_size..(i + 1) * a_size], sa[1], sa[2]);
        let mut bv = MatRef::new(&b[i * b_size..(i + 1) * b_size], sb[1], sb[2]);
        if ta {
            av = av.t();
        }
        if tb {
            bv = bv.t();
        }
        gemm(alpha, av, bv, T::one(), c);
    });
}

pub(crate) fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

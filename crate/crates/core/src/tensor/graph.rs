use std::borrow::Cow;
use std::rc::Rc;

use rand::Rng;

use super::kernels::{matmul, matmul_nt, matmul_tn_acc};
use super::{axis_extents, shape_err, Float, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchedMatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Gather { a: Var, index: Vec<usize> },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gelu { a: Var },
    SumAll { a: Var },
    SumAxis { a: Var, axis: usize },
    MaxAxis { a: Var, axis: usize, argmax: Vec<usize> },
    Rope { a: Var, table: Rc<RopeTable<T>> },
    Dropout { a: Var, mask: Vec<T> },
}

struct Node<'a, T: Float> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of tensor operations, differentiated in reverse with
/// [`Graph::backward`].
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. When gradients are disabled no backward state is kept.
pub struct Graph<'a, T: Float> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
    checked: bool,
    params: Vec<(ParamId, Var)>,
}

impl<'a, T: Float> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Float> Graph<'a, T> {
    /// A graph that records backward state. Checked mode is on.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            checked: true,
            params: Vec::new(),
        }
    }

    /// A graph for forward-only evaluation.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// In checked mode every op verifies its output is finite.
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a parameter onto the graph; repeated calls return the same node
    /// so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((id, v));
        v
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::Numeric { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[.., m, k] · [k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = if k == 0 { sa[..sa.len() - 1].iter().product() } else { self.value(a).len() / k };
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![T::zero(); m * n];
        matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::MatMul { a, b }, &[a, b], "matmul")
    }

    /// `[B, m, k] · [B, k, n] -> [B, m, n]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batched_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..bs {
                matmul(
                    &da[i * m * k..(i + 1) * m * k],
                    &db[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        self.push(value, Op::BatchedMatMul { a, b }, &[a, b], "batched_matmul")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose", format!("rank {} < 2", s.len())));
        }
        let value = transpose_last2(self.value(a));
        self.push(value, Op::Transpose { a }, &[a], "transpose")
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, format!("{sa:?} with {sb:?}")));
        }
        Ok(())
    }

    /// Elementwise sum; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add", a, b)?;
        let va = self.value(a);
        let data = broadcast_zip(va.data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Add { a, b }, &[a, b], "add")
    }

    /// Elementwise product; `b` may broadcast over leading dimensions of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul", a, b)?;
        let va = self.value(a);
        let data = broadcast_zip(va.data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Mul { a, b }, &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let value = self.value(a).map(|x| x * f);
        self.push(value, Op::Scale { a, factor: f }, &[a], "scale")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape_err("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
            "concat",
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("slice", format!("{s:?} axis {axis} [{start}, {})", start + len)));
        }
        let (outer, n, inner) = axis_extents(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * n * inner + start * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Slice { a, axis, start }, &[a], "slice")
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push(value, Op::Reshape { a }, &[a], "reshape")
    }

    /// Row lookup: `table: [V, d]`, returns `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(shape_err("embedding", format!("table shape {:?}", t.shape())));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(shape_err("embedding", format!("id {id} >= {rows}")));
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "embedding",
        )
    }

    /// Picks one element per row along the last axis.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.rows_cols();
        if t.rank() == 0 || index.len() != rows {
            return Err(shape_err("gather", format!("{:?} with {} indices", t.shape(), index.len())));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &c) in index.iter().enumerate() {
            if c >= cols {
                return Err(shape_err("gather", format!("index {c} >= {cols}")));
            }
            data.push(t.data()[r * cols + c]);
        }
        let shape = t.shape()[..t.rank() - 1].to_vec();
        let value = Tensor::new(shape, data)?;
        self.push(
            value,
            Op::Gather {
                a,
                index: index.to_vec(),
            },
            &[a],
            "gather",
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = softmax_along(self.value(a), axis, false)?;
        self.push(value, Op::Softmax { a, axis }, &[a], "softmax")
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = softmax_along(self.value(a), axis, true)?;
        self.push(value, Op::LogSoftmax { a, axis }, &[a], "log_softmax")
    }

    /// Normalises over the last axis, then applies `gamma`/`beta` of shape `[d]`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let (rows, d) = t.rows_cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", format!("{:?} with gamma {:?}", t.shape(), self.shape(gamma))));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        let dn = T::from_f64(d as f64);
        let eps = T::from_f64(eps);
        for r in 0..rows {
            let x = &t.data()[r * d..(r + 1) * d];
            let mean = x.iter().copied().sum::<T>() / dn;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (x[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[a, gamma, beta],
            "layer_norm",
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu_fwd);
        self.push(value, Op::Gelu { a }, &[a], "gelu")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll { a }, &[a], "sum_all")
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} for {s:?}")));
        }
        let (outer, n, inner) = axis_extents(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::SumAxis { a, axis }, &[a], "sum_axis")
    }

    /// Maximum along `axis`; ties route the gradient to the first maximum.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(shape_err("max_axis", format!("axis {axis} for {s:?}")));
        }
        let (outer, n, inner) = axis_extents(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut best = src[o * n * inner + j];
                let mut best_i = 0;
                for i in 1..n {
                    let v = src[(o * n + i) * inner + j];
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                out[o * inner + j] = best;
                argmax[o * inner + j] = best_i;
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::MaxAxis { a, axis, argmax }, &[a], "max_axis")
    }

    /// Rotary embedding on `[L, d]` rows: consecutive pairs `(2i, 2i+1)` of row
    /// `r` rotate by `positions[r] * base^(-2i/d)`.
    pub fn rope(&mut self, a: Var, positions: &[usize], base: f64) -> Result<Var> {
        let d = self.shape(a).last().copied().unwrap_or(0);
        let table = Rc::new(RopeTable::new(positions, d, base)?);
        self.rope_with(a, &table)
    }

    /// [`Graph::rope`] with precomputed angles, shared across heads and layers.
    pub fn rope_with(&mut self, a: Var, table: &Rc<RopeTable<T>>) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.shape()[0] != table.rows || t.shape()[1] != table.dim {
            return Err(shape_err(
                "rope",
                format!("{:?} with a {}x{} table", t.shape(), table.rows, table.dim),
            ));
        }
        let mut out = t.data().to_vec();
        rotate_pairs(&mut out, &table.cos, &table.sin, table.dim, false);
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::Rope { a, table: Rc::clone(table) }, &[a], "rope")
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(TensorError::Contract(format!("dropout probability {p} >= 1")));
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let t = self.value(a);
        let mask: Vec<T> = (0..t.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Dropout { a, mask }, &[a], "dropout")
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Visits each recorded node once, last to first. Parameters that the loss
    /// does not reach report zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        }
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign_tensor(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = if k == 0 { 0 } else { va.len() / k };
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    matmul_nt(g.data(), vb.data(), m, n, k, &mut ga);
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    matmul_tn_acc(va.data(), g.data(), m, k, n, &mut gb);
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
            }
            Op::BatchedMatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        matmul_nt(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        matmul_tn_acc(
                            &va.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
            }
            Op::Transpose { a } => {
                self.accumulate(grads, *a, transpose_last2(g));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let vb = self.value(*b);
                    self.accumulate(grads, *b, fold_broadcast(g.data(), vb.shape())?);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = broadcast_zip(g.data(), vb.data(), |x, y| x * y);
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                }
                if self.requires_grad(*b) {
                    let prod: Vec<T> = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, fold_broadcast(&prod, vb.shape())?);
                }
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                self.accumulate(grads, *a, g.map(|x| x * f));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let s = self.shape(v).to_vec();
                    let len = s[*axis];
                    if self.requires_grad(v) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        self.accumulate(grads, v, Tensor::new(s, data)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let s = self.shape(*a).to_vec();
                let (outer, n, inner) = axis_extents(&s, *axis);
                let len = out.shape()[*axis];
                let mut data = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    data[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, Tensor::new(s, data)?);
            }
            Op::Reshape { a } => {
                let s = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(s)?);
            }
            Op::Embedding { table, ids } => {
                let s = self.shape(*table).to_vec();
                let d = s[1];
                let mut data = vec![T::zero(); s[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, &v) in data[id * d..(id + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *dst += v;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(s, data)?);
            }
            Op::Gather { a, index } => {
                let va = self.value(*a);
                let (_, cols) = va.rows_cols();
                let mut data = vec![T::zero(); va.len()];
                for (r, &c) in index.iter().enumerate() {
                    data[r * cols + c] = g.data()[r];
                }
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), data)?);
            }
            Op::Softmax { a, axis } => {
                let (outer, n, inner) = axis_extents(out.shape(), *axis);
                let y = out.data();
                let mut data = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let dot: T = (0..n).map(|i| g.data()[at(i)] * y[at(i)]).sum();
                        for i in 0..n {
                            data[at(i)] = y[at(i)] * (g.data()[at(i)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::LogSoftmax { a, axis } => {
                let (outer, n, inner) = axis_extents(out.shape(), *axis);
                let y = out.data();
                let mut data = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let gsum: T = (0..n).map(|i| g.data()[at(i)]).sum();
                        for i in 0..n {
                            data[at(i)] = g.data()[at(i)] - y[at(i)].exp() * gsum;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = inv_std.len();
                let gm = self.value(*gamma).data();
                let dn = T::from_f64(d as f64);
                if self.requires_grad(*a) {
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_x = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            mean_dxh += dxh;
                            mean_dxh_x += dxh * xr[j];
                        }
                        mean_dxh /= dn;
                        mean_dxh_x /= dn;
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            dx[r * d + j] = inv_std[r] * (dxh - mean_dxh - xr[j] * mean_dxh_x);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), dx)?);
                }
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g.data()[r * d + j] * xhat[r * d + j];
                            db[j] += g.data()[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(vec![d], dg)?);
                    self.accumulate(grads, *beta, Tensor::new(vec![d], db)?);
                }
            }
            Op::Gelu { a } => {
                let va = self.value(*a);
                let data = va.data().iter().zip(g.data()).map(|(&x, &gv)| gv * gelu_grad(x)).collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), data)?);
            }
            Op::SumAll { a } => {
                let s = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(s, g.data()[0]));
            }
            Op::SumAxis { a, axis } => {
                let s = self.shape(*a).to_vec();
                let (outer, n, inner) = axis_extents(&s, *axis);
                let mut data = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for i in 0..n {
                        data[(o * n + i) * inner..(o * n + i + 1) * inner]
                            .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(s, data)?);
            }
            Op::MaxAxis { a, axis, argmax } => {
                let s = self.shape(*a).to_vec();
                let (outer, n, inner) = axis_extents(&s, *axis);
                let mut data = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for j in 0..inner {
                        let i = argmax[o * inner + j];
                        data[(o * n + i) * inner + j] = g.data()[o * inner + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(s, data)?);
            }
            Op::Rope { a, table } => {
                let mut data = g.data().to_vec();
                rotate_pairs(&mut data, &table.cos, &table.sin, table.dim, true);
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::Dropout { a, mask } => {
                let data = g.data().iter().zip(mask).map(|(&x, &m)| x * m).collect();
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// One gradient per parameter of `store`, zero where the loss does not
    /// reach the parameter.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
            })
            .collect()
    }
}

fn transpose_last2<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let r = s.len();
    let (m, n) = (s[r - 2], s[r - 1]);
    let batch = if m * n == 0 { 0 } else { t.len() / (m * n) };
    let mut data = vec![T::zero(); t.len()];
    for b in 0..batch {
        let src = &t.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut data[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor { shape, data }
}

/// `f(a[i], b[i mod len(b)])`; `len(b)` divides `len(a)`.
fn broadcast_zip<T: Float>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    if b.is_empty() {
        return out;
    }
    for chunk in a.chunks_exact(b.len()) {
        out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
    }
    out
}

fn fold_broadcast<T: Float>(g: &[T], shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let mut data = vec![T::zero(); n];
    if n > 0 {
        for chunk in g.chunks(n) {
            for (d, &v) in data.iter_mut().zip(chunk) {
                *d += v;
            }
        }
    }
    Tensor::new(shape.to_vec(), data)
}

fn softmax_along<T: Float>(t: &Tensor<T>, axis: usize, log: bool) -> Result<Tensor<T>> {
    if axis >= t.rank() {
        return Err(shape_err("softmax", format!("axis {axis} for {:?}", t.shape())));
    }
    let (outer, n, inner) = axis_extents(t.shape(), axis);
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    if inner == 1 {
        for (x, y) in src.chunks_exact(n.max(1)).zip(out.chunks_exact_mut(n.max(1))) {
            softmax_row(x, y, log);
        }
        return Tensor::new(t.shape().to_vec(), out);
    }
    let mut x = vec![T::zero(); n];
    let mut y = vec![T::zero(); n];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * n + i) * inner + j;
            for i in 0..n {
                x[i] = src[at(i)];
            }
            softmax_row(&x, &mut y, log);
            for i in 0..n {
                out[at(i)] = y[i];
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn softmax_row<T: Float>(x: &[T], y: &mut [T], log: bool) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in y.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    if log {
        let ls = sum.ln();
        for (o, &v) in y.iter_mut().zip(x) {
            *o = v - max - ls;
        }
    } else {
        let inv = T::one() / sum;
        for o in y.iter_mut() {
            *o *= inv;
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_fwd<T: Float>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let k = T::from_f64(GELU_C);
    // 0.5·x·(1 + tanh(u)) written as x·sigmoid(2u).
    x / (T::one() + (-(c + c) * (x + k * x * x * x)).exp())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let k = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = T::one() - (T::one() + T::one()) / (T::one() + ((c + c) * (x + k * x * x * x)).exp());
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Per-row rotary angles for a fixed position list and head dimension.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    rows: usize,
    dim: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Float> RopeTable<T> {
    pub fn new(positions: &[usize], dim: usize, base: f64) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(shape_err("rope", format!("odd dimension {dim}")));
        }
        let (cos, sin) = rope_tables(positions, dim, base);
        Ok(Self {
            rows: positions.len(),
            dim,
            cos,
            sin,
        })
    }
}

/// Per-row cos/sin tables for rotary embedding, computed in f64.
pub(crate) fn rope_tables<T: Float>(positions: &[usize], d: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = d / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / d as f64);
            let angle = p as f64 * freq;
            cos.push(T::from_f64(angle.cos()));
            sin.push(T::from_f64(angle.sin()));
        }
    }
    (cos, sin)
}

pub(crate) fn rotate_pairs<T: Float>(data: &mut [T], cos: &[T], sin: &[T], d: usize, inverse: bool) {
    let half = d / 2;
    for (r, row) in data.chunks_mut(d).enumerate() {
        for i in 0..half {
            let (c, mut s) = (cos[r * half + i], sin[r * half + i]);
            if inverse {
                s = -s;
            }
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * c - x1 * s;
            row[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::check_gradients;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn store(shapes: &[(&str, &[usize])]) -> ParamStore<f64> {
        let mut r = rng();
        let mut s = ParamStore::new();
        for (name, shape) in shapes {
            s.add(*name, Tensor::randn(shape.to_vec(), 1.0, &mut r), true);
        }
        s
    }

    /// `sum(out ⊙ R)` for a fixed random `R`, so every output element gets a
    /// distinct upstream gradient.
    fn weighted_sum<'a>(g: &mut Graph<'a, f64>, out: Var) -> Result<Var> {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let w = Tensor::randn(g.shape(out).to_vec(), 1.0, &mut r);
        let w = g.constant(w);
        let p = g.mul(out, w)?;
        g.sum_all(p)
    }

    fn assert_grads<F>(s: &ParamStore<f64>, f: F)
    where
        F: for<'a> Fn(&mut Graph<'a, f64>, &'a ParamStore<f64>) -> Result<Var>,
    {
        let report = check_gradients(s, 1e-5, 1e-3, 1, f).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    fn p<'a>(g: &mut Graph<'a, f64>, s: &'a ParamStore<f64>, name: &str) -> Var {
        g.param(s, s.find(name).unwrap())
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_fn(vec![3, 4], |i| i as f64 * 0.5 - 1.0);
        let eye = Tensor::from_fn(vec![4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let mut g = Graph::<f64>::inference();
        let (va, vi) = (g.constant(a.clone()), g.constant(eye));
        let out = g.matmul(va, vi).unwrap();
        assert_eq!(g.value(out), &a);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(Tensor::randn(vec![5, 17], 3.0, &mut rng()));
        let y = g.softmax(x, 1).unwrap();
        for r in 0..5 {
            let s: f32 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn simple_backward_cases() {
        let s = store(&[("w", &[2, 3])]);
        let mut g = Graph::new();
        let w = p(&mut g, &s, "w");
        let l = g.sum_all(w).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let w = p(&mut g, &s, "w");
        let sq = g.mul(w, w).unwrap();
        let l = g.sum_all(sq).unwrap();
        let grads = g.backward(l).unwrap();
        for (gv, wv) in grads.get(w).unwrap().data().iter().zip(s.get(s.find("w").unwrap()).data()) {
            assert_eq!(*gv, 2.0 * wv);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let s = store(&[("w", &[2])]);
        let mut g = Graph::new();
        let w = p(&mut g, &s, "w");
        assert!(matches!(g.backward(w), Err(TensorError::Contract(_))));
    }

    #[test]
    fn unreachable_params_get_zeros() {
        let s = store(&[("a", &[3]), ("b", &[2, 2])]);
        let mut g = Graph::new();
        let a = p(&mut g, &s, "a");
        let l = g.sum_all(a).unwrap();
        let grads = g.backward(l).unwrap().param_grads(&s);
        assert_eq!(grads[1], Tensor::zeros(vec![2, 2]));
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2], vec![f64::INFINITY, 1.0]).unwrap());
        assert!(matches!(g.scale(x, 0.0), Err(TensorError::Numeric { .. })));
        g.set_checked(false);
        assert!(g.scale(x, 0.0).is_ok());
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::inference();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
        let c = g.constant(Tensor::zeros(vec![2]));
        assert!(g.add(a, c).is_err());
        assert!(g.embedding(a, &[2]).is_err());
    }

    #[test]
    fn grad_matmul_and_batched() {
        let s = store(&[("a", &[2, 3, 4]), ("b", &[4, 5]), ("c", &[2, 4, 3])]);
        assert_grads(&s, |g, s| {
            let (a, b) = (p(g, s, "a"), p(g, s, "b"));
            let y = g.matmul(a, b)?;
            weighted_sum(g, y)
        });
        assert_grads(&s, |g, s| {
            let (a, c) = (p(g, s, "a"), p(g, s, "c"));
            let y = g.batched_matmul(a, c)?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn grad_elementwise_and_broadcast() {
        let s = store(&[("a", &[3, 4]), ("b", &[4]), ("c", &[3, 4])]);
        assert_grads(&s, |g, s| {
            let (a, b) = (p(g, s, "a"), p(g, s, "b"));
            let y = g.add(a, b)?;
            let z = g.mul(y, b)?;
            let c = p(g, s, "c");
            let w = g.mul(z, c)?;
            let w = g.scale(w, -0.7)?;
            weighted_sum(g, w)
        });
    }

    #[test]
    fn grad_structural_ops() {
        let s = store(&[("a", &[2, 3, 4]), ("b", &[2, 2, 4])]);
        assert_grads(&s, |g, s| {
            let (a, b) = (p(g, s, "a"), p(g, s, "b"));
            let c = g.concat(&[a, b, a], 1)?;
            let d = g.slice(c, 1, 2, 4)?;
            let e = g.reshape(d, vec![4, 8])?;
            let f = g.transpose(e)?;
            weighted_sum(g, f)
        });
    }

    #[test]
    fn grad_lookup_ops() {
        let s = store(&[("t", &[5, 3]), ("x", &[4, 6])]);
        assert_grads(&s, |g, s| {
            let t = p(g, s, "t");
            let e = g.embedding(t, &[1, 4, 1, 0])?;
            weighted_sum(g, e)
        });
        assert_grads(&s, |g, s| {
            let x = p(g, s, "x");
            let e = g.gather(x, &[5, 0, 2, 2])?;
            weighted_sum(g, e)
        });
    }

    #[test]
    fn grad_normalisers_and_activations() {
        let s = store(&[("x", &[3, 5]), ("gamma", &[5]), ("beta", &[5])]);
        for axis in 0..2 {
            assert_grads(&s, move |g, s| {
                let x = p(g, s, "x");
                let y = g.softmax(x, axis)?;
                weighted_sum(g, y)
            });
            assert_grads(&s, move |g, s| {
                let x = p(g, s, "x");
                let y = g.log_softmax(x, axis)?;
                weighted_sum(g, y)
            });
        }
        assert_grads(&s, |g, s| {
            let (x, ga, be) = (p(g, s, "x"), p(g, s, "gamma"), p(g, s, "beta"));
            let y = g.layer_norm(x, ga, be, 1e-5)?;
            weighted_sum(g, y)
        });
        assert_grads(&s, |g, s| {
            let x = p(g, s, "x");
            let y = g.gelu(x)?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn grad_reductions_and_rope() {
        let s = store(&[("x", &[3, 4, 2]), ("q", &[3, 6])]);
        for axis in 0..3 {
            assert_grads(&s, move |g, s| {
                let x = p(g, s, "x");
                let y = g.sum_axis(x, axis)?;
                weighted_sum(g, y)
            });
            assert_grads(&s, move |g, s| {
                let x = p(g, s, "x");
                let y = g.max_axis(x, axis)?;
                weighted_sum(g, y)
            });
        }
        assert_grads(&s, |g, s| {
            let q = p(g, s, "q");
            let y = g.rope(q, &[0, 7, 130], 10000.0)?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn grad_dropout_uses_its_mask() {
        let s = store(&[("x", &[4, 4])]);
        assert_grads(&s, |g, s| {
            let x = p(g, s, "x");
            let mut r = ChaCha8Rng::seed_from_u64(3);
            let y = g.dropout(x, 0.3, &mut r)?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn grad_small_mlp() {
        let s = store(&[("w1", &[4, 8]), ("b1", &[8]), ("w2", &[8, 3]), ("x", &[5, 4])]);
        assert_grads(&s, |g, s| {
            let x = p(g, s, "x");
            let w1 = p(g, s, "w1");
            let h = g.matmul(x, w1)?;
            let b1 = p(g, s, "b1");
            let h = g.add(h, b1)?;
            let h = g.gelu(h)?;
            let w2 = p(g, s, "w2");
            let o = g.matmul(h, w2)?;
            let ls = g.log_softmax(o, 1)?;
            let picked = g.gather(ls, &[0, 2, 1, 1, 0])?;
            let total = g.sum_all(picked)?;
            g.scale(total, -0.2)
        });
    }

    #[test]
    fn backward_is_linear() {
        let s = store(&[("w", &[3, 3])]);
        let build = |g: &mut Graph<'_, f64>, w: Var, a: f64, b: f64| -> Var {
            let t = g.gelu(w).unwrap();
            let l1 = g.sum_all(t).unwrap();
            let sm = g.softmax(w, 1).unwrap();
            let l2 = weighted_sum(g, sm).unwrap();
            let l1 = g.scale(l1, a).unwrap();
            let l2 = g.scale(l2, b).unwrap();
            g.add(l1, l2).unwrap()
        };
        let grad = |a, b| {
            let mut g = Graph::new();
            let w = p(&mut g, &s, "w");
            let l = build(&mut g, w, a, b);
            g.backward(l).unwrap().param_grads(&s).remove(0)
        };
        let (g1, g2, gc) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(2.5, -1.5));
        for i in 0..9 {
            let want = 2.5 * g1.data()[i] - 1.5 * g2.data()[i];
            assert!((gc.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut g = Graph::<f64>::inference();
        let q = Tensor::randn(vec![1, 8], 1.0, &mut rng());
        let v = g.constant(q.clone());
        let r = g.rope(v, &[0], 10000.0).unwrap();
        assert_eq!(g.value(r), &q);
    }
}

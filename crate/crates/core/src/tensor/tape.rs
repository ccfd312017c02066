use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::kernels::{
    broadcast_offsets, broadcast_shape, matmul_into, matmul_nt_into, matmul_tn_into,
};
use super::{Result, Scalar, Tensor, TensorError};

/// Additive logit mask. Softmax rows whose maximum sits at or below half of
/// this value are treated as fully masked and produce zeros.
pub const MASK_SENTINEL: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    LogSigmoid,
}

enum Op<T> {
    Leaf,
    Binary { kind: BinKind, a: usize, b: usize },
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Unary { kind: UnKind, x: usize },
    Clamp { x: usize, lo: T, hi: T },
    Scale { x: usize, c: T },
    AddScalar { x: usize },
    Softmax { x: usize, axis: usize },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SumAll { x: usize },
    MeanAll { x: usize },
    SumAxis { x: usize, axis: usize },
    MeanAxis { x: usize, axis: usize },
    Gather {
        table: usize,
        indices: Vec<usize>,
        padding: Option<usize>,
    },
    ConcatCols { parts: Vec<usize> },
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    StraightThrough { soft: usize, gate: Vec<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a computation. Node ids are assigned in creation
/// order, so every node's inputs precede it and reverse id order is a valid
/// reverse topological order.
///
/// A tape is single-threaded; run independent forwards on separate tapes.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
    masked_rows: Cell<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            masked_rows: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of softmax rows that were entirely masked and zeroed.
    pub fn masked_softmax_rows(&self) -> usize {
        self.masked_rows.get()
    }

    /// Registers a leaf whose gradient is accumulated by [`Tape::backward`].
    pub fn leaf(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.push(value.into(), Op::Leaf, true)
    }

    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.push(value.into(), Op::Leaf, false)
    }

    fn push(&self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let rg = self.needs_grad(inputs);
        self.push(Arc::new(value), op, rg)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.borrow().get(var.id).cloned().flatten()
    }

    pub fn take_grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.borrow_mut().get_mut(var.id).and_then(Option::take)
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    /// Back-propagates from a scalar root. Leaf gradients accumulate
    /// additively across calls until [`Tape::zero_grad`].
    pub fn backward(&self, root: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor<T>>> = Vec::new();
        adj.resize_with(root.id + 1, || None);
        adj[root.id] = Some(Tensor::ones(root_value.shape().to_vec()));

        let mut leaf_grads = self.grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize_with(nodes.len(), || None);
        }

        for id in (0..=root.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
            let want = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    match &mut leaf_grads[id] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot => *slot = Some(g),
                    }
                }
                Op::Binary { kind, a, b } => {
                    let (a, b) = (*a, *b);
                    let av = val(a);
                    let bv = val(b);
                    let out_shape = g.shape();
                    let oa = broadcast_offsets(out_shape, av.shape());
                    let ob = broadcast_offsets(out_shape, bv.shape());
                    let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                    if want(a) {
                        let mut ga = vec![T::zero(); av.numel()];
                        for (i, &gi) in gd.iter().enumerate() {
                            let d = match kind {
                                BinKind::Add | BinKind::Sub => gi,
                                BinKind::Mul => gi * bd[ob[i]],
                                BinKind::Div => {
                                    let den = bd[ob[i]];
                                    if den == T::zero() {
                                        T::zero()
                                    } else {
                                        gi / den
                                    }
                                }
                            };
                            ga[oa[i]] = ga[oa[i]] + d;
                        }
                        accumulate(&mut adj, a, Tensor::new(av.shape().to_vec(), ga)?)?;
                    }
                    if want(b) {
                        let mut gb = vec![T::zero(); bv.numel()];
                        for (i, &gi) in gd.iter().enumerate() {
                            let d = match kind {
                                BinKind::Add => gi,
                                BinKind::Sub => -gi,
                                BinKind::Mul => gi * ad[oa[i]],
                                BinKind::Div => {
                                    let den = bd[ob[i]];
                                    if den == T::zero() {
                                        T::zero()
                                    } else {
                                        -gi * ad[oa[i]] / (den * den)
                                    }
                                }
                            };
                            gb[ob[i]] = gb[ob[i]] + d;
                        }
                        accumulate(&mut adj, b, Tensor::new(bv.shape().to_vec(), gb)?)?;
                    }
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = val(a).dims2()?;
                    let (_, n) = val(b).dims2()?;
                    if want(a) {
                        let mut ga = vec![T::zero(); m * k];
                        matmul_nt_into(g.data(), val(b).data(), &mut ga, m, n, k);
                        accumulate(&mut adj, a, Tensor::new(vec![m, k], ga)?)?;
                    }
                    if want(b) {
                        let mut gb = vec![T::zero(); k * n];
                        matmul_tn_into(val(a).data(), g.data(), &mut gb, k, m, n);
                        accumulate(&mut adj, b, Tensor::new(vec![k, n], gb)?)?;
                    }
                }
                Op::Transpose { x } => {
                    accumulate(&mut adj, *x, transpose2(&g)?)?;
                }
                Op::Unary { kind, x } => {
                    let xv = val(*x);
                    let y = &node.value;
                    let gx: Vec<T> = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .zip(y.data())
                        .map(|((&gi, &xi), &yi)| match kind {
                            UnKind::Relu => {
                                if xi > T::zero() {
                                    gi
                                } else {
                                    T::zero()
                                }
                            }
                            UnKind::Sigmoid => gi * yi * (T::one() - yi),
                            UnKind::Exp => gi * yi,
                            UnKind::Log => gi / xi,
                            UnKind::LogSigmoid => gi * sigmoid(-xi),
                        })
                        .collect();
                    accumulate(&mut adj, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = val(*x);
                    let gx = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { T::zero() })
                        .collect();
                    accumulate(&mut adj, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                }
                Op::Scale { x, c } => {
                    accumulate(&mut adj, *x, g.map(|v| v * *c))?;
                }
                Op::AddScalar { x } => {
                    accumulate(&mut adj, *x, g)?;
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let (outer, len, inner) = split_axis(y.shape(), *axis);
                    let (yd, gd) = (y.data(), g.data());
                    let mut gx = vec![T::zero(); yd.len()];
                    for o in 0..outer {
                        for n in 0..inner {
                            let at = |i: usize| o * len * inner + i * inner + n;
                            let dot: T = (0..len).map(|i| gd[at(i)] * yd[at(i)]).sum();
                            for i in 0..len {
                                gx[at(i)] = yd[at(i)] * (gd[at(i)] - dot);
                            }
                        }
                    }
                    accumulate(&mut adj, *x, Tensor::new(y.shape().to_vec(), gx)?)?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = val(*gamma);
                    let d = gv.numel();
                    let rows = xhat.len() / d;
                    let gd = g.data();
                    if want(*x) {
                        let mut gx = vec![T::zero(); xhat.len()];
                        let dn = T::from_f64(d as f64);
                        for r in 0..rows {
                            let gr = &gd[r * d..(r + 1) * d];
                            let xr = &xhat[r * d..(r + 1) * d];
                            let dxhat: Vec<T> =
                                gr.iter().zip(gv.data()).map(|(&a, &b)| a * b).collect();
                            let mean_dxhat = dxhat.iter().copied().sum::<T>() / dn;
                            let mean_dxhat_xhat =
                                dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                            for j in 0..d {
                                gx[r * d + j] =
                                    inv_std[r] * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_xhat);
                            }
                        }
                        accumulate(&mut adj, *x, Tensor::new(val(*x).shape().to_vec(), gx)?)?;
                    }
                    if want(*gamma) {
                        let mut gg = vec![T::zero(); d];
                        for r in 0..rows {
                            for j in 0..d {
                                gg[j] = gg[j] + gd[r * d + j] * xhat[r * d + j];
                            }
                        }
                        accumulate(&mut adj, *gamma, Tensor::new(gv.shape().to_vec(), gg)?)?;
                    }
                    if want(*beta) {
                        let mut gb = vec![T::zero(); d];
                        for r in 0..rows {
                            for j in 0..d {
                                gb[j] = gb[j] + gd[r * d + j];
                            }
                        }
                        accumulate(&mut adj, *beta, Tensor::new(val(*beta).shape().to_vec(), gb)?)?;
                    }
                }
                Op::SumAll { x } | Op::MeanAll { x } => {
                    let xv = val(*x);
                    let mut s = g.data()[0];
                    if matches!(node.op, Op::MeanAll { .. }) {
                        s = s / T::from_f64(xv.numel() as f64);
                    }
                    accumulate(&mut adj, *x, Tensor::full(xv.shape().to_vec(), s))?;
                }
                Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                    let xv = val(*x);
                    let (outer, len, inner) = split_axis(xv.shape(), *axis);
                    let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                        T::one() / T::from_f64(len as f64)
                    } else {
                        T::one()
                    };
                    let gd = g.data();
                    let mut gx = vec![T::zero(); xv.numel()];
                    for o in 0..outer {
                        for i in 0..len {
                            for n in 0..inner {
                                gx[o * len * inner + i * inner + n] = gd[o * inner + n] * scale;
                            }
                        }
                    }
                    accumulate(&mut adj, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                }
                Op::Gather {
                    table,
                    indices,
                    padding,
                } => {
                    let tv = val(*table);
                    let (_, d) = tv.dims2()?;
                    let mut gt = vec![T::zero(); tv.numel()];
                    for (r, &idx) in indices.iter().enumerate() {
                        if Some(idx) == *padding {
                            continue;
                        }
                        let src = &g.data()[r * d..(r + 1) * d];
                        for (dst, &s) in gt[idx * d..(idx + 1) * d].iter_mut().zip(src) {
                            *dst = *dst + s;
                        }
                    }
                    accumulate(&mut adj, *table, Tensor::new(tv.shape().to_vec(), gt)?)?;
                }
                Op::ConcatCols { parts } => {
                    let (rows, total) = g.dims2()?;
                    let mut start = 0;
                    for &p in parts {
                        let (_, w) = val(p).dims2()?;
                        if want(p) {
                            let mut gp = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                gp.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                            }
                            accumulate(&mut adj, p, Tensor::new(vec![rows, w], gp)?)?;
                        }
                        start += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let (rows, cols) = xv.dims2()?;
                    let (_, w) = g.dims2()?;
                    let mut gx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        gx[r * cols + start..r * cols + start + w]
                            .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut adj, *x, Tensor::new(vec![rows, cols], gx)?)?;
                }
                Op::SliceRows { x, start } => {
                    let xv = val(*x);
                    let (_, cols) = xv.dims2()?;
                    let mut gx = vec![T::zero(); xv.numel()];
                    gx[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                    accumulate(&mut adj, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                }
                Op::StraightThrough { soft, gate } => {
                    let gs = g
                        .data()
                        .iter()
                        .zip(gate)
                        .map(|(&gi, &w)| gi * w)
                        .collect();
                    accumulate(&mut adj, *soft, Tensor::new(g.shape().to_vec(), gs)?)?;
                }
            }
        }
        Ok(())
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm<'t>(
        &'t self,
        x: Var<'t, T>,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: T,
    ) -> Result<Var<'t, T>> {
        let xv = x.value();
        let gv = gamma.value();
        let bv = beta.value();
        let d = *xv.shape().last().unwrap_or(&0);
        if gv.numel() != d || bv.numel() != d {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.numel() / d.max(1);
        let dn = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.record(
            value,
            Op::LayerNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            &[x.id, gamma.id, beta.id],
        ))
    }

    /// Row lookup `table[indices[i]]`. Rows equal to `padding` receive no gradient.
    pub fn gather_rows<'t>(
        &'t self,
        table: Var<'t, T>,
        indices: &[usize],
        padding: Option<usize>,
    ) -> Result<Var<'t, T>> {
        let tv = table.value();
        let (rows, d) = tv.dims2()?;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            if idx >= rows {
                return Err(TensorError::Index {
                    index: idx,
                    size: rows,
                });
            }
            out.extend_from_slice(tv.row(idx));
        }
        let value = Tensor::new(vec![indices.len(), d], out)?;
        Ok(self.record(
            value,
            Op::Gather {
                table: table.id,
                indices: indices.to_vec(),
                padding,
            },
            &[table.id],
        ))
    }

    /// Concatenation of 2-D tensors along the last axis.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = values.first().map(|v| v.dims2()).transpose()?.map_or(0, |(r, _)| r);
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let (r, w) = v.dims2()?;
            if r != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.record(value, Op::ConcatCols { parts: ids.clone() }, &ids))
    }

    /// Forward value `hard`; backward passes the gradient to `soft`, scaled
    /// elementwise by `gate`.
    pub fn straight_through<'t>(
        &'t self,
        hard: Tensor<T>,
        soft: Var<'t, T>,
        gate: Vec<T>,
    ) -> Result<Var<'t, T>> {
        let sv = soft.value();
        if hard.shape() != sv.shape() || gate.len() != hard.numel() {
            return Err(TensorError::Shape {
                op: "straight_through",
                lhs: hard.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        Ok(self.record(
            hard,
            Op::StraightThrough {
                soft: soft.id,
                gate,
            },
            &[soft.id],
        ))
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) -> Result<()> {
    match &mut adj[id] {
        Some(acc) => acc.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x) = -softplus(-x)`, stable on both tails.
fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    fn binary(self, other: Var<'t, T>, kind: BinKind, name: &'static str) -> Result<Var<'t, T>> {
        let av = self.value();
        let bv = other.value();
        let out_shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| TensorError::Shape {
            op: name,
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        })?;
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => {
                if y == T::zero() {
                    T::zero()
                } else {
                    x / y
                }
            }
        };
        let data: Vec<T> = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(&out_shape, av.shape());
            let ob = broadcast_offsets(&out_shape, bv.shape());
            oa.iter()
                .zip(&ob)
                .map(|(&i, &j)| f(av.data()[i], bv.data()[j]))
                .collect()
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.tape.record(
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    /// Hadamard product with broadcasting.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    /// Elementwise quotient; a zero denominator yields zero and no gradient.
    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinKind::Div, "div")
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let av = self.value();
        let bv = other.value();
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.tape.record(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(other.transpose()?)
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let value = transpose2(&self.value())?;
        Ok(self.tape.record(value, Op::Transpose { x: self.id }, &[self.id]))
    }

    fn unary(self, kind: UnKind) -> Var<'t, T> {
        let value = self.value().map(|x| match kind {
            UnKind::Relu => x.max(T::zero()),
            UnKind::Sigmoid => sigmoid(x),
            UnKind::Exp => x.exp(),
            UnKind::Log => x.ln(),
            UnKind::LogSigmoid => log_sigmoid(x),
        });
        self.tape
            .record(value, Op::Unary { kind, x: self.id }, &[self.id])
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(UnKind::Relu)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(UnKind::Sigmoid)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(UnKind::Exp)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(UnKind::Log)
    }

    pub fn log_sigmoid(self) -> Var<'t, T> {
        self.unary(UnKind::LogSigmoid)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        let value = self.value().map(|x| x.max(lo).min(hi));
        self.tape
            .record(value, Op::Clamp { x: self.id, lo, hi }, &[self.id])
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let value = self.value().map(|x| x * c);
        self.tape.record(value, Op::Scale { x: self.id, c }, &[self.id])
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let value = self.value().map(|x| x + c);
        self.tape.record(value, Op::AddScalar { x: self.id }, &[self.id])
    }

    /// Softmax along `axis` with per-slice max subtraction. Slices whose max
    /// is at or below `MASK_SENTINEL / 2` are fully masked: they come out as
    /// zeros and bump [`Tape::masked_softmax_rows`].
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        if axis >= xv.ndim() {
            return Err(TensorError::Axis {
                axis,
                shape: xv.shape().to_vec(),
            });
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let threshold = T::from_f64(MASK_SENTINEL / 2.0);
        let mut out = xv.data().to_vec();
        let masked = if inner == 1 {
            super::softmax_rows_in_place(&mut out, len, threshold)
        } else {
            let mut masked = 0;
            let mut slice = vec![T::zero(); len];
            for o in 0..outer {
                for n in 0..inner {
                    let at = |i: usize| o * len * inner + i * inner + n;
                    for (i, s) in slice.iter_mut().enumerate() {
                        *s = out[at(i)];
                    }
                    masked += super::softmax_rows_in_place(&mut slice, len, threshold);
                    for (i, s) in slice.iter().enumerate() {
                        out[at(i)] = *s;
                    }
                }
            }
            masked
        };
        self.tape.masked_rows.set(self.tape.masked_rows.get() + masked);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.tape.record(value, Op::Softmax { x: self.id, axis }, &[self.id]))
    }

    pub fn sum(self) -> Var<'t, T> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.record(value, Op::SumAll { x: self.id }, &[self.id])
    }

    pub fn mean(self) -> Var<'t, T> {
        let v = self.value();
        let value = Tensor::scalar(v.sum() / T::from_f64(v.numel() as f64));
        self.tape.record(value, Op::MeanAll { x: self.id }, &[self.id])
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t, T>> {
        let xv = self.value();
        if axis >= xv.ndim() {
            return Err(TensorError::Axis {
                axis,
                shape: xv.shape().to_vec(),
            });
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for n in 0..inner {
                    out[o * inner + n] = out[o * inner + n] + xv.data()[o * len * inner + i * inner + n];
                }
            }
        }
        if mean {
            let ln = T::from_f64(len as f64);
            out.iter_mut().for_each(|v| *v = *v / ln);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        let op = if mean {
            Op::MeanAxis { x: self.id, axis }
        } else {
            Op::SumAxis { x: self.id, axis }
        };
        Ok(self.tape.record(value, op, &[self.id]))
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, true)
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (rows, cols) = xv.dims2()?;
        if start > end || end > cols {
            return Err(TensorError::Index {
                index: end,
                size: cols,
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * cols + start..r * cols + end]);
        }
        let value = Tensor::new(vec![rows, w], out)?;
        Ok(self
            .tape
            .record(value, Op::SliceCols { x: self.id, start }, &[self.id]))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (rows, cols) = xv.dims2()?;
        if start > end || end > rows {
            return Err(TensorError::Index {
                index: end,
                size: rows,
            });
        }
        let value = Tensor::new(
            vec![end - start, cols],
            xv.data()[start * cols..end * cols].to_vec(),
        )?;
        Ok(self
            .tape
            .record(value, Op::SliceRows { x: self.id, start }, &[self.id]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        close(x.softmax(0).unwrap().value().data(), &[0.5, 0.5], 0.0);

        let x = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        close(
            x.softmax(0).unwrap().value().data(),
            &[0.09003, 0.24473, 0.66524],
            1e-5,
        );

        let x = tape.constant(Tensor::new(vec![2], vec![-1e9, 5.0]).unwrap());
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.0, 1.0]);
        assert_eq!(tape.masked_softmax_rows(), 0);
    }

    #[test]
    fn fully_masked_softmax_is_zero_and_counted() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![-1e9, -1e9, 0.0, 1.0]).unwrap());
        let y = x.softmax(1).unwrap().value();
        assert_eq!(&y.data()[..2], &[0.0, 0.0]);
        assert!((y.data()[2] + y.data()[3] - 1.0).abs() < 1e-6);
        assert_eq!(tape.masked_softmax_rows(), 1);
    }

    #[test]
    fn softmax_over_leading_axis() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let y = x.softmax(0).unwrap().value();
        close(y.data(), &[0.5, 0.5, 0.5, 0.5], 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::ones(vec![3]));
        let zeros = tape.constant(Tensor::zeros(vec![3]));

        let c = tape.constant(Tensor::new(vec![1, 3], vec![4.0, 4.0, 4.0]).unwrap());
        let y = tape.layer_norm(c, ones, zeros, 1e-8).unwrap();
        close(y.value().data(), &[0.0, 0.0, 0.0], 0.0);

        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.layer_norm(x, ones, zeros, 0.0).unwrap();
        close(y.value().data(), &[-1.22474, 0.0, 1.22474], 1e-5);

        let beta = tape.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = tape.layer_norm(x, zeros, beta, 1e-8).unwrap();
        close(y.value().data(), &[0.5, -1.0, 2.0], 0.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = x.sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 3]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.0, 5.0, -4.0]).unwrap());
        let loss = x.softmax(1).unwrap().sum();
        tape.backward(loss).unwrap();
        for g in tape.grad(x).unwrap().data() {
            assert!(g.abs() < 1e-6);
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn gather_skips_padding_row_gradient() {
        let tape = Tape::<f64>::new();
        let table = tape.leaf(Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 2.0],
            vec![3.0, 4.0],
        ]));
        let rows = tape.gather_rows(table, &[0, 2, 2, 1], Some(0)).unwrap();
        tape.backward(rows.sum()).unwrap();
        assert_eq!(tape.grad(table).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        assert!(tape.gather_rows(table, &[3], None).is_err());
    }

    #[test]
    fn straight_through_forward_is_hard_backward_is_soft() {
        let tape = Tape::<f64>::new();
        let soft = tape.leaf(Tensor::new(vec![3, 1], vec![0.2, 0.7, 0.9]).unwrap());
        let hard = Tensor::new(vec![3, 1], vec![0.0, 1.0, 1.0]).unwrap();
        let st = tape.straight_through(hard, soft, vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(st.value().data(), &[0.0, 1.0, 1.0]);
        let w = tape.constant(Tensor::new(vec![3, 1], vec![2.0, 3.0, 4.0]).unwrap());
        tape.backward(st.mul(w).unwrap().sum()).unwrap();
        assert_eq!(tape.grad(soft).unwrap().data(), &[2.0, 3.0, 0.0]);
    }

    #[test]
    fn safe_division_by_zero() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2], vec![0.0, 4.0]).unwrap());
        let q = a.div(b).unwrap();
        assert_eq!(q.value().data(), &[0.0, 0.5]);
        tape.backward(q.sum()).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 0.25]);
        assert_eq!(tape.grad(b).unwrap().data(), &[0.0, -2.0 / 16.0]);
    }
}

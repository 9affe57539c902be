//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, so the node list
//! is already topologically sorted. [`Graph::backward`] walks it in reverse
//! once, summing contributions into each input, and leaves the result on
//! every leaf created with `requires_grad`.
//!
//! Ops that combine two tensors broadcast numpy-style: `[N, C] + [C]`,
//! `[M, C] / [M, 1]`, and `[N, C] * [1]` all work; the backward pass sums
//! gradients back over the broadcast axes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_indices, broadcast_shape, matmul_raw, transpose_raw, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Recording,
    Differentiated,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Sqrt(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    PermuteRows { src: Var, perm: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    SoftmaxTemp { logits: Var, tau: Var },
    ClampMin { src: Var, floor: T },
    SumN(Vec<Var>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Gelu(..) => "gelu",
            Op::Sqrt(..) => "sqrt",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::PermuteRows { .. } => "permute_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxTemp { .. } => "softmax_temp",
            Op::ClampMin { .. } => "clamp_min",
            Op::SumN(..) => "sum_n",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Recorded computation. Build one per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    state: State,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), state: State::Recording }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op: Op::Leaf });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of a leaf, after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Clears every stored gradient so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.state = State::Recording;
    }

    /// First node (in creation order) holding a NaN or infinity, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.state == State::Differentiated {
            return Err(Error::Contract(
                "graph already differentiated; reset_grads before recording more ops".into(),
            ));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- forward ops ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::Dimension {
            op,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_indices(ta.shape(), &shape);
            let ib = broadcast_indices(tb.shape(), &shape);
            ia.iter().zip(&ib).map(|(&i, &j)| f(ta.data()[i], tb.data()[j])).collect()
        };
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(out, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::Domain("sqrt of negative value".into()));
        }
        let out = t.map(T::sqrt);
        self.push(out, Op::Sqrt(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), &[a])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v) / T::lit(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Column sums of a 2-D tensor, shape `[1, C]`; rows are added in
    /// ascending order.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2("sum_rows")?;
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(&t.data()[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let out = Tensor::new(vec![1, c], out)?;
        self.push(out, Op::SumRows(a), &[a])
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2("slice_cols")?;
        if start >= end || end > c {
            return Err(Error::Contract(format!("column range {start}..{end} outside 0..{c}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        let out = Tensor::new(vec![r, w], data)?;
        self.push(out, Op::SliceCols { src: a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let r = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_cols")?;
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, end)?;
        self.push(out, Op::SliceRows { src: a, start }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Tensor::concat_rows(&tensors)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Output row `i` is input row `perm[i]`; `perm` must be a permutation.
    pub fn permute_rows(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Contract(format!("permute_rows: {perm:?} is not a permutation")));
            }
        }
        let out = self.value(a).permute_rows(perm)?;
        self.push(out, Op::PermuteRows { src: a, perm: perm.to_vec() }, &[a])
    }

    /// `x @ w + b` with `w: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Row-wise normalisation with `eps` inside the square root, then
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = tx.dims2("layer_norm")?;
        if tg.numel() != c || tb.numel() != c {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let cf = T::lit(c as f64);
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in tx.data().chunks(c) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / cf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(tg.data()[j] * h + tb.data()[j]);
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Softmax over the trailing axis of `logits / tau`, where `tau` holds
    /// either one temperature or one per row. The row maximum is subtracted
    /// before exponentiation.
    pub fn softmax_temp(&mut self, logits: Var, tau: Var) -> Result<Var> {
        let (tl, tt) = (self.value(logits), self.value(tau));
        let m = tl.cols();
        let rows = tl.numel() / m;
        if tt.numel() != 1 && tt.numel() != rows {
            return Err(Error::Dimension {
                op: "softmax_temp",
                lhs: tl.shape().to_vec(),
                rhs: tt.shape().to_vec(),
            });
        }
        if let Some(bad) = tt.data().iter().find(|&&t| !(t > T::zero())) {
            return Err(Error::Domain(format!("temperature must be positive, got {bad}")));
        }
        let mut out = Vec::with_capacity(tl.numel());
        for (r, row) in tl.data().chunks(m).enumerate() {
            let t = if tt.numel() == 1 { tt.data()[0] } else { tt.data()[r] };
            softmax_row(row, t, &mut out);
        }
        let out = Tensor::new(tl.shape().to_vec(), out)?;
        self.push(out, Op::SoftmaxTemp { logits, tau }, &[logits, tau])
    }

    /// Plain softmax over the trailing axis (temperature 1).
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let one = self.constant(Tensor::scalar(T::one()));
        self.softmax_temp(logits, one)
    }

    /// `max(a, floor)`; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Result<Var> {
        let out = self.value(a).map(|v| if v > floor { v } else { floor });
        self.push(out, Op::ClampMin { src: a, floor }, &[a])
    }

    /// Elementwise sum of equally shaped tensors, folded left to right.
    pub fn sum_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("sum of nothing".into()))?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            let t = self.value(p);
            if t.shape() != acc.shape() {
                return Err(Error::Dimension { op: "sum_n", lhs: acc.shape().to_vec(), rhs: t.shape().to_vec() });
            }
            for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        self.push(acc, Op::SumN(parts.to_vec()), parts)
    }

    // ---- backward -------------------------------------------------------

    /// Propagates gradients from the scalar `loss` to every leaf that
    /// requires them. Gradients of leaves are summed over all paths.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.state == State::Differentiated {
            return Err(Error::Contract("backward already ran on this graph; call reset_grads first".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward seed must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (v, contrib) in self.local_grads(i, &g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                if self.nodes[i].requires_grad {
                    match &mut self.nodes[i].grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &c)| *a += c),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        self.state = State::Differentiated;
        Ok(())
    }

    /// Contributions of node `i`'s output gradient `g` to each of its inputs.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (p, q) = (ta.rows(), ta.cols());
                let r = tb.cols();
                let bt = transpose_raw(tb.data(), q, r);
                let at = transpose_raw(ta.data(), p, q);
                vec![(*a, matmul_raw(g, &bt, p, r, q)), (*b, matmul_raw(&at, g, q, p, r))]
            }
            Op::Add(a, b) => vec![
                (*a, reduce_to(g, out_shape, val(*a).shape(), |gv, _| gv)),
                (*b, reduce_to(g, out_shape, val(*b).shape(), |gv, _| gv)),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g, out_shape, val(*a).shape(), |gv, _| gv)),
                (*b, reduce_to(g, out_shape, val(*b).shape(), |gv, _| -gv)),
            ],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let other_a = expand(tb, out_shape);
                let other_b = expand(ta, out_shape);
                vec![
                    (*a, reduce_to(g, out_shape, ta.shape(), |gv, k| gv * other_a[k])),
                    (*b, reduce_to(g, out_shape, tb.shape(), |gv, k| gv * other_b[k])),
                ]
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let eb = expand(tb, out_shape);
                let ea = expand(ta, out_shape);
                vec![
                    (*a, reduce_to(g, out_shape, ta.shape(), |gv, k| gv / eb[k])),
                    (*b, reduce_to(g, out_shape, tb.shape(), |gv, k| -gv * ea[k] / (eb[k] * eb[k]))),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Gelu(a) => vec![(*a, g.iter().zip(val(*a).data()).map(|(&gv, &x)| gv * gelu_grad(x)).collect())],
            Op::Sqrt(a) => {
                let half = T::lit(0.5);
                vec![(*a, g.iter().zip(node.value.data()).map(|(&gv, &y)| gv * half / y).collect())]
            }
            Op::Transpose(a) => {
                let (r, c) = (out_shape[0], out_shape[1]);
                vec![(*a, transpose_raw(g, r, c))]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
            Op::Mean(a) => {
                let n = val(*a).numel();
                vec![(*a, vec![g[0] / T::lit(n as f64); n])]
            }
            Op::SumRows(a) => {
                let r = val(*a).rows();
                let mut out = Vec::with_capacity(r * g.len());
                for _ in 0..r {
                    out.extend_from_slice(g);
                }
                vec![(*a, out)]
            }
            Op::SliceCols { src, start } => {
                let t = val(*src);
                let (r, c) = (t.rows(), t.cols());
                let w = out_shape[1];
                let mut out = vec![T::zero(); r * c];
                for i in 0..r {
                    out[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![(*src, out)]
            }
            Op::ConcatCols(parts) => {
                let total = out_shape[1];
                let r = out_shape[0];
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = val(p).cols();
                        let mut out = Vec::with_capacity(r * w);
                        for i in 0..r {
                            out.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        (p, out)
                    })
                    .collect()
            }
            Op::PermuteRows { src, perm } => {
                let c = val(*src).cols();
                let mut out = vec![T::zero(); g.len()];
                for (i, &p) in perm.iter().enumerate() {
                    out[p * c..(p + 1) * c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                vec![(*src, out)]
            }
            Op::SliceRows { src, start } => {
                let t = val(*src);
                let c = t.cols();
                let mut out = vec![T::zero(); t.numel()];
                out[start * c..start * c + g.len()].copy_from_slice(g);
                vec![(*src, out)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).numel();
                        let out = g[offset..offset + n].to_vec();
                        offset += n;
                        (p, out)
                    })
                    .collect()
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = out_shape[1];
                let cf = T::lit(c as f64);
                let gam = val(*gamma).data();
                let mut dx = Vec::with_capacity(g.len());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..c {
                        let d = grow[j] * gam[j];
                        mean_d += d;
                        mean_dh += d * hrow[j];
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                    mean_d /= cf;
                    mean_dh /= cf;
                    for j in 0..c {
                        let d = grow[j] * gam[j];
                        dx.push(rstd[r] * (d - mean_d - hrow[j] * mean_dh));
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::SoftmaxTemp { logits, tau } => {
                let tl = val(*logits);
                let tt = val(*tau);
                let m = tl.cols();
                let y = node.value.data();
                let mut dlog = Vec::with_capacity(g.len());
                let mut dtau = vec![T::zero(); tt.numel()];
                for (r, ((grow, yrow), lrow)) in g.chunks(m).zip(y.chunks(m)).zip(tl.data().chunks(m)).enumerate() {
                    let ti = if tt.numel() == 1 { 0 } else { r };
                    let t = tt.data()[ti];
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv);
                    let mut dt = T::zero();
                    for j in 0..m {
                        // gradient w.r.t. z = logits / tau
                        let dz = yrow[j] * (grow[j] - dot);
                        dlog.push(dz / t);
                        dt += dz * lrow[j];
                    }
                    dtau[ti] += -dt / (t * t);
                }
                vec![(*logits, dlog), (*tau, dtau)]
            }
            Op::ClampMin { src, floor } => vec![(
                *src,
                g.iter()
                    .zip(val(*src).data())
                    .map(|(&gv, &x)| if x > *floor { gv } else { T::zero() })
                    .collect(),
            )],
            Op::SumN(parts) => parts.iter().map(|&p| (p, g.to_vec())).collect(),
        }
    }
}

fn softmax_row<T: Scalar>(row: &[T], tau: T, out: &mut Vec<T>) {
    let start = out.len();
    let mut max = T::neg_infinity();
    for &v in row {
        max = max.max(v / tau);
    }
    let mut sum = T::zero();
    for &v in row {
        let e = (v / tau - max).exp();
        sum += e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e /= sum;
    }
}

/// Sums a broadcast output gradient back down to `in_shape`; `f` maps the
/// output gradient at flat output index `k` to the input contribution.
fn reduce_to<T: Scalar>(g: &[T], out_shape: &[usize], in_shape: &[usize], f: impl Fn(T, usize) -> T) -> Vec<T> {
    if in_shape == out_shape {
        return g.iter().enumerate().map(|(k, &gv)| f(gv, k)).collect();
    }
    let n: usize = in_shape.iter().product();
    let mut out = vec![T::zero(); n];
    for (k, &i) in broadcast_indices(in_shape, out_shape).iter().enumerate() {
        out[i] += f(g[k], k);
    }
    out
}

fn expand<T: Scalar>(t: &Tensor<T>, out_shape: &[usize]) -> Vec<T> {
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    broadcast_indices(t.shape(), out_shape).into_iter().map(|i| t.data()[i]).collect()
}

const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::lit(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let l = g.constant(t(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0]]));
        let one = g.constant(Tensor::scalar(1.0));
        let y = g.softmax_temp(l, one).unwrap();
        let y = g.value(y);
        for j in 0..3 {
            assert!((y.at(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        let expect = [0.090031, 0.244728, 0.665241];
        for (j, e) in expect.iter().enumerate() {
            assert!((y.at(1, j) - e).abs() < 1e-6);
        }

        let l = g.constant(t(&[vec![1.0, 2.0, 3.0]]));
        let cold = g.constant(Tensor::scalar(0.01));
        let y = g.softmax_temp(l, cold).unwrap();
        assert!(g.value(y).at(0, 2) > 1.0 - 1e-8);
    }

    #[test]
    fn softmax_rejects_nonpositive_tau() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(t(&[vec![1.0, 2.0]]));
        let z = g.constant(Tensor::scalar(0.0));
        assert!(matches!(g.softmax_temp(l, z), Err(Error::Domain(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[vec![2.5, 2.5, 2.5], vec![1.0, 3.0, 2.0]]));
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).row(0).iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let x = g.constant(t(&[vec![1.0, 3.0]]));
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let e = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).at(0, 0) + e).abs() < 1e-15);
        assert!((g.value(y).at(0, 1) - e).abs() < 1e-15);
    }

    #[test]
    fn backward_simple_losses() {
        let mut g = Graph::new();
        let x = g.param(t(&[vec![1.0, -2.0], vec![3.0, 0.5]]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.param(t(&[vec![1.0, -2.0], vec![3.0, 0.5]]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), g.value(x).clone());
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::new();
        let x = g.param(t(&[vec![1.0, 2.0]]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        assert!(matches!(g.sum(x), Err(Error::Contract(_))));
        g.reset_grads();
        assert!(g.grad(x).is_none());
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn gradients_accumulate_over_shared_uses() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let a = g.scale(x, 2.0).unwrap();
        let b = g.add(a, x).unwrap();
        g.backward(b).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn clamp_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![-10.0, 0.7]).unwrap());
        let y = g.clamp_min(x, 0.1).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.7]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn first_non_finite_names_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let one = g.constant(Tensor::scalar(1.0));
        let _ = g.div(one, x).unwrap();
        assert_eq!(g.first_non_finite(), Some((2, "div")));
    }
}

//! Reverse-mode tape.
//!
//! Every operation appends a node whose inputs already exist on the tape, so
//! node ids are a topological order and `backward` is a single reverse sweep.

use super::array::{as_matrix, gemm, strides_of, Array};
use crate::error::{contract_err, dim_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn node_id(self) -> usize {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    Binary(BinaryOp, Var, Var),
    Abs(Var),
    Relu(Var),
    Scale(Var, f64),
    Reduce {
        op: Reduction,
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    StopGradient,
}

struct Node {
    value: Array,
    grad: Option<Array>,
    requires_grad: bool,
    op: Op,
}

/// Records operations over [`Array`]s for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, requires_grad: bool, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var { id }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Trainable leaf.
    pub fn var(&mut self, value: Array) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient; zeros if no backward pass has reached `v`.
    pub fn grad(&self, v: Var) -> Array {
        let node = &self.nodes[v.id];
        node.grad
            .clone()
            .unwrap_or_else(|| Array::zeros(node.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// 1-D convolution with zero padding. `x` is `[C_in, T]` or batched `[B, C_in, T]`,
    /// `w` is `[C_out, C_in, k]`, `b` is `[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
            stride,
            padding,
        )?;
        let value = geom.forward(self.value(x).data(), self.value(w).data(), self.value(b).data());
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            value,
            rg,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    /// Pointwise binary op. Operands must share a shape, or one of them must be a single element.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
            BinaryOp::Div => |x: f64, y: f64| x / y,
        };
        let value = if va.shape() == vb.shape() {
            va.zip_map(vb, f)?
        } else if vb.is_scalar() {
            let s = vb.item();
            va.map(|x| f(x, s))
        } else if va.is_scalar() {
            let s = va.item();
            vb.map(|y| f(s, y))
        } else {
            return Err(dim_err!(
                "{:?}: incompatible shapes {:?} and {:?}",
                op,
                va.shape(),
                vb.shape()
            ));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(value, rg, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(value, rg, Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, rg, Op::Scale(x, factor))
    }

    /// Reduces over `axes`; an empty slice reduces over every axis. Reduced axes are
    /// dropped from the output shape, and a full reduction yields shape `[1]`.
    pub fn reduce(&mut self, op: Reduction, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let axes = normalize_axes(&shape, axes)?;
        let plan = ReducePlan::new(&shape, &axes);
        let mut out = vec![0.0; plan.out_len];
        for (i, &v) in self.value(x).data().iter().enumerate() {
            out[plan.out_index(i)] += v;
        }
        if op == Reduction::Mean {
            let count = plan.count as f64;
            out.iter_mut().for_each(|v| *v /= count);
        }
        let value = Array::new(plan.out_shape.clone(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reduce { op, x, axes }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(Reduction::Sum, x, &[]).expect("full reduction is always valid")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(Reduction::Mean, x, &[]).expect("full reduction is always valid")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat of zero parts"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {} out of range for {:?}", axis, base));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(dim_err!("concat shape mismatch: {:?} vs {:?}", s, base));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Array::new(shape, out)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            value,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            rg,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(dim_err!("transpose needs at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, false, Op::StopGradient)
    }

    /// `x · wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`. The bias row is
    /// expanded with an explicit ones-column product rather than broadcasting.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, _) = as_matrix(self.value(x))?;
        let wt = self.transpose(w)?;
        let xw = self.matmul(x, wt)?;
        let out = self.value(b).len();
        let ones = self.constant(Array::ones(&[batch, 1]));
        let brow = self.reshape(b, &[1, out])?;
        let bias = self.matmul(ones, brow)?;
        self.add(xw, bias)
    }

    /// Reverse sweep from a single-element root. Gradients are added to whatever
    /// the nodes already hold, so repeated calls accumulate until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(contract_err!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            ));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut adj: Vec<Option<Array>> = vec![None; root.id + 1];
        adj[root.id] = Some(Array::ones(self.value(root).shape()));
        for id in (0..=root.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut adj)?;
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Array, adj: &mut [Option<Array>]) -> Result<()> {
        let mut send = |v: Var, contrib: Array| {
            if !self.nodes[v.id].requires_grad {
                return;
            }
            match &mut adj[v.id] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.value(*a))?;
                let (_, n) = as_matrix(self.value(*b))?;
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut ga, false);
                    send(*a, Array::new(vec![m, k], ga)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut gb, false);
                    send(*b, Array::new(vec![k, n], gb)?);
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (vx, vw, vb) = (self.value(*x), self.value(*w), self.value(*b));
                let geom = ConvGeom::new(vx.shape(), vw.shape(), vb.shape(), *stride, *padding)?;
                let (gx, gw, gb) = geom.backward(vx.data(), vw.data(), g.data());
                send(*x, Array::new(vx.shape().to_vec(), gx)?);
                send(*w, Array::new(vw.shape().to_vec(), gw)?);
                send(*b, Array::new(vb.shape().to_vec(), gb)?);
            }
            Op::Binary(op, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let out_shape = self.nodes[id].value.shape();
                // Per-element partials, evaluated against the broadcast operands.
                let pick = |arr: &Array, i: usize| if arr.is_scalar() && arr.len() != g.len() { arr.data()[0] } else { arr.data()[i] };
                let n = g.len();
                let mut da = vec![0.0; n];
                let mut db = vec![0.0; n];
                for i in 0..n {
                    let (x, y, gi) = (pick(va, i), pick(vb, i), g.data()[i]);
                    let (pa, pb) = match op {
                        BinaryOp::Add => (1.0, 1.0),
                        BinaryOp::Sub => (1.0, -1.0),
                        BinaryOp::Mul => (y, x),
                        BinaryOp::Div => (1.0 / y, -x / (y * y)),
                    };
                    da[i] = gi * pa;
                    db[i] = gi * pb;
                }
                let fold = |arr: &Array, d: Vec<f64>| -> Result<Array> {
                    if arr.shape() == out_shape {
                        Array::new(out_shape.to_vec(), d)
                    } else {
                        Array::new(arr.shape().to_vec(), vec![d.iter().sum()])
                    }
                };
                if self.rg(*a) {
                    send(*a, fold(va, da)?);
                }
                if self.rg(*b) {
                    send(*b, fold(vb, db)?);
                }
            }
            Op::Abs(x) => {
                let gx = self.value(*x).zip_map(g, |v, gi| gi * sign(v))?;
                send(*x, gx);
            }
            Op::Relu(x) => {
                let gx = self
                    .value(*x)
                    .zip_map(g, |v, gi| if v > 0.0 { gi } else { 0.0 })?;
                send(*x, gx);
            }
            Op::Scale(x, factor) => send(*x, g.map(|gi| gi * factor)),
            Op::Reduce { op, x, axes } => {
                let shape = self.value(*x).shape();
                let plan = ReducePlan::new(shape, axes);
                let norm = match op {
                    Reduction::Sum => 1.0,
                    Reduction::Mean => 1.0 / plan.count as f64,
                };
                let n: usize = shape.iter().product();
                let data = (0..n).map(|i| g.data()[plan.out_index(i)] * norm).collect();
                send(*x, Array::new(shape.to_vec(), data)?);
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[id].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut start = 0;
                for p in parts {
                    let s = self.value(*p).shape();
                    let chunk = s[*axis] * inner;
                    if self.rg(*p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * row + start;
                            d.extend_from_slice(&g.data()[base..base + chunk]);
                        }
                        send(*p, Array::new(s.to_vec(), d)?);
                    }
                    start += chunk;
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                send(*x, g.permute(&inverse)?);
            }
            Op::Reshape(x) => {
                send(*x, g.clone().reshape(self.value(*x).shape())?);
            }
        }
        Ok(())
    }
}

/// sign with sign(0) = 0.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn normalize_axes(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Ok((0..shape.len()).collect());
    }
    let mut out = axes.to_vec();
    out.sort_unstable();
    out.dedup();
    if out.len() != axes.len() || out.iter().any(|&a| a >= shape.len()) {
        return Err(dim_err!("invalid reduction axes {:?} for shape {:?}", axes, shape));
    }
    Ok(out)
}

struct ReducePlan {
    out_shape: Vec<usize>,
    out_len: usize,
    count: usize,
    // For each input axis, the stride it contributes to the output flat index (0 if reduced).
    in_shape: Vec<usize>,
    out_stride_per_axis: Vec<usize>,
}

impl ReducePlan {
    fn new(shape: &[usize], axes: &[usize]) -> Self {
        let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
        let mut out_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out_strides = strides_of(&out_shape);
        let mut out_stride_per_axis = vec![0; shape.len()];
        for (k, &d) in kept.iter().enumerate() {
            out_stride_per_axis[d] = out_strides[k];
        }
        ReducePlan {
            out_len: out_shape.iter().product(),
            count: axes.iter().map(|&a| shape[a]).product(),
            out_shape,
            in_shape: shape.to_vec(),
            out_stride_per_axis,
        }
    }

    fn out_index(&self, mut flat: usize) -> usize {
        let mut out = 0;
        for d in (0..self.in_shape.len()).rev() {
            let i = flat % self.in_shape[d];
            flat /= self.in_shape[d];
            out += i * self.out_stride_per_axis[d];
        }
        out
    }
}

/// Output length of a 1-D convolution, or `None` when the window does not fit.
pub fn conv1d_output_len(t: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    if k == 0 || stride == 0 || t + 2 * padding < k {
        return None;
    }
    Some((t + 2 * padding - k) / stride + 1)
}

struct ConvGeom {
    batch: usize,
    c_in: usize,
    t: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    t_out: usize,
    batched: bool,
}

impl ConvGeom {
    fn new(
        xs: &[usize],
        ws: &[usize],
        bs: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (batch, c_in, t, batched) = match xs {
            [c, t] => (1, *c, *t, false),
            [b, c, t] => (*b, *c, *t, true),
            _ => return Err(dim_err!("conv1d input must be [C, T] or [B, C, T], got {:?}", xs)),
        };
        let [c_out, wc_in, k] = ws else {
            return Err(dim_err!("conv1d weight must be [C_out, C_in, k], got {:?}", ws));
        };
        if *wc_in != c_in {
            return Err(dim_err!("conv1d channel mismatch: input {} vs weight {}", c_in, wc_in));
        }
        if bs != [*c_out] {
            return Err(dim_err!("conv1d bias must be [{}], got {:?}", c_out, bs));
        }
        let t_out = conv1d_output_len(t, *k, stride, padding).ok_or_else(|| {
            dim_err!(
                "conv1d output empty: T={}, k={}, stride={}, padding={}",
                t,
                k,
                stride,
                padding
            )
        })?;
        Ok(ConvGeom {
            batch,
            c_in,
            t,
            c_out: *c_out,
            k: *k,
            stride,
            padding,
            t_out,
            batched,
        })
    }

    /// Input time index feeding output position `o` at tap `j`, if inside the signal.
    #[inline]
    fn src(&self, o: usize, j: usize) -> Option<usize> {
        let p = (o * self.stride + j).checked_sub(self.padding)?;
        (p < self.t).then_some(p)
    }

    fn forward(&self, x: &[f64], w: &[f64], b: &[f64]) -> Array {
        let mut out = vec![0.0; self.batch * self.c_out * self.t_out];
        for n in 0..self.batch {
            let xb = &x[n * self.c_in * self.t..(n + 1) * self.c_in * self.t];
            for co in 0..self.c_out {
                let row = &mut out[(n * self.c_out + co) * self.t_out..][..self.t_out];
                for (o, slot) in row.iter_mut().enumerate() {
                    let mut acc = b[co];
                    for ci in 0..self.c_in {
                        let wr = &w[(co * self.c_in + ci) * self.k..][..self.k];
                        let xr = &xb[ci * self.t..][..self.t];
                        for (j, wj) in wr.iter().enumerate() {
                            if let Some(p) = self.src(o, j) {
                                acc += wj * xr[p];
                            }
                        }
                    }
                    *slot = acc;
                }
            }
        }
        let shape = if self.batched {
            vec![self.batch, self.c_out, self.t_out]
        } else {
            vec![self.c_out, self.t_out]
        };
        Array::new(shape, out).expect("conv output shape")
    }

    fn backward(&self, x: &[f64], w: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; self.c_out];
        for n in 0..self.batch {
            let xoff = n * self.c_in * self.t;
            for co in 0..self.c_out {
                let grow = &g[(n * self.c_out + co) * self.t_out..][..self.t_out];
                for (o, &go) in grow.iter().enumerate() {
                    gb[co] += go;
                    for ci in 0..self.c_in {
                        let wbase = (co * self.c_in + ci) * self.k;
                        let xbase = xoff + ci * self.t;
                        for j in 0..self.k {
                            if let Some(p) = self.src(o, j) {
                                gw[wbase + j] += go * x[xbase + p];
                                gx[xbase + p] += go * w[wbase + j];
                            }
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use super::tensor::{broadcast_map, broadcast_shape, split_axis, Tensor};
use crate::{Error, Result};

/// Floor applied inside [`Graph::log`].
pub const LOG_FLOOR: f64 = 1e-12;
/// Variance epsilon of [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Scale(Var, f64),
    Softmax { x: Var, axis: usize },
    LayerNorm(Var),
    GatherRows { table: Var, indices: Vec<usize> },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Broadcast(Var),
    Reshape(Var),
    StopGradient,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Softplus(_) => "softplus",
            Op::Scale(..) => "scale",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Broadcast(_) => "broadcast",
            Op::Reshape(_) => "reshape",
            Op::StopGradient => "stop_gradient",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only populated for trainable leaves.
    grad: Option<Vec<f64>>,
}

/// Reverse-mode tape. Build one per step, run [`Graph::backward`], read
/// leaf gradients, drop it.
///
/// Nodes are appended in creation order, which is a topological order, so
/// backward is a single reverse sweep. Nodes that do not depend on a
/// trainable leaf carry no backward bookkeeping, which makes inference on a
/// graph nearly as cheap as plain array code.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: scales the backward contribution of every `op` node by
    /// `1.01`, so a gradient check must notice.
    pub fn inject_gradient_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; [`Graph::grad`] holds `d loss / d leaf` after backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf (zeros if it never received one).
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: if requires_grad || matches!(op, Op::Leaf | Op::StopGradient) {
                op
            } else {
                // Nothing to propagate into; drop the input references.
                Op::StopGradient
            },
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---------------------------------------------------------------- binary

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out_shape = broadcast_shape(op_name, self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let ma = broadcast_map(va.shape(), &out_shape);
        let mb = broadcast_map(vb.shape(), &out_shape);
        let (da, db) = (va.data(), vb.data());
        let numel: usize = out_shape.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|i| {
                let x = da[ma.as_ref().map_or(i, |m| m[i])];
                let y = db[mb.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Matrix product over the last two axes. Either operand may carry a
    /// leading batch axis; a 2-D operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb)?;
        let out = matmul_forward(self.value(a).data(), self.value(b).data(), &dims);
        let shape = dims.out_shape();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), rg))
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, libm::exp, Op::Exp(x))
    }

    /// Natural log with the input floored at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| libm::log(v.max(LOG_FLOOR)), Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, libm::sqrt, Op::Sqrt(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, libm::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Forward identity, backward zero.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    // ------------------------------------------------------------ structured

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = libm::exp(src[at(k)] - max);
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[at(k)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::operand("layer_norm", "needs at least one axis"))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (row, dst) in src.chunks(n).zip(out.chunks_mut(n)) {
            let (mean, inv) = row_stats(row);
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mean) * inv;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm(x), rg))
    }

    /// Rows of `table` (axis 0) selected by `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.is_empty() {
            return Err(Error::operand("gather_rows", "table must have at least one axis"));
        }
        if indices.is_empty() {
            return Err(Error::operand("gather_rows", "no indices"));
        }
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &r in indices {
            if r >= rows {
                return Err(Error::operand(
                    "gather_rows",
                    format!("row {r} out of range for {rows} rows"),
                ));
            }
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        let shape = self.shape(x).to_vec();
        check_axis(name, &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = o * n * inner + k * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let c = 1.0 / n as f64;
            out.iter_mut().for_each(|v| *v *= c);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.push(Tensor::new(&out_shape, out)?, op, rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::operand("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", &shape, axis)?;
        if start >= end || end > shape[axis] {
            return Err(Error::operand(
                "slice",
                format!("range {start}..{end} invalid for extent {}", shape[axis]),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        let joined = broadcast_shape("broadcast", &src_shape, shape)?;
        if joined != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: src_shape,
                rhs: shape.to_vec(),
            });
        }
        let src = self.value(x).data();
        let data = match broadcast_map(&src_shape, shape) {
            Some(m) => m.iter().map(|&i| src[i]).collect(),
            None => src.to_vec(),
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Broadcast(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // -------------------------------------------------------------- backward

    /// Accumulates `d loss / d leaf` into every trainable leaf reachable from
    /// `loss`. Calling it again without [`Graph::zero_grad`] adds to the
    /// existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let scale = match self.fault {
                Some(name) if name == self.nodes[id].op.name() => 1.01,
                _ => 1.0,
            };
            let contributions = self.local_grads(id, &g)?;
            for (input, mut c) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if scale != 1.0 {
                    c.iter_mut().for_each(|v| *v *= scale);
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn local_grads(&self, id: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let out_shape = node.value.shape();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let reduce = |v: Var, full: Vec<f64>| -> Vec<f64> { reduce_to(shp(v), out_shape, full) };
        let expand = |v: Var| -> Vec<f64> {
            match broadcast_map(shp(v), out_shape) {
                Some(m) => m.iter().map(|&i| val(v)[i]).collect(),
                None => val(v).to_vec(),
            }
        };
        let elementwise = |x: Var, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            val(x).iter().zip(g).zip(out).map(|((&xi, &gi), &yi)| gi * f(xi, yi)).collect()
        };

        Ok(match &node.op {
            Op::Leaf | Op::StopGradient => Vec::new(),
            Op::Add(a, b) => vec![(*a, reduce(*a, g.to_vec())), (*b, reduce(*b, g.to_vec()))],
            Op::Sub(a, b) => vec![
                (*a, reduce(*a, g.to_vec())),
                (*b, reduce(*b, g.iter().map(|v| -v).collect())),
            ],
            Op::Mul(a, b) => {
                let (ea, eb) = (expand(*a), expand(*b));
                let ga = g.iter().zip(&eb).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(&ea).map(|(x, y)| x * y).collect();
                vec![(*a, reduce(*a, ga)), (*b, reduce(*b, gb))]
            }
            Op::Div(a, b) => {
                let eb = expand(*b);
                let ga = g.iter().zip(&eb).map(|(x, y)| x / y).collect();
                let gb = g
                    .iter()
                    .zip(&eb)
                    .zip(out)
                    .map(|((x, y), q)| -x * q / y)
                    .collect();
                vec![(*a, reduce(*a, ga)), (*b, reduce(*b, gb))]
            }
            Op::MatMul(a, b) => {
                let dims = matmul_dims(shp(*a), shp(*b))?;
                let (ga, gb) = matmul_backward(val(*a), val(*b), g, &dims);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Exp(x) => vec![(*x, g.iter().zip(out).map(|(a, b)| a * b).collect())],
            Op::Log(x) => vec![(
                *x,
                elementwise(*x, &|v, _| if v > LOG_FLOOR { 1.0 / v } else { 0.0 }),
            )],
            Op::Square(x) => vec![(*x, elementwise(*x, &|v, _| 2.0 * v))],
            Op::Sqrt(x) => vec![(*x, elementwise(*x, &|_, y| 0.5 / y))],
            Op::Tanh(x) => vec![(*x, elementwise(*x, &|_, y| 1.0 - y * y))],
            Op::Relu(x) => vec![(*x, elementwise(*x, &|v, _| if v > 0.0 { 1.0 } else { 0.0 }))],
            Op::Gelu(x) => vec![(*x, elementwise(*x, &|v, _| gelu_grad(v)))],
            Op::Softplus(x) => vec![(*x, elementwise(*x, &|v, _| sigmoid(v)))],
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out_shape, *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm(x) => {
                let n = *out_shape.last().expect("layer_norm rank");
                let src = val(*x);
                let mut gx = vec![0.0; g.len()];
                for ((row, gy), (y, dst)) in src
                    .chunks(n)
                    .zip(g.chunks(n))
                    .zip(out.chunks(n).zip(gx.chunks_mut(n)))
                {
                    let (_, inv) = row_stats(row);
                    let mg = gy.iter().sum::<f64>() / n as f64;
                    let mgy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for k in 0..n {
                        dst[k] = inv * (gy[k] - mg - y[k] * mgy);
                    }
                }
                vec![(*x, gx)]
            }
            Op::GatherRows { table, indices } => {
                let tshape = shp(*table);
                let width: usize = tshape[1..].iter().product();
                let mut gt = vec![0.0; val(*table).len()];
                for (k, &r) in indices.iter().enumerate() {
                    let src = &g[k * width..(k + 1) * width];
                    gt[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
                vec![(*table, gt)]
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xs = shp(*x);
                let (outer, n, inner) = split_axis(xs, *axis);
                let c = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut gx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            gx[o * n * inner + k * inner + i] = g[o * inner + i] * c;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::SumAll(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::MeanAll(x) => {
                let n = val(*x).len();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut res = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for &v in xs {
                    let n = shp(v)[*axis];
                    let mut gv = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gv.extend_from_slice(&g[base..base + n * inner]);
                    }
                    offset += n;
                    res.push((v, gv));
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let xs = shp(*x);
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = out_shape[*axis];
                let mut gx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Broadcast(x) => vec![(*x, reduce(*x, g.to_vec()))],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
        })
    }
}

/// Generic dispatch over the primitive set by name, used by the gradient
/// checker and by callers that select operators from data.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Exp,
    Log,
    Square,
    Sqrt,
    Tanh,
    Relu,
    Gelu,
    Softplus,
    Scale(f64),
    Softmax { axis: usize },
    LayerNorm,
    GatherRows { indices: Vec<usize> },
    Sum { axis: usize },
    Mean { axis: usize },
    SumAll,
    MeanAll,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Broadcast { shape: Vec<usize> },
    Reshape { shape: Vec<usize> },
    StopGradient,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::MatMul => "matmul",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Softplus => "softplus",
            Primitive::Scale(_) => "scale",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::GatherRows { .. } => "gather_rows",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::SumAll => "sum_all",
            Primitive::MeanAll => "mean_all",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Broadcast { .. } => "broadcast",
            Primitive::Reshape { .. } => "reshape",
            Primitive::StopGradient => "stop_gradient",
        }
    }
}

impl Graph {
    /// Applies `prim` to `inputs`, checking arity.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::MatMul => 2,
            Primitive::Concat { .. } => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::operand(
                prim.name(),
                format!("expected {arity} inputs, got {}", inputs.len()),
            ));
        }
        let x = inputs[0];
        match prim {
            Primitive::Add => self.add(x, inputs[1]),
            Primitive::Sub => self.sub(x, inputs[1]),
            Primitive::Mul => self.mul(x, inputs[1]),
            Primitive::Div => self.div(x, inputs[1]),
            Primitive::MatMul => self.matmul(x, inputs[1]),
            Primitive::Exp => Ok(self.exp(x)),
            Primitive::Log => Ok(self.log(x)),
            Primitive::Square => Ok(self.square(x)),
            Primitive::Sqrt => Ok(self.sqrt(x)),
            Primitive::Tanh => Ok(self.tanh(x)),
            Primitive::Relu => Ok(self.relu(x)),
            Primitive::Gelu => Ok(self.gelu(x)),
            Primitive::Softplus => Ok(self.softplus(x)),
            Primitive::Scale(c) => Ok(self.scale(x, *c)),
            Primitive::Softmax { axis } => self.softmax(x, *axis),
            Primitive::LayerNorm => self.layer_norm(x),
            Primitive::GatherRows { indices } => self.gather_rows(x, indices),
            Primitive::Sum { axis } => self.sum(x, *axis),
            Primitive::Mean { axis } => self.mean(x, *axis),
            Primitive::SumAll => Ok(self.sum_all(x)),
            Primitive::MeanAll => Ok(self.mean_all(x)),
            Primitive::Concat { axis } => self.concat(inputs, *axis),
            Primitive::Slice { axis, start, end } => self.slice(x, *axis, *start, *end),
            Primitive::Broadcast { shape } => self.broadcast(x, shape),
            Primitive::Reshape { shape } => self.reshape(x, shape),
            Primitive::StopGradient => Ok(self.stop_gradient(x)),
        }
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::operand(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / libm::sqrt(var + LAYER_NORM_EPS))
}

/// Sums a gradient of `out_shape` back down to a broadcast source shape.
fn reduce_to(src: &[usize], out_shape: &[usize], full: Vec<f64>) -> Vec<f64> {
    match broadcast_map(src, out_shape) {
        None => full,
        Some(m) => {
            let mut acc = vec![0.0; src.iter().product()];
            for (k, &i) in m.iter().enumerate() {
                acc[i] += full[k];
            }
            acc
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
}

impl MatMulDims {
    fn out_shape(&self) -> Vec<usize> {
        if self.a_batched || self.b_batched {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if !(2..=3).contains(&a.len()) || !(2..=3).contains(&b.len()) {
        return Err(mismatch());
    }
    let (ab, bb) = (a.len() == 3, b.len() == 3);
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 || (ab && bb && a[0] != b[0]) {
        return Err(mismatch());
    }
    let batch = if ab {
        a[0]
    } else if bb {
        b[0]
    } else {
        1
    };
    Ok(MatMulDims {
        batch,
        a_batched: ab,
        b_batched: bb,
        m,
        k,
        n,
    })
}

fn matmul_forward(a: &[f64], b: &[f64], d: &MatMulDims) -> Vec<f64> {
    let (m, k, n) = (d.m, d.k, d.n);
    let mut out = vec![0.0; d.batch * m * n];
    for q in 0..d.batch {
        let aq = if d.a_batched { &a[q * m * k..(q + 1) * m * k] } else { a };
        let bq = if d.b_batched { &b[q * k * n..(q + 1) * k * n] } else { b };
        let oq = &mut out[q * m * n..(q + 1) * m * n];
        for i in 0..m {
            let orow = &mut oq[i * n..(i + 1) * n];
            for p in 0..k {
                let av = aq[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bq[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

fn matmul_backward(a: &[f64], b: &[f64], g: &[f64], d: &MatMulDims) -> (Vec<f64>, Vec<f64>) {
    let (m, k, n) = (d.m, d.k, d.n);
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for q in 0..d.batch {
        let (ao, bo) = (
            if d.a_batched { q * m * k } else { 0 },
            if d.b_batched { q * k * n } else { 0 },
        );
        let gq = &g[q * m * n..(q + 1) * m * n];
        for i in 0..m {
            let grow = &gq[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[bo + p * n..bo + (p + 1) * n];
                // dA[i,p] = sum_j G[i,j] B[p,j]
                ga[ao + i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                // dB[p,j] += A[i,p] G[i,j]
                let av = a[ao + i * k + p];
                if av != 0.0 {
                    for (dst, &gv) in gb[bo + p * n..bo + (p + 1) * n].iter_mut().zip(grow) {
                        *dst += av * gv;
                    }
                }
            }
        }
    }
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gather_repeats_rows() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_fn(&[4, 2], |i| i as f64));
        let y = g.gather_rows(e, &[2, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 5.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_shape_and_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 4]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 4]);
        let err = g.matmul(b, b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "matmul", .. }));
        assert!(err.to_string().contains("[3, 4]"));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 3.0]));
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.square(x);
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 4.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[4.0, 8.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(g.backward(x), Err(Error::NonScalarLoss(vec![2])));
    }

    #[test]
    fn stop_gradient_blocks_and_passes_values() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[0.5, -1.0, 2.0]));
        let sg = g.stop_gradient(x);
        assert_eq!(g.value(sg), g.value(x));
        let d = g.sub(x, sg).unwrap();
        let sq = g.square(d);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 0.0, 0.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[5.0, 7.0]));
        let csg = g.stop_gradient(c);
        let y = g.add(x, csg).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn constants_never_get_gradients() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(c).data(), &[0.0, 0.0]);
        assert_eq!(g.grad(x).data(), &[3.0, 4.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[3]));
        let y = g.add(x, b).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn unknown_arity_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.apply(&Primitive::Add, &[x]).is_err());
    }
}

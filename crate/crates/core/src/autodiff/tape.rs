//! Eager reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] computes its value immediately and appends a
//! node to the owning [`Tape`]. Nodes are only linked into the gradient graph
//! when at least one input requires a gradient; everything else is stored as
//! a constant. [`Tape::backward`] walks the recorded nodes in exact reverse
//! order, which is a valid topological order because inputs are always
//! recorded before the operations that consume them.

use std::cell::RefCell;

use super::fastmath;
use super::tensor::{broadcast_shape, split_axis, Bcast, Tensor};
use crate::error::{Error, Result};

const BCE_EPS: f64 = 1e-12;

/// Momentum applied to batch-norm running statistics:
/// `running = momentum * running + (1 - momentum) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Elementwise, usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log { input: usize, eps: f64 },
    Abs(usize),
    Softmax { input: usize, axis: usize },
    Minimum(usize, usize),
    SumAxis { input: usize, axis: usize },
    MeanAxis { input: usize, axis: usize },
    SumAll(usize),
    MeanAll(usize),
    MaxAxis { input: usize, argmax: Vec<usize> },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Bce { pred: usize, target: usize },
    Reshape(usize),
    Narrow { input: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Transpose(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Running mean and variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(features: usize) -> Self {
        BatchNormStats {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, shape {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var`
    /// does not require a gradient or is unreachable from the loss.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[var.id].clone(), g.clone()))
    }

    /// Gradient of `var`, with zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes, constants included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
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

    fn requires_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let nodes = self.nodes.borrow();
        let base = nodes[first.id].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for v in vars {
            assert!(std::ptr::eq(v.tape, self), "concat: vars from another tape");
            let s = nodes[v.id].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = vec![0.0; shape.iter().product()];
        let mut start = 0;
        for v in vars {
            let t = &nodes[v.id].value;
            let len = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * len * inner..(o + 1) * len * inner];
                let dst = o * total * inner + start * inner;
                data[dst..dst + len * inner].copy_from_slice(src);
            }
            start += len;
        }
        drop(nodes);
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        let rg = self.requires_grad(&ids);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat { inputs: ids, axis },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "backward: loss from another tape");
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe views fully inside `a`, `b` and `c`,
    // which the callers size as m*k, k*n and m*n respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[1];
            if nodes[*a].requires_grad {
                let mut da = vec![0.0; m * k];
                // dA = G · Bᵀ
                gemm(m, n, k, g, (n as isize, 1), tb.data(), (1, n as isize), &mut da);
                accumulate(grads, nodes, *a, da);
            }
            if nodes[*b].requires_grad {
                let mut db = vec![0.0; k * n];
                // dB = Aᵀ · G
                gemm(k, m, n, ta.data(), (1, k as isize), g, (n as isize, 1), &mut db);
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Binary(kind, a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let oshape = out.shape();
            let numel = out.numel();
            let ba = Bcast::new(oshape, ta.shape());
            let bb = Bcast::new(oshape, tb.shape());
            if nodes[*a].requires_grad {
                let full: Vec<f64> = match kind {
                    Elementwise::Add | Elementwise::Sub => g.to_vec(),
                    Elementwise::Mul => {
                        let bv = bb.expand(tb.data(), numel);
                        g.iter().zip(bv.iter()).map(|(gv, y)| gv * y).collect()
                    }
                    Elementwise::Div => {
                        let bv = bb.expand(tb.data(), numel);
                        g.iter().zip(bv.iter()).map(|(gv, y)| gv / y).collect()
                    }
                };
                accumulate(grads, nodes, *a, ba.reduce(&full, ta.numel()));
            }
            if nodes[*b].requires_grad {
                let full: Vec<f64> = match kind {
                    Elementwise::Add => g.to_vec(),
                    Elementwise::Sub => g.iter().map(|v| -v).collect(),
                    Elementwise::Mul => {
                        let av = ba.expand(ta.data(), numel);
                        g.iter().zip(av.iter()).map(|(gv, x)| gv * x).collect()
                    }
                    Elementwise::Div => {
                        let av = ba.expand(ta.data(), numel);
                        let bv = bb.expand(tb.data(), numel);
                        g.iter()
                            .zip(av.iter().zip(bv.iter()))
                            .map(|(gv, (x, y))| -gv * x / (y * y))
                            .collect()
                    }
                };
                accumulate(grads, nodes, *b, bb.reduce(&full, tb.numel()));
            }
        }
        Op::Neg(x) => accumulate(grads, nodes, *x, g.iter().map(|v| -v).collect()),
        Op::Scale(x, c) => accumulate(grads, nodes, *x, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(x) => accumulate(grads, nodes, *x, g.to_vec()),
        Op::Relu(x) => {
            let xd = nodes[*x].value.data();
            let d = g
                .iter()
                .zip(xd)
                .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Tanh(x) => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(gv, y)| gv * (1.0 - y * y))
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Sigmoid(x) => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(gv, y)| gv * y * (1.0 - y))
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Exp(x) => {
            let d = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Log { input, eps } => {
            let xd = nodes[*input].value.data();
            let d = g.iter().zip(xd).map(|(gv, xv)| gv / (xv + eps)).collect();
            accumulate(grads, nodes, *input, d);
        }
        Op::Abs(x) => {
            let xd = nodes[*x].value.data();
            let d = g
                .iter()
                .zip(xd)
                .map(|(gv, &xv)| if xv > 0.0 { *gv } else if xv < 0.0 { -gv } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Softmax { input, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|l| g[base + l * inner] * y[base + l * inner]).sum();
                    for l in 0..len {
                        let p = base + l * inner;
                        d[p] = y[p] * (g[p] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::Minimum(a, b) => {
            let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
            if nodes[*a].requires_grad {
                let d = (0..g.len()).map(|i| if ad[i] <= bd[i] { g[i] } else { 0.0 }).collect();
                accumulate(grads, nodes, *a, d);
            }
            if nodes[*b].requires_grad {
                let d = (0..g.len()).map(|i| if ad[i] <= bd[i] { 0.0 } else { g[i] }).collect();
                accumulate(grads, nodes, *b, d);
            }
        }
        Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
            let shape = nodes[*input].value.shape();
            let (outer, len, inner) = split_axis(shape, *axis);
            let scale = if matches!(node.op, Op::MeanAxis { .. }) { 1.0 / len as f64 } else { 1.0 };
            let mut d = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        d[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::SumAll(x) => {
            let n = nodes[*x].value.numel();
            accumulate(grads, nodes, *x, vec![g[0]; n]);
        }
        Op::MeanAll(x) => {
            let n = nodes[*x].value.numel();
            accumulate(grads, nodes, *x, vec![g[0] / n as f64; n]);
        }
        Op::MaxAxis { input, argmax, .. } => {
            let n = nodes[*input].value.numel();
            let mut d = vec![0.0; n];
            for (gv, &src) in g.iter().zip(argmax) {
                d[src] += gv;
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let shape = nodes[*input].value.shape();
            let (batch, feat) = (shape[0], shape[1]);
            let gam = nodes[*gamma].value.data();
            if nodes[*gamma].requires_grad {
                let mut dg = vec![0.0; feat];
                for b in 0..batch {
                    for f in 0..feat {
                        dg[f] += g[b * feat + f] * xhat[b * feat + f];
                    }
                }
                accumulate(grads, nodes, *gamma, dg);
            }
            if nodes[*beta].requires_grad {
                let mut db = vec![0.0; feat];
                for b in 0..batch {
                    for f in 0..feat {
                        db[f] += g[b * feat + f];
                    }
                }
                accumulate(grads, nodes, *beta, db);
            }
            if nodes[*input].requires_grad {
                let mut dx = vec![0.0; batch * feat];
                if *train {
                    let bn = batch as f64;
                    for f in 0..feat {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for b in 0..batch {
                            let dxh = g[b * feat + f] * gam[f];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[b * feat + f];
                        }
                        for b in 0..batch {
                            let p = b * feat + f;
                            let dxh = g[p] * gam[f];
                            dx[p] = inv_std[f] / bn * (bn * dxh - sum_d - xhat[p] * sum_dx);
                        }
                    }
                } else {
                    for b in 0..batch {
                        for f in 0..feat {
                            let p = b * feat + f;
                            dx[p] = g[p] * gam[f] * inv_std[f];
                        }
                    }
                }
                accumulate(grads, nodes, *input, dx);
            }
        }
        Op::Bce { pred, target } => {
            let (p, t) = (nodes[*pred].value.data(), nodes[*target].value.data());
            let n = p.len() as f64;
            if nodes[*pred].requires_grad {
                let d = p
                    .iter()
                    .zip(t)
                    .map(|(&pv, &tv)| {
                        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        g[0] * (pc - tv) / (pc * (1.0 - pc)) / n
                    })
                    .collect();
                accumulate(grads, nodes, *pred, d);
            }
            if nodes[*target].requires_grad {
                let d = p
                    .iter()
                    .map(|&pv| {
                        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        -g[0] * (pc.ln() - (1.0 - pc).ln()) / n
                    })
                    .collect();
                accumulate(grads, nodes, *target, d);
            }
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, g.to_vec()),
        Op::Narrow { input, axis, start } => {
            let ishape = nodes[*input].value.shape();
            let (outer, len, inner) = split_axis(ishape, *axis);
            let taken = out.shape()[*axis];
            let mut d = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = &g[o * taken * inner..(o + 1) * taken * inner];
                let dst = (o * len + start) * inner;
                d[dst..dst + taken * inner].copy_from_slice(src);
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut start = 0;
            for &inp in inputs {
                let len = nodes[inp].value.shape()[*axis];
                if nodes[inp].requires_grad {
                    let mut d = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src = o * total * inner + start * inner;
                        d[o * len * inner..(o + 1) * len * inner]
                            .copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(grads, nodes, inp, d);
                }
                start += len;
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = g[i * c + j];
                }
            }
            accumulate(grads, nodes, *x, d);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the forward value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Detached copy of this value as a constant.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.with_value(|t| t.map(f));
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn unary_slice(&self, op: Op, f: fn(&[f64]) -> Vec<f64>) -> Var<'t> {
        let value = self.with_value(|t| Tensor::from_parts(t.shape().to_vec(), f(t.data())));
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut c);
        drop(nodes);
        let rg = self.tape.requires_grad(&[self.id, rhs.id]);
        Ok(self
            .tape
            .push(Tensor::from_parts(vec![m, n], c), Op::MatMul(self.id, rhs.id), rg))
    }

    fn binary(self, rhs: Var<'t>, kind: Elementwise) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let name = match kind {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::Div => "div",
        };
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape()))
        })?;
        if kind == Elementwise::Div && b.data().iter().any(|&v| v == 0.0 || v.is_nan()) {
            return Err(Error::domain("div", "zero or NaN in denominator"));
        }
        let f = match kind {
            Elementwise::Add => |x: f64, y: f64| x + y,
            Elementwise::Sub => |x: f64, y: f64| x - y,
            Elementwise::Mul => |x: f64, y: f64| x * y,
            Elementwise::Div => |x: f64, y: f64| x / y,
        };
        let numel: usize = shape.iter().product();
        let ad = Bcast::new(&shape, a.shape()).expand(a.data(), numel);
        let bd = Bcast::new(&shape, b.shape()).expand(b.data(), numel);
        let data: Vec<f64> = ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect();
        drop(nodes);
        let rg = self.tape.requires_grad(&[self.id, rhs.id]);
        Ok(self.tape.push(
            Tensor::from_parts(shape, data),
            Op::Binary(kind, self.id, rhs.id),
            rg,
        ))
    }

    /// Broadcasting addition.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Elementwise::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Elementwise::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Elementwise::Mul)
    }

    /// Broadcasting division; rejects any zero denominator.
    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Elementwise::Div)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), move |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), move |x| x + c)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary_slice(Op::Tanh(self.id), fastmath::tanh_slice)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary_slice(Op::Sigmoid(self.id), fastmath::sigmoid_slice)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary_slice(Op::Exp(self.id), fastmath::exp_slice)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    /// `ln(x + eps)`; inputs must be non-negative.
    pub fn log(self, eps: f64) -> Result<Var<'t>> {
        let bad = self.with_value(|t| t.data().iter().any(|&v| !(v >= 0.0)));
        if bad || !(eps >= 0.0) {
            return Err(Error::domain("log", "negative or NaN input"));
        }
        if eps == 0.0 && self.with_value(|t| t.data().contains(&0.0)) {
            return Err(Error::domain("log", "zero input without epsilon guard"));
        }
        Ok(self.unary(Op::Log { input: self.id, eps }, move |x| (x + eps).ln()))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(shape)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis("softmax", axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut y = self.with_value(|t| t.data().to_vec());
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(y[base + l * inner]);
                }
                let mut total = 0.0;
                for l in 0..len {
                    let e = fastmath::exp(y[base + l * inner] - mx);
                    y[base + l * inner] = e;
                    total += e;
                }
                for l in 0..len {
                    y[base + l * inner] /= total;
                }
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, y),
            Op::Softmax { input: self.id, axis },
            rg,
        ))
    }

    /// Elementwise minimum; at ties the gradient goes to `self`.
    pub fn minimum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "minimum",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let shape = a.shape().to_vec();
        drop(nodes);
        let rg = self.tape.requires_grad(&[self.id, rhs.id]);
        Ok(self
            .tape
            .push(Tensor::from_parts(shape, data), Op::Minimum(self.id, rhs.id), rg))
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let shape = self.check_axis(if mean { "mean_axis" } else { "sum_axis" }, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        self.with_value(|t| {
            let d = t.data();
            for o in 0..outer {
                for l in 0..len {
                    let row = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
        });
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let op = if mean {
            Op::MeanAxis { input: self.id, axis }
        } else {
            Op::SumAxis { input: self.id, axis }
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(Tensor::from_parts(oshape, out), op, rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Var<'t> {
        let s = self.with_value(|t| t.sum());
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let s = self.with_value(|t| t.mean());
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::MeanAll(self.id), rg)
    }

    /// Maximum over `axis`, removing it. Ties resolve to the lowest index.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis("max_axis", axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        self.with_value(|t| {
            let d = t.data();
            for o in 0..outer {
                for i in 0..inner {
                    let k = o * inner + i;
                    for l in 0..len {
                        let p = (o * len + l) * inner + i;
                        if l == 0 || d[p] > out[k] {
                            out[k] = d[p];
                            argmax[k] = p;
                        }
                    }
                }
            }
        });
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(oshape, out),
            Op::MaxAxis {
                input: self.id,
                argmax,
            },
            rg,
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.check_axis("narrow", axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        self.with_value(|t| {
            for o in 0..outer {
                let s = (o * full + start) * inner;
                data.extend_from_slice(&t.data()[s..s + len * inner]);
            }
        });
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(oshape, data),
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape("transpose", format!("needs 2-D, got {shape:?}")));
        }
        let (r, c) = (shape[0], shape[1]);
        let mut data = vec![0.0; r * c];
        self.with_value(|t| {
            let d = t.data();
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = d[i * c + j];
                }
            }
        });
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(Tensor::from_parts(vec![c, r], data), Op::Transpose(self.id), rg))
    }

    /// Batch normalization of a `[batch, features]` input.
    ///
    /// In training mode the batch statistics normalize the input and the
    /// running statistics are updated in place; in evaluation mode only the
    /// running statistics are used, making the op a fixed affine map.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        stats: &mut BatchNormStats,
        train: bool,
    ) -> Result<Var<'t>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let shape = self.shape();
        if shape.len() != 2
            || gamma.shape() != [shape[1]]
            || beta.shape() != [shape[1]]
            || stats.mean.len() != shape[1]
        {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "input {shape:?}, gamma {:?}, beta {:?}, stats {}",
                    gamma.shape(),
                    beta.shape(),
                    stats.mean.len()
                ),
            ));
        }
        let (batch, feat) = (shape[0], shape[1]);
        if train && batch < 2 {
            return Err(Error::shape("batch_norm", "training mode needs batch >= 2"));
        }
        let x = self.value();
        let xd = x.data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; feat];
            let mut var = vec![0.0; feat];
            for b in 0..batch {
                for f in 0..feat {
                    mean[f] += xd[b * feat + f];
                }
            }
            mean.iter_mut().for_each(|m| *m /= batch as f64);
            for b in 0..batch {
                for f in 0..feat {
                    let d = xd[b * feat + f] - mean[f];
                    var[f] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= batch as f64);
            let unbias = batch as f64 / (batch as f64 - 1.0);
            for f in 0..feat {
                stats.mean[f] = BN_MOMENTUM * stats.mean[f] + (1.0 - BN_MOMENTUM) * mean[f];
                stats.var[f] = BN_MOMENTUM * stats.var[f] + (1.0 - BN_MOMENTUM) * var[f] * unbias;
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = vec![0.0; batch * feat];
        let mut y = vec![0.0; batch * feat];
        for b in 0..batch {
            for f in 0..feat {
                let p = b * feat + f;
                xhat[p] = (xd[p] - mean[f]) * inv_std[f];
                y[p] = gv.data()[f] * xhat[p] + bv.data()[f];
            }
        }
        let rg = self.tape.requires_grad(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            Tensor::from_parts(shape, y),
            Op::BatchNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities `self` against `target`.
    pub fn bce(self, target: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&target);
        let (p, t) = (self.value(), target.value());
        if p.shape() != t.shape() {
            return Err(Error::shape("bce", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let n = p.numel() as f64;
        let loss = -p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&pv, &tv)| {
                let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln()
            })
            .sum::<f64>()
            / n;
        let rg = self.tape.requires_grad(&[self.id, target.id]);
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred: self.id,
                target: target.id,
            },
            rg,
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    fastmath::sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![3]));
        let y = x.softmax(0).unwrap().value();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_and_sigmoid_definitions() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(tape.scalar(0.0).sigmoid().value().item(), 0.5);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let loss = x.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
        assert_eq!(g.get(loss).unwrap().item(), 1.0);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.param(Tensor::zeros(vec![2, 3]));
        let b = tape.param(Tensor::zeros(vec![2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.param(Tensor::zeros(vec![4]));
        assert!(a.add(c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 1.0]));
        assert!(matches!(x.log(1e-12), Err(Error::Domain { .. })));
        let y = tape.constant(t(&[2], &[0.0, 1.0]));
        assert!(matches!(x.div(y), Err(Error::Domain { .. })));
        assert!(y.log(1e-12).is_ok());
    }

    #[test]
    fn constants_are_not_recorded_for_gradients() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.param(t(&[2], &[3.0, 4.0]));
        let c = a.mul(a).unwrap();
        assert!(!c.requires_grad());
        let loss = c.mul(b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 4.0]);
    }

    #[test]
    fn minimum_ties_go_to_first_argument() {
        let tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let b = tape.param(t(&[2], &[1.0, 0.0]));
        let loss = a.minimum(b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_kink_gradient_is_zero() {
        let tape = Tape::new();
        let x = tape.param(t(&[1], &[0.0]));
        let g = tape.backward(x.relu().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn batch_norm_eval_is_affine() {
        let tape = Tape::new();
        let mut stats = BatchNormStats {
            mean: vec![1.0, -1.0],
            var: vec![4.0, 0.25],
        };
        let gamma = tape.constant(t(&[2], &[2.0, 0.5]));
        let beta = tape.constant(t(&[2], &[0.1, -0.1]));
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let before = stats.clone();
        let y = x.batch_norm(gamma, beta, &mut stats, false).unwrap().value();
        assert_eq!(stats, before);
        for b in 0..3 {
            for f in 0..2 {
                let expect = [2.0, 0.5][f] * (x.value().at(&[b, f]) - before.mean[f])
                    / (before.var[f] + BN_EPS).sqrt()
                    + [0.1, -0.1][f];
                assert!((y.at(&[b, f]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let tape = Tape::new();
        let mut stats = BatchNormStats::new(1);
        let gamma = tape.constant(Tensor::ones(vec![1]));
        let beta = tape.constant(Tensor::zeros(vec![1]));
        let x = tape.constant(t(&[2, 1], &[1.0, 3.0]));
        let y = x.batch_norm(gamma, beta, &mut stats, true).unwrap().value();
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance is 2
        assert!((stats.var[0] - (0.9 + 0.2)).abs() < 1e-12);
        assert!((y.data()[0] + y.data()[1]).abs() < 1e-12);
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let left = x.narrow(1, 0, 1).unwrap();
        let right = x.narrow(1, 1, 2).unwrap();
        let joined = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(joined.value(), x.value());
        let w = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.backward(joined.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), w.value().data());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(vec![4, 3]));
        let b = tape.param(Tensor::zeros(vec![3]));
        let loss = x.add(b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 4.0, 4.0]);
    }
}

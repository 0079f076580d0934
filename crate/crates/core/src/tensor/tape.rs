use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use super::kernels::{conv2d_output_extent, gemm, ConvGeometry};
use super::{strides, Tensor, EPSILON_DIV};
use crate::error::{Error, Result};

/// Squash keeps this floor on the norm it divides by.
pub const SQUASH_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Elementwise operators exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        // output index i reads a[i / rep_a] and b[i / rep_b]
        rep_a: usize,
        rep_b: usize,
    },
    AddScalar(usize),
    MulScalar(usize, f64),
    Relu(usize),
    Sqrt(usize),
    Square(usize),
    MatMul(usize, usize),
    Conv2d {
        input: usize,
        kernels: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
        c_out: usize,
    },
    Sum {
        x: usize,
        out_index: Vec<usize>,
        scale: f64,
    },
    Max {
        x: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(usize),
    Transpose(usize),
    Narrow {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
    },
    Stack(Vec<usize>),
    Squash(usize),
    NormLast(usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one reverse pass.
///
/// A tape is single-use: after [`Tape::backward`] the graph is consumed.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if it did not influence the loss or was
    /// not tracked.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, with untouched tracked leaves reported as zeros.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var<'_>> {
        value.ensure_finite(name)?;
        Ok(self.push_arc(Arc::new(value), op, requires_grad))
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
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

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        self.push_arc(Arc::new(t), Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_arc(Arc::new(t), Op::Leaf, false)
    }

    /// Tracked leaf that shares storage with a parameter.
    pub fn param(&self, t: &Arc<Tensor>) -> Var<'_> {
        self.push_arc(Arc::clone(t), Op::Leaf, true)
    }

    /// Untracked leaf that shares storage with a parameter.
    pub fn frozen(&self, t: &Arc<Tensor>) -> Var<'_> {
        self.push_arc(Arc::clone(t), Op::Leaf, false)
    }

    pub fn elementwise<'t>(&'t self, op: Elementwise, operands: &[Var<'t>]) -> Result<Var<'t>> {
        let arity = match op {
            Elementwise::Relu | Elementwise::Sqrt | Elementwise::Square => 1,
            _ => 2,
        };
        if operands.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        let a = operands[0];
        match op {
            Elementwise::Add => a.add(operands[1]),
            Elementwise::Sub => a.sub(operands[1]),
            Elementwise::Mul => a.mul(operands[1]),
            Elementwise::Div => a.div(operands[1]),
            Elementwise::Relu => a.relu(),
            Elementwise::Sqrt => a.sqrt(),
            Elementwise::Square => a.square(),
        }
    }

    /// Stacks same-shaped values along a new leading axis.
    pub fn stack<'t>(&'t self, vars: &[Var<'t>]) -> Result<Var<'t>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(shape.iter().product::<usize>() * vars.len());
        let mut rg = false;
        for v in vars {
            let t = v.value();
            if t.shape() != shape.as_slice() {
                return Err(Error::mismatch("stack", &shape, t.shape()));
            }
            data.extend_from_slice(t.data());
            rg |= v.tracked();
        }
        let mut out_shape = vec![vars.len()];
        out_shape.extend_from_slice(&shape);
        self.push(
            Tensor::from_parts(out_shape, data),
            Op::Stack(vars.iter().map(|v| v.id).collect()),
            rg,
            "stack",
        )
    }

    /// Reverse pass from a scalar loss. Consumes the graph.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        if self.consumed.replace(true) {
            return Err(Error::Contract(
                "backward called twice on the same tape; re-run the forward pass".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(up) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &up, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let g = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(g);
}

fn backprop_node(nodes: &[Node], node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match node.op {
        Op::Leaf => {}
        Op::Binary {
            kind,
            a,
            b,
            rep_a,
            rep_b,
        } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            accumulate(grads, nodes, a, |g| {
                for (i, &u) in up.iter().enumerate() {
                    let d = match kind {
                        BinaryKind::Add | BinaryKind::Sub => 1.0,
                        BinaryKind::Mul => bv[i / rep_b],
                        BinaryKind::Div => 1.0 / bv[i / rep_b],
                    };
                    g[i / rep_a] += u * d;
                }
            });
            accumulate(grads, nodes, b, |g| {
                for (i, &u) in up.iter().enumerate() {
                    let d = match kind {
                        BinaryKind::Add => 1.0,
                        BinaryKind::Sub => -1.0,
                        BinaryKind::Mul => av[i / rep_a],
                        BinaryKind::Div => {
                            let y = bv[i / rep_b];
                            -av[i / rep_a] / (y * y)
                        }
                    };
                    g[i / rep_b] += u * d;
                }
            });
        }
        Op::AddScalar(x) => accumulate(grads, nodes, x, |g| {
            g.iter_mut().zip(up).for_each(|(g, u)| *g += u);
        }),
        Op::MulScalar(x, c) => accumulate(grads, nodes, x, |g| {
            g.iter_mut().zip(up).for_each(|(g, u)| *g += u * c);
        }),
        Op::Relu(x) => {
            let xv = nodes[x].value.data();
            accumulate(grads, nodes, x, |g| {
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        g[i] += up[i];
                    }
                }
            })
        }
        Op::Sqrt(x) => accumulate(grads, nodes, x, |g| {
            let y = out.data();
            for i in 0..g.len() {
                g[i] += up[i] * 0.5 / y[i].max(EPSILON_DIV);
            }
        }),
        Op::Square(x) => {
            let xv = nodes[x].value.data();
            accumulate(grads, nodes, x, |g| {
                for i in 0..g.len() {
                    g[i] += up[i] * 2.0 * xv[i];
                }
            })
        }
        Op::MatMul(a, b) => {
            let at = &nodes[a].value;
            let bt = &nodes[b].value;
            let (m, k) = (at.shape()[0], at.shape()[1]);
            let n = bt.shape()[1];
            accumulate(grads, nodes, a, |g| gemm(m, n, k, 1.0, up, false, bt.data(), true, 1.0, g));
            accumulate(grads, nodes, b, |g| gemm(k, m, n, 1.0, at.data(), true, up, false, 1.0, g));
        }
        Op::Conv2d {
            input,
            kernels,
            bias,
            geom,
            c_out,
        } => {
            let l = geom.positions();
            let p = geom.patch_len();
            if let Some(bias) = bias {
                accumulate(grads, nodes, bias, |g| {
                    for (co, gb) in g.iter_mut().enumerate() {
                        *gb += up[co * l..(co + 1) * l].iter().sum::<f64>();
                    }
                });
            }
            let need_k = nodes[kernels].requires_grad;
            let need_x = nodes[input].requires_grad;
            if need_k {
                let col = geom.im2col(nodes[input].value.data());
                accumulate(grads, nodes, kernels, |g| gemm(c_out, l, p, 1.0, up, false, &col, true, 1.0, g));
            }
            if need_x {
                let mut dcol = vec![0.0; p * l];
                gemm(p, c_out, l, 1.0, nodes[kernels].value.data(), true, up, false, 0.0, &mut dcol);
                accumulate(grads, nodes, input, |g| geom.col2im(&dcol, g));
            }
        }
        Op::Sum {
            x,
            ref out_index,
            scale,
        } => accumulate(grads, nodes, x, |g| {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += up[out_index[i]] * scale;
            }
        }),
        Op::Max { x, ref argmax } => accumulate(grads, nodes, x, |g| {
            for (o, &i) in argmax.iter().enumerate() {
                g[i] += up[o];
            }
        }),
        Op::Softmax { x, outer, len, inner } => {
            let y = out.data();
            accumulate(grads, nodes, x, |g| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| up[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            g[idx(k)] += y[idx(k)] * (up[idx(k)] - dot);
                        }
                    }
                }
            })
        }
        Op::Reshape(x) => accumulate(grads, nodes, x, |g| {
            g.iter_mut().zip(up).for_each(|(g, u)| *g += u);
        }),
        Op::Transpose(x) => {
            let (r, c) = (out.shape()[1], out.shape()[0]);
            accumulate(grads, nodes, x, |g| {
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += up[j * r + i];
                    }
                }
            })
        }
        Op::Narrow {
            x,
            outer,
            len,
            inner,
            start,
        } => {
            let take = out.shape().iter().product::<usize>() / (outer * inner);
            accumulate(grads, nodes, x, |g| {
                for o in 0..outer {
                    for k in 0..take {
                        let src = (o * take + k) * inner;
                        let dst = (o * len + start + k) * inner;
                        for i in 0..inner {
                            g[dst + i] += up[src + i];
                        }
                    }
                }
            })
        }
        Op::Stack(ref ids) => {
            let chunk = up.len() / ids.len();
            for (k, &id) in ids.iter().enumerate() {
                accumulate(grads, nodes, id, |g| {
                    g.iter_mut()
                        .zip(&up[k * chunk..(k + 1) * chunk])
                        .for_each(|(g, u)| *g += u);
                });
            }
        }
        Op::Squash(x) => {
            let xv = nodes[x].value.data();
            let d = *nodes[x].value.shape().last().unwrap();
            accumulate(grads, nodes, x, |g| {
                for r in 0..xv.len() / d {
                    let v = &xv[r * d..(r + 1) * d];
                    let u = &up[r * d..(r + 1) * d];
                    let n2: f64 = v.iter().map(|a| a * a).sum();
                    let n = n2.sqrt();
                    let den = (1.0 + n2) * (n + SQUASH_EPS);
                    let gain = n2 / den;
                    // d(gain)/dn divided by n, written to stay finite at n = 0
                    let dden = 2.0 * n * (n + SQUASH_EPS) + (1.0 + n2);
                    let c = (2.0 * den - n * dden) / (den * den);
                    let vu: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        g[r * d + k] += gain * u[k] + c * vu * v[k];
                    }
                }
            })
        }
        Op::NormLast(x) => {
            let xv = nodes[x].value.data();
            let d = *nodes[x].value.shape().last().unwrap();
            let y = out.data();
            accumulate(grads, nodes, x, |g| {
                for r in 0..xv.len() / d {
                    let n = y[r].max(EPSILON_DIV);
                    for k in 0..d {
                        g[r * d + k] += up[r] * xv[r * d + k] / n;
                    }
                }
            })
        }
    }
}

/// Broadcast factor of `small` against `big`: equal shapes, a single element,
/// or a leading-prefix shape replicated over the trailing axes.
fn broadcast_rep(small: &[usize], big: &[usize]) -> Option<usize> {
    let ns: usize = small.iter().product();
    let nb: usize = big.iter().product();
    if small == big {
        Some(1)
    } else if ns == 1 || (small.len() < big.len() && big.starts_with(small)) {
        Some(nb / ns)
    } else {
        None
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind, name: &'static str) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out_shape = if a.numel() >= b.numel() { a.shape() } else { b.shape() };
        let (rep_a, rep_b) = match (broadcast_rep(a.shape(), out_shape), broadcast_rep(b.shape(), out_shape)) {
            (Some(ra), Some(rb)) => (ra, rb),
            _ => return Err(Error::mismatch(name, a.shape(), b.shape())),
        };
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        if kind == BinaryKind::Div && bd.iter().any(|v| v.abs() < EPSILON_DIV) {
            return Err(Error::NumericGuard { op: name, eps: EPSILON_DIV });
        }
        let data = (0..n)
            .map(|i| {
                let (x, y) = (ad[i / rep_a], bd[i / rep_b]);
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        self.tape.push(
            Tensor::from_parts(out_shape.to_vec(), data),
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                rep_a,
                rep_b,
            },
            self.tracked() || other.tracked(),
            name,
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    /// Elementwise product. A leading-prefix operand (e.g. an `[h, w]` map
    /// against `[h, w, d]`) is replicated over the trailing axes.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    fn unary(self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let v = self.value().map(f);
        self.tape.push(v, op, self.tracked(), name)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", Op::AddScalar(self.id), |x| x + c)
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("mul_scalar", Op::MulScalar(self.id, c), |x| x * c)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary("sqrt", Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", Op::Square(self.id), |x| x * x)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::mismatch("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut c);
        self.tape.push(
            Tensor::from_parts(vec![m, n], c),
            Op::MatMul(self.id, other.id),
            self.tracked() || other.tracked(),
            "matmul",
        )
    }

    /// 2-D convolution of a `[c_in, h, w]` input with `[c_out, c_in, kh, kw]`
    /// kernels and an optional per-channel bias.
    pub fn conv2d(self, kernels: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Result<Var<'t>> {
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let x = self.value();
        let k = kernels.value();
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 3 || ks.len() != 4 || xs[0] != ks[1] {
            return Err(Error::mismatch("conv2d", xs, ks));
        }
        let (c_out, c_in, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        let (h, w) = (xs[1], xs[2]);
        let (Some(h_out), Some(w_out)) = (
            conv2d_output_extent(h, kh, stride, padding),
            conv2d_output_extent(w, kw, stride, padding),
        ) else {
            return Err(Error::mismatch("conv2d", xs, ks));
        };
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            h_out,
            w_out,
        };
        let l = geom.positions();
        let col = geom.im2col(x.data());
        let mut out = vec![0.0; c_out * l];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [c_out] {
                return Err(Error::mismatch("conv2d_bias", bv.shape(), &[c_out]));
            }
            for (co, &bias) in bv.data().iter().enumerate() {
                out[co * l..(co + 1) * l].fill(bias);
            }
        }
        gemm(c_out, geom.patch_len(), l, 1.0, k.data(), false, &col, false, 1.0, &mut out);
        let rg = self.tracked() || kernels.tracked() || bias.is_some_and(|b| b.tracked());
        self.tape.push(
            Tensor::from_parts(vec![c_out, h_out, w_out], out),
            Op::Conv2d {
                input: self.id,
                kernels: kernels.id,
                bias: bias.map(|b| b.id),
                geom,
                c_out,
            },
            rg,
            "conv2d",
        )
    }

    /// Reduces over `axes`, dropping them from the shape. Reducing every axis
    /// yields shape `[1]`.
    pub fn reduce(self, op: Reduce, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() || reduced[a] {
                return Err(Error::mismatch("reduce", shape, axes));
            }
            reduced[a] = true;
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let in_strides = strides(shape);
        // stride of each kept input axis within the output
        let mut out_strides = vec![0usize; shape.len()];
        let mut acc = 1;
        for a in (0..shape.len()).rev() {
            if !reduced[a] {
                out_strides[a] = acc;
                acc *= shape[a];
            }
        }
        let out_index: Vec<usize> = (0..x.numel())
            .map(|i| {
                (0..shape.len())
                    .map(|a| (i / in_strides[a]) % shape[a] * out_strides[a])
                    .sum()
            })
            .collect();
        let n_out: usize = out_shape.iter().product();
        let count = x.numel() / n_out;
        let xd = x.data();
        match op {
            Reduce::Sum | Reduce::Mean => {
                let scale = if op == Reduce::Mean { 1.0 / count as f64 } else { 1.0 };
                let mut out = vec![0.0; n_out];
                for (i, &o) in out_index.iter().enumerate() {
                    out[o] += xd[i];
                }
                out.iter_mut().for_each(|v| *v *= scale);
                self.tape.push(
                    Tensor::from_parts(out_shape, out),
                    Op::Sum {
                        x: self.id,
                        out_index,
                        scale,
                    },
                    self.tracked(),
                    "reduce",
                )
            }
            Reduce::Max => {
                let mut argmax: Vec<Option<usize>> = vec![None; n_out];
                for (i, &o) in out_index.iter().enumerate() {
                    match argmax[o] {
                        Some(j) if xd[j] >= xd[i] => {}
                        _ => argmax[o] = Some(i),
                    }
                }
                let argmax: Vec<usize> = argmax.into_iter().map(|a| a.unwrap()).collect();
                let out = argmax.iter().map(|&i| xd[i]).collect();
                self.tape.push(
                    Tensor::from_parts(out_shape, out),
                    Op::Max { x: self.id, argmax },
                    self.tracked(),
                    "reduce_max",
                )
            }
        }
    }

    pub fn sum(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(Reduce::Sum, axes)
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(Reduce::Sum, &axes)
    }

    pub fn mean(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(Reduce::Mean, axes)
    }

    pub fn max(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(Reduce::Max, axes)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.shape().len() {
            return Err(Error::mismatch("softmax", x.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (xd[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
            self.tracked(),
            "softmax",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let t = (*self.value()).clone().reshaped(shape)?;
        self.tape.push(t, Op::Reshape(self.id), self.tracked(), "reshape")
    }

    /// Transpose of a 2-D value.
    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::mismatch("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let xd = x.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        self.tape
            .push(Tensor::from_parts(vec![c, r], out), Op::Transpose(self.id), self.tracked(), "transpose")
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::mismatch("narrow", s, &[axis, start, len]));
        }
        let (outer, full, inner) = axis_split(s, axis);
        let xd = x.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Narrow {
                x: self.id,
                outer,
                len: full,
                inner,
                start,
            },
            self.tracked(),
            "narrow",
        )
    }

    /// Row `k` of the leading axis, with that axis removed.
    pub fn select(self, k: usize) -> Result<Var<'t>> {
        let s = self.shape();
        let rest = if s.len() > 1 { s[1..].to_vec() } else { vec![1] };
        self.narrow(0, k, 1)?.reshape(&rest)
    }

    /// Capsule squash along the last axis:
    /// `(|v|^2 / (1 + |v|^2)) * v / (|v| + eps)`.
    pub fn squash(self) -> Result<Var<'t>> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let n2: f64 = row.iter().map(|a| a * a).sum();
            let n = n2.sqrt();
            let gain = n2 / ((1.0 + n2) * (n + SQUASH_EPS));
            row.iter_mut().for_each(|a| *a *= gain);
        }
        self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Squash(self.id),
            self.tracked(),
            "squash",
        )
    }

    /// Euclidean norm over the last axis.
    pub fn norm_last(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        let d = *s.last().unwrap();
        let out: Vec<f64> = x
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        self.tape
            .push(Tensor::from_parts(shape, out), Op::NormLast(self.id), self.tracked(), "norm")
    }
}

//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse, accumulates
//! adjoints and returns the gradients of every leaf that was created with
//! `requires_grad`. The record is cleared afterwards; handles from before the
//! clear become stale and panic when used.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use super::tensor::{gemm, Tensor};
use super::NumericsError;

/// `softplus(x)` with the overflow-safe branch for large inputs.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Geometry of a square-kernel 2-D convolution over `[batch, C·H·W]` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfold one image into a `[C·k·k, Ho·Wo]` patch matrix.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            dst[oi * wo + oj] = if ii < 0
                                || jj < 0
                                || ii >= self.height as isize
                                || jj >= self.width as isize
                            {
                                0.0
                            } else {
                                image[(c * self.height + ii as usize) * self.width + jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatter-add patch gradients back into an image.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= self.height as isize {
                            continue;
                        }
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj < 0 || jj >= self.width as isize {
                                continue;
                            }
                            image[(c * self.height + ii as usize) * self.width + jj as usize] +=
                                src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `s·x + c`; only the scale matters for the adjoint.
    Affine(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    ClampMin(usize, f64),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeometry,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Record {
    nodes: Vec<Node>,
    generation: u64,
}

/// Gradient tape. Single-threaded; never share one between threads.
#[derive(Default)]
pub struct Tape {
    record: RefCell<Record>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    generation: u64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
    generation: u64,
}

impl Gradients {
    /// Gradient of the loss with respect to `leaf`, if it was reached.
    pub fn get(&self, leaf: Var<'_>) -> Option<&Tensor> {
        assert_eq!(
            leaf.generation, self.generation,
            "gradient lookup with a handle from another tape generation"
        );
        self.by_id.get(&leaf.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<&Tensor> {
        self.by_id.get(&id)
    }
}

fn broadcast_dims(
    op: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(usize, usize), NumericsError> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(NumericsError::ShapeMismatch {
            op,
            lhs: vec![a.0, a.1],
            rhs: vec![b.0, b.1],
        }),
    }
}

/// Elementwise binary op with row/column broadcasting of size-1 extents.
fn zip_broadcast(
    a: &Tensor,
    b: &Tensor,
    out: (usize, usize),
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    if (ar, ac) == (br, bc) {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::matrix(ar, ac, data);
    }
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(out.0 * out.1);
    for i in 0..out.0 {
        let ai = if ar == 1 { 0 } else { i };
        let bi = if br == 1 { 0 } else { i };
        for j in 0..out.1 {
            let aj = if ac == 1 { 0 } else { j };
            let bj = if bc == 1 { 0 } else { j };
            data.push(f(ad[ai * ac + aj], bd[bi * bc + bj]));
        }
    }
    Tensor::matrix(out.0, out.1, data)
}

/// Sum a full-size adjoint down to a (possibly broadcast) operand shape.
fn reduce_to(g: Tensor, rows: usize, cols: usize) -> Tensor {
    if g.rows() == rows && g.cols() == cols {
        return g;
    }
    let (gr, gc) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(rows, cols);
    let od = out.data_mut();
    for i in 0..gr {
        let oi = if rows == 1 { 0 } else { i };
        for j in 0..gc {
            let oj = if cols == 1 { 0 } else { j };
            od[oi * cols + oj] += g.data()[i * gc + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.record.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut rec = self.record.borrow_mut();
        let id = rec.nodes.len();
        rec.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id,
            generation: rec.generation,
        }
    }

    /// Record a leaf. Rank > 2 tensors are rejected.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>, NumericsError> {
        let (r, c) = value.dims2()?;
        let value = value.reshaped(vec![r, c])?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true).expect("parameter tensors are rank ≤ 2")
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false).expect("constant tensors are rank ≤ 2")
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Reverse sweep from `loss`, then clear the record.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, NumericsError> {
        self.check(loss);
        let mut rec = self.record.borrow_mut();
        let shape = rec.nodes[loss.id].value.shape().to_vec();
        if rec.nodes[loss.id].value.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(shape));
        }
        let nodes = &rec.nodes;
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(Tensor::full(shape[0], shape[1], 1.0));
        let mut out = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(nodes, id, g, &mut adj, &mut out);
        }

        let generation = rec.generation;
        rec.nodes.clear();
        rec.generation += 1;
        Ok(Gradients {
            by_id: out,
            generation,
        })
    }

    /// Drop the record without differentiating.
    pub fn clear(&self) {
        let mut rec = self.record.borrow_mut();
        rec.nodes.clear();
        rec.generation += 1;
    }

    fn check(&self, v: Var<'_>) {
        assert!(std::ptr::eq(self, v.tape), "variable belongs to another tape");
        let rec = self.record.borrow();
        assert_eq!(
            v.generation, rec.generation,
            "stale variable used after the tape was cleared"
        );
    }
}

fn accumulate(adj: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut adj[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(
    nodes: &[Node],
    id: usize,
    g: Tensor,
    adj: &mut [Option<Tensor>],
    out: &mut HashMap<usize, Tensor>,
) {
    let y = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {
            out.insert(id, g);
        }
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let (m, k) = (val(a).rows(), val(a).cols());
            let n = val(b).cols();
            if needs(a) {
                let mut ga = Tensor::zeros(m, k);
                // dA = G · Bᵀ
                gemm(m, n, k, g.data(), (n as isize, 1), val(b).data(), (1, n as isize), ga.data_mut(), false);
                accumulate(adj, nodes, a, ga);
            }
            if needs(b) {
                let mut gb = Tensor::zeros(k, n);
                // dB = Aᵀ · G
                gemm(k, m, n, val(a).data(), (1, k as isize), g.data(), (n as isize, 1), gb.data_mut(), false);
                accumulate(adj, nodes, b, gb);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let (a, b) = (*a, *b);
            let sub = matches!(nodes[id].op, Op::Sub(..));
            if needs(b) {
                let mut gb = reduce_to(g.clone(), val(b).rows(), val(b).cols());
                if sub {
                    gb.scale_in_place(-1.0);
                }
                accumulate(adj, nodes, b, gb);
            }
            if needs(a) {
                accumulate(adj, nodes, a, reduce_to(g, val(a).rows(), val(a).cols()));
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let shape = (g.rows(), g.cols());
            if needs(a) {
                let ga = zip_broadcast(&g, val(b), shape, |gv, bv| gv * bv);
                accumulate(adj, nodes, a, reduce_to(ga, val(a).rows(), val(a).cols()));
            }
            if needs(b) {
                let gb = zip_broadcast(&g, val(a), shape, |gv, av| gv * av);
                accumulate(adj, nodes, b, reduce_to(gb, val(b).rows(), val(b).cols()));
            }
        }
        Op::Div(a, b) => {
            let (a, b) = (*a, *b);
            let shape = (g.rows(), g.cols());
            if needs(a) {
                let ga = zip_broadcast(&g, val(b), shape, |gv, bv| gv / bv);
                accumulate(adj, nodes, a, reduce_to(ga, val(a).rows(), val(a).cols()));
            }
            if needs(b) {
                // d(a/b)/db = -y/b
                let gy = zip_broadcast(&g, y, shape, |gv, yv| -gv * yv);
                let gb = zip_broadcast(&gy, val(b), shape, |v, bv| v / bv);
                accumulate(adj, nodes, b, reduce_to(gb, val(b).rows(), val(b).cols()));
            }
        }
        Op::Affine(x, s) => {
            let mut gx = g;
            gx.scale_in_place(*s);
            accumulate(adj, nodes, *x, gx);
        }
        Op::Tanh(x) => unary(adj, nodes, *x, &g, y, |_, yv| 1.0 - yv * yv),
        Op::Sigmoid(x) => unary(adj, nodes, *x, &g, y, |_, yv| yv * (1.0 - yv)),
        // σ(x) = 1 − e^{−softplus(x)}
        Op::Softplus(x) => unary(adj, nodes, *x, &g, y, |_, yv| -(-yv).exp_m1()),
        Op::Exp(x) => unary(adj, nodes, *x, &g, y, |_, yv| yv),
        Op::Log(x) => unary(adj, nodes, *x, &g, y, |xv, _| 1.0 / xv),
        Op::Square(x) => unary(adj, nodes, *x, &g, y, |xv, _| 2.0 * xv),
        Op::Sqrt(x) => unary(adj, nodes, *x, &g, y, |_, yv| 0.5 / yv),
        Op::ClampMin(x, lo) => {
            let lo = *lo;
            unary(adj, nodes, *x, &g, y, move |xv, _| if xv >= lo { 1.0 } else { 0.0 })
        }
        Op::Sum(x) => {
            let gv = g.data()[0];
            let xs = val(*x);
            accumulate(adj, nodes, *x, Tensor::full(xs.rows(), xs.cols(), gv));
        }
        Op::Mean(x) => {
            let xs = val(*x);
            let gv = g.data()[0] / xs.numel() as f64;
            accumulate(adj, nodes, *x, Tensor::full(xs.rows(), xs.cols(), gv));
        }
        Op::SumRows(x) => {
            let xs = val(*x);
            let (r, c) = (xs.rows(), xs.cols());
            let mut gx = Vec::with_capacity(r * c);
            for i in 0..r {
                gx.extend(std::iter::repeat(g.data()[i]).take(c));
            }
            accumulate(adj, nodes, *x, Tensor::matrix(r, c, gx));
        }
        Op::SumCols(x) => {
            let xs = val(*x);
            let (r, c) = (xs.rows(), xs.cols());
            let gx = g.repeat_rows(r);
            debug_assert_eq!(gx.numel(), r * c);
            accumulate(adj, nodes, *x, gx);
        }
        Op::Concat(parts) => {
            let rows = g.rows();
            let total = g.cols();
            let mut offset = 0;
            for &p in parts {
                let c = val(p).cols();
                if needs(p) {
                    let mut gp = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                    }
                    accumulate(adj, nodes, p, Tensor::matrix(rows, c, gp));
                }
                offset += c;
            }
        }
        Op::Slice(x, start, end) => {
            let xs = val(*x);
            let (r, c) = (xs.rows(), xs.cols());
            let w = end - start;
            let mut gx = Tensor::zeros(r, c);
            for i in 0..r {
                gx.data_mut()[i * c + start..i * c + end]
                    .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            accumulate(adj, nodes, *x, gx);
        }
        Op::Conv2d { x, w, b, geom } => {
            conv_backward(nodes, adj, *x, *w, *b, geom, &g);
        }
    }
}

fn unary(
    adj: &mut [Option<Tensor>],
    nodes: &[Node],
    x: usize,
    g: &Tensor,
    y: &Tensor,
    dfdx: impl Fn(f64, f64) -> f64,
) {
    if !nodes[x].requires_grad {
        return;
    }
    let xs = &nodes[x].value;
    let data = g
        .data()
        .iter()
        .zip(xs.data())
        .zip(y.data())
        .map(|((&gv, &xv), &yv)| gv * dfdx(xv, yv))
        .collect();
    accumulate(adj, nodes, x, Tensor::matrix(xs.rows(), xs.cols(), data));
}

fn conv_backward(
    nodes: &[Node],
    adj: &mut [Option<Tensor>],
    x: usize,
    w: usize,
    b: usize,
    geom: &ConvGeometry,
    g: &Tensor,
) {
    let xs = &nodes[x].value;
    let ws = &nodes[w].value;
    let batch = xs.rows();
    let (patch, spatial) = (geom.patch_len(), geom.out_height() * geom.out_width());
    let cout = geom.out_channels;
    let mut cols = vec![0.0; patch * spatial];
    let mut gw = Tensor::zeros(cout, patch);
    let mut gb = Tensor::zeros(1, cout);
    let mut gx = Tensor::zeros(batch, geom.input_len());
    let mut gcols = vec![0.0; patch * spatial];
    for item in 0..batch {
        let gi = &g.data()[item * cout * spatial..(item + 1) * cout * spatial];
        geom.im2col(xs.row_slice(item), &mut cols);
        if nodes[w].requires_grad {
            // dW += G_i · colsᵀ
            gemm(cout, spatial, patch, gi, (spatial as isize, 1), &cols, (1, spatial as isize), gw.data_mut(), true);
        }
        if nodes[b].requires_grad {
            for c in 0..cout {
                gb.data_mut()[c] += gi[c * spatial..(c + 1) * spatial].iter().sum::<f64>();
            }
        }
        if nodes[x].requires_grad {
            // dcols = Wᵀ · G_i
            gemm(patch, cout, spatial, ws.data(), (1, patch as isize), gi, (spatial as isize, 1), &mut gcols, false);
            let row = &mut gx.data_mut()[item * geom.input_len()..(item + 1) * geom.input_len()];
            geom.col2im(&gcols, row);
        }
    }
    accumulate(adj, nodes, w, gw);
    accumulate(adj, nodes, b, gb);
    accumulate(adj, nodes, x, gx);
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        self.tape.check(*self);
        let rec = self.tape.record.borrow();
        f(&rec.nodes[self.id].value)
    }

    fn requires_grad(&self) -> bool {
        self.with_value(|_| ()); // generation check
        self.tape.record.borrow().nodes[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor {
        self.with_value(Tensor::clone)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.with_value(|t| (t.rows(), t.cols()))
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> f64 {
        self.with_value(|t| t.data()[0])
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn unary_op(&self, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.with_value(|t| t.map(&f));
        self.tape.push(value, op(self.id), self.requires_grad())
    }

    fn binary_op(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, NumericsError> {
        self.tape.check(other);
        let value = {
            let rec = self.tape.record.borrow();
            let (a, b) = (&rec.nodes[self.id].value, &rec.nodes[other.id].value);
            let out = broadcast_dims(name, (a.rows(), a.cols()), (b.rows(), b.cols()))?;
            zip_broadcast(a, b, out, f)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op(self.id, other.id), rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary_op(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary_op(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary_op(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary_op(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.tape.check(other);
        let value = {
            let rec = self.tape.record.borrow();
            let (a, b) = (&rec.nodes[self.id].value, &rec.nodes[other.id].value);
            let (m, k) = (a.rows(), a.cols());
            let (k2, n) = (b.rows(), b.cols());
            if k != k2 {
                return Err(NumericsError::ShapeMismatch {
                    op: "matmul",
                    lhs: vec![m, k],
                    rhs: vec![k2, n],
                });
            }
            let mut c = Tensor::zeros(m, n);
            gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), c.data_mut(), false);
            c
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// `scale·x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'t> {
        let value = self.with_value(|t| t.map(|v| scale * v + shift));
        self.tape
            .push(value, Op::Affine(self.id, scale), self.requires_grad())
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn neg(&self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary_op(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary_op(Op::Sigmoid, sigmoid)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary_op(Op::Softplus, softplus)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary_op(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary_op(Op::Log, f64::ln)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary_op(Op::Square, |v| v * v)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary_op(Op::Sqrt, f64::sqrt)
    }

    /// `max(x, lo)`; the gradient is cut where the clamp is active.
    pub fn clamp_min(&self, lo: f64) -> Var<'t> {
        let value = self.with_value(|t| t.map(|v| v.max(lo)));
        self.tape
            .push(value, Op::ClampMin(self.id, lo), self.requires_grad())
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(&self) -> Var<'t> {
        let value = self.with_value(|t| Tensor::scalar(t.sum()));
        self.tape.push(value, Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let value = self.with_value(|t| Tensor::scalar(t.sum() / t.numel() as f64));
        self.tape.push(value, Op::Mean(self.id), self.requires_grad())
    }

    /// Per-row sums: `[r, c] → [r, 1]`.
    pub fn sum_rows(&self) -> Var<'t> {
        let value = self.with_value(|t| {
            let data = (0..t.rows()).map(|i| t.row_slice(i).iter().sum()).collect();
            Tensor::matrix(t.rows(), 1, data)
        });
        self.tape.push(value, Op::SumRows(self.id), self.requires_grad())
    }

    /// Per-column sums: `[r, c] → [1, c]`.
    pub fn sum_cols(&self) -> Var<'t> {
        let value = self.with_value(|t| {
            let mut out = Tensor::zeros(1, t.cols());
            for i in 0..t.rows() {
                for (o, v) in out.data_mut().iter_mut().zip(t.row_slice(i)) {
                    *o += v;
                }
            }
            out
        });
        self.tape.push(value, Op::SumCols(self.id), self.requires_grad())
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>, NumericsError> {
        let value = self.with_value(|t| {
            if start > end || end > t.cols() {
                return Err(NumericsError::ShapeMismatch {
                    op: "slice",
                    lhs: vec![t.rows(), t.cols()],
                    rhs: vec![start, end],
                });
            }
            let w = end - start;
            let mut data = Vec::with_capacity(t.rows() * w);
            for i in 0..t.rows() {
                data.extend_from_slice(&t.row_slice(i)[start..end]);
            }
            Ok(Tensor::matrix(t.rows(), w, data))
        })?;
        Ok(self
            .tape
            .push(value, Op::Slice(self.id, start, end), self.requires_grad()))
    }

    /// Concatenate along columns; all parts must share a row count.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>, NumericsError> {
        let first = parts.first().expect("concat of zero tensors");
        let tape = first.tape;
        let value = {
            for p in parts {
                tape.check(*p);
            }
            let rec = tape.record.borrow();
            let rows = rec.nodes[first.id].value.rows();
            let total: usize = parts.iter().map(|p| rec.nodes[p.id].value.cols()).sum();
            for p in parts {
                let v = &rec.nodes[p.id].value;
                if v.rows() != rows {
                    return Err(NumericsError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![rows, rec.nodes[first.id].value.cols()],
                        rhs: vec![v.rows(), v.cols()],
                    });
                }
            }
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for p in parts {
                    data.extend_from_slice(rec.nodes[p.id].value.row_slice(i));
                }
            }
            Tensor::matrix(rows, total, data)
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// 2-D convolution. `self` is `[batch, C·H·W]`, `weight` is
    /// `[C_out, C·k·k]`, `bias` is `[1, C_out]`; output is `[batch, C_out·Ho·Wo]`.
    pub fn conv2d(
        &self,
        weight: Var<'t>,
        bias: Var<'t>,
        geom: ConvGeometry,
    ) -> Result<Var<'t>, NumericsError> {
        self.tape.check(weight);
        self.tape.check(bias);
        let value = {
            let rec = self.tape.record.borrow();
            let x = &rec.nodes[self.id].value;
            let w = &rec.nodes[weight.id].value;
            let b = &rec.nodes[bias.id].value;
            if x.cols() != geom.input_len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![x.rows(), x.cols()],
                    rhs: vec![geom.in_channels, geom.height, geom.width],
                });
            }
            if w.rows() != geom.out_channels || w.cols() != geom.patch_len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![w.rows(), w.cols()],
                    rhs: vec![geom.out_channels, geom.patch_len()],
                });
            }
            if b.numel() != geom.out_channels {
                return Err(NumericsError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![b.rows(), b.cols()],
                    rhs: vec![1, geom.out_channels],
                });
            }
            let batch = x.rows();
            let (patch, spatial) = (geom.patch_len(), geom.out_height() * geom.out_width());
            let cout = geom.out_channels;
            let mut out = Tensor::zeros(batch, geom.output_len());
            let mut cols = vec![0.0; patch * spatial];
            for item in 0..batch {
                geom.im2col(x.row_slice(item), &mut cols);
                let dst = &mut out.data_mut()[item * cout * spatial..(item + 1) * cout * spatial];
                gemm(cout, patch, spatial, w.data(), (patch as isize, 1), &cols, (spatial as isize, 1), dst, false);
                for c in 0..cout {
                    let bc = b.data()[c];
                    dst[c * spatial..(c + 1) * spatial].iter_mut().for_each(|v| *v += bc);
                }
            }
            out
        };
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.id,
            geom,
        };
        Ok(self.tape.push(value, op, rg))
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn softplus_and_tanh_at_origin() {
        let tape = Tape::new();
        let x = tape.scalar(0.0);
        assert!(close(x.softplus().scalar(), std::f64::consts::LN_2, 1e-15));
        assert_eq!(x.tanh().scalar(), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let tape = Tape::new();
        let m = Tensor::matrix(3, 2, vec![1.0, -2.0, 3.5, 0.25, -7.0, 9.0]);
        let out = tape
            .constant(Tensor::identity(3))
            .matmul(tape.constant(m.clone()))
            .unwrap();
        assert_eq!(out.value(), m);
    }

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.square();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 6.0);
    }

    #[test]
    fn softplus_derivative_is_sigmoid() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let grads = tape.backward(x.softplus()).unwrap();
        assert!(close(grads.get(x).unwrap().data()[0], 0.5, 1e-15));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(
            tape.backward(x.tanh()),
            Err(NumericsError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = a.matmul(b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let c = tape.constant(Tensor::zeros(3, 2));
        let err = a.add(c).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
        assert!(err.to_string().contains("[3, 2]"), "{err}");
    }

    #[test]
    fn tape_is_cleared_after_backward() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let _ = tape.backward(x.square()).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    #[should_panic(expected = "stale")]
    fn stale_handle_panics() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let _ = tape.backward(x.square()).unwrap();
        let _ = x.value();
    }

    #[test]
    fn broadcast_add_reduces_bias_gradient() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 2, vec![1.0; 6]));
        let b = tape.param(Tensor::row(&[0.5, -0.5]));
        let y = x.add(b).unwrap().sum();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn detached_values_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = x.mul(x.detach()).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 2.0);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let geom = ConvGeometry {
            in_channels: 1,
            height: 4,
            width: 4,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 16, img.clone()));
        let w = tape.constant(Tensor::matrix(1, 9, k));
        let b = tape.constant(Tensor::zeros(1, 1));
        assert_eq!(x.conv2d(w, b, geom).unwrap().value().data(), img.as_slice());
    }
}

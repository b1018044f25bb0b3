//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive applied to a [`Var`] appends a node holding its output value
//! and, when any input requires a gradient, the inputs and saved state needed
//! by its backward rule. [`Tape::backward`] replays the record in reverse.
//!
//! A tape lives for one training step and is confined to one thread.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::numerics::tensor::numel;
use crate::numerics::{Real, Tensor};

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Sum {
        input: usize,
        axis: usize,
    },
    Mean {
        input: usize,
        axis: usize,
    },
    SumAll(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Gelu(usize),
    Sqrt(usize),
    Reshape(usize),
    BroadcastTo(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ClampMin(usize, f64),
    Gather {
        input: usize,
        indices: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation record for one forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the loss with respect to `var`, or `None` when the loss
    /// does not depend on it through any differentiable path.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad || matches!(op, Op::Leaf) {
            op
        } else {
            Op::Leaf
        };
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

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse pass from a one-element `loss`.
    ///
    /// Gradients of a tensor used several times accumulate additively.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        // only keep gradients for nodes that require them
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], id: usize, g: Tensor<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[id].value.shape());
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, reduce_to(g, val(*a).shape()));
            accumulate(grads, nodes, *b, reduce_to(g, val(*b).shape()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, reduce_to(g, val(*a).shape()));
            let neg = g.map(|x| -x);
            accumulate(grads, nodes, *b, reduce_to(&neg, val(*b).shape()));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                let gb = broadcast_binary(g, vb, |x, y| x * y);
                accumulate(grads, nodes, *a, reduce_to(&gb, va.shape()));
            }
            if nodes[*b].requires_grad {
                let ga = broadcast_binary(g, va, |x, y| x * y);
                accumulate(grads, nodes, *b, reduce_to(&ga, vb.shape()));
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                let ga = broadcast_binary(g, vb, |x, y| x / y);
                accumulate(grads, nodes, *a, reduce_to(&ga, va.shape()));
            }
            if nodes[*b].requires_grad {
                // d(a/b)/db = -out / b
                let t = broadcast_binary(g, out, |x, y| x * y);
                let gb = broadcast_binary(&t, vb, |x, y| -x / y);
                accumulate(grads, nodes, *b, reduce_to(&gb, vb.shape()));
            }
        }
        Op::Scale(a, c) => {
            let c = T::of(*c);
            accumulate(grads, nodes, *a, g.map(|x| x * c));
        }
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                // dA = dC · Bᵀ
                let bt = transpose_last2(vb);
                accumulate(grads, nodes, *a, matmul_kernel(g, &bt));
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ · dC, summed over broadcast batch
                let at = transpose_last2(va);
                let gb = if vb.rank() == 2 && va.rank() > 2 {
                    let k = va.shape()[va.rank() - 1];
                    let n = va.shape()[va.rank() - 2];
                    let m = vb.shape()[1];
                    let batch = va.numel() / (n * k);
                    let a2 = fold_batch_cols(&at, batch, k, n);
                    let g2 = g.reshape(vec![batch * n, m]).expect("reshape");
                    matmul_kernel(&a2, &g2)
                } else {
                    matmul_kernel(&at, g)
                };
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, transpose_last2(g)),
        Op::Concat { inputs, axis } => {
            let mut start = 0;
            for &i in inputs {
                let len = val(i).shape()[*axis];
                if nodes[i].requires_grad {
                    accumulate(grads, nodes, i, slice_kernel(g, *axis, start, start + len));
                }
                start += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = val(*input).shape();
            let (outer, len, inner) = split_axis(in_shape, *axis);
            let take = g.shape()[*axis];
            let mut full = vec![T::zero(); numel(in_shape)];
            let gd = g.data();
            for o in 0..outer {
                for l in 0..take {
                    let src = (o * take + l) * inner;
                    let dst = (o * len + start + l) * inner;
                    full[dst..dst + inner].copy_from_slice(&gd[src..src + inner]);
                }
            }
            accumulate(
                grads,
                nodes,
                *input,
                Tensor::new(in_shape.to_vec(), full).expect("shape"),
            );
        }
        Op::Sum { input, axis } | Op::Mean { input, axis } => {
            let in_shape = val(*input).shape();
            let (outer, len, inner) = split_axis(in_shape, *axis);
            let scale = if matches!(nodes[id].op, Op::Mean { .. }) {
                T::one() / T::of(len as f64)
            } else {
                T::one()
            };
            let gd = g.data();
            let mut full = vec![T::zero(); numel(in_shape)];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        full[(o * len + l) * inner + i] = gd[o * inner + i] * scale;
                    }
                }
            }
            accumulate(
                grads,
                nodes,
                *input,
                Tensor::new(in_shape.to_vec(), full).expect("shape"),
            );
        }
        Op::SumAll(a) => {
            let s = g.item();
            accumulate(grads, nodes, *a, Tensor::full(val(*a).shape().to_vec(), s));
        }
        Op::Exp(a) => accumulate(grads, nodes, *a, zip_map(g, out, |g, y| g * y)),
        Op::Log(a) => accumulate(grads, nodes, *a, zip_map(g, val(*a), |g, x| g / x)),
        Op::Relu(a) => accumulate(
            grads,
            nodes,
            *a,
            zip_map(g, val(*a), |g, x| if x > T::zero() { g } else { T::zero() }),
        ),
        Op::Gelu(a) => accumulate(grads, nodes, *a, zip_map(g, val(*a), |g, x| g * gelu_grad(x))),
        Op::Sqrt(a) => accumulate(grads, nodes, *a, zip_map(g, out, |g, y| g / (T::of(2.0) * y))),
        Op::Reshape(a) | Op::BroadcastTo(a) => {
            let target = val(*a).shape();
            let r = if numel(target) == g.numel() {
                g.reshape(target.to_vec()).expect("reshape")
            } else {
                reduce_to(g, target)
            };
            accumulate(grads, nodes, *a, r);
        }
        Op::Softmax(a) => {
            let d = *out.shape().last().expect("rank");
            let mut r = vec![T::zero(); out.numel()];
            for ((rr, yr), gr) in r.chunks_mut(d).zip(out.data().chunks(d)).zip(g.data().chunks(d)) {
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for ((o, &y), &g) in rr.iter_mut().zip(yr).zip(gr) {
                    *o = y * (g - dot);
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(out.shape().to_vec(), r).expect("shape"));
        }
        Op::LogSoftmax(a) => {
            let d = *out.shape().last().expect("rank");
            let mut r = vec![T::zero(); out.numel()];
            for ((rr, yr), gr) in r.chunks_mut(d).zip(out.data().chunks(d)).zip(g.data().chunks(d)) {
                let gs: T = gr.iter().copied().sum();
                for ((o, &y), &g) in rr.iter_mut().zip(yr).zip(gr) {
                    *o = g - y.exp() * gs;
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(out.shape().to_vec(), r).expect("shape"));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = *out.shape().last().expect("rank");
            let gam = val(*gamma).data();
            if nodes[*gamma].requires_grad || nodes[*beta].requires_grad {
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for (gr, xr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                    }
                }
                accumulate(grads, nodes, *gamma, Tensor::new(vec![d], gg).expect("shape"));
                accumulate(grads, nodes, *beta, Tensor::new(vec![d], gb).expect("shape"));
            }
            if nodes[*x].requires_grad {
                let mut dx = vec![T::zero(); out.numel()];
                let dn = T::of(d as f64);
                for (r, ((dr, gr), xr)) in dx.chunks_mut(d).zip(g.data().chunks(d)).zip(xhat.chunks(d)).enumerate() {
                    // dxhat = g * gamma; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        m1 += dh;
                        m2 += dh * xr[j];
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        dr[j] = rstd[r] * (dh - m1 - xr[j] * m2);
                    }
                }
                accumulate(grads, nodes, *x, Tensor::new(out.shape().to_vec(), dx).expect("shape"));
            }
        }
        Op::ClampMin(a, min) => {
            let m = T::of(*min);
            accumulate(
                grads,
                nodes,
                *a,
                zip_map(g, val(*a), |g, x| if x > m { g } else { T::zero() }),
            );
        }
        Op::Gather { input, indices } => {
            let in_shape = val(*input).shape();
            let mut full = vec![T::zero(); numel(in_shape)];
            for (&ix, &gv) in indices.iter().zip(g.data()) {
                full[ix] += gv;
            }
            accumulate(
                grads,
                nodes,
                *input,
                Tensor::new(in_shape.to_vec(), full).expect("shape"),
            );
        }
    }
}

// ---------------------------------------------------------------------------
// kernels

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape")
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat offsets into a tensor of shape `src` for every element of the
/// broadcast shape `out`.
fn broadcast_offsets(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        strides[i + pad] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let n = numel(out);
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    offs
}

fn broadcast_binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return zip_map(a, b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape()).expect("broadcastable");
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<T> = if a.shape() == out.as_slice() {
        let ob = broadcast_offsets(&out, b.shape());
        ad.iter().zip(ob).map(|(&x, j)| f(x, bd[j])).collect()
    } else if b.shape() == out.as_slice() {
        let oa = broadcast_offsets(&out, a.shape());
        bd.iter().zip(oa).map(|(&y, i)| f(ad[i], y)).collect()
    } else {
        let oa = broadcast_offsets(&out, a.shape());
        let ob = broadcast_offsets(&out, b.shape());
        oa.into_iter().zip(ob).map(|(i, j)| f(ad[i], bd[j])).collect()
    };
    Tensor::new(out, data).expect("shape")
}

/// Sums a broadcast gradient back down to `target`.
fn reduce_to<T: Real>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let offs = broadcast_offsets(g.shape(), target);
    let mut r = vec![T::zero(); numel(target)];
    for (&x, o) in g.data().iter().zip(offs) {
        r[o] += x;
    }
    Tensor::new(target.to_vec(), r).expect("shape")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn transpose_last2<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let r = a.rank();
    let (n, m) = (a.shape()[r - 2], a.shape()[r - 1]);
    let batch = a.numel() / (n * m);
    let mut out = vec![T::zero(); a.numel()];
    let ad = a.data();
    for b in 0..batch {
        let base = b * n * m;
        for i in 0..n {
            for j in 0..m {
                out[base + j * n + i] = ad[base + i * m + j];
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out).expect("shape")
}

/// Aᵀ laid out per batch as [batch, k, n] becomes [k, batch*n].
fn fold_batch_cols<T: Real>(at: &Tensor<T>, batch: usize, k: usize, n: usize) -> Tensor<T> {
    let ad = at.data();
    let mut out = vec![T::zero(); batch * k * n];
    for b in 0..batch {
        for r in 0..k {
            let src = &ad[(b * k + r) * n..(b * k + r + 1) * n];
            out[r * batch * n + b * n..r * batch * n + (b + 1) * n].copy_from_slice(src);
        }
    }
    Tensor::new(vec![k, batch * n], out).expect("shape")
}

fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn matmul_kernel<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let ra = a.rank();
    let (n, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let m = b.shape()[b.rank() - 1];
    let mut shape = a.shape().to_vec();
    shape[ra - 1] = m;
    let mut c = vec![T::zero(); numel(&shape)];
    if b.rank() == 2 {
        // broadcast weight: treat all leading axes as rows
        let rows = a.numel() / k;
        gemm(a.data(), b.data(), &mut c, rows, k, m);
    } else {
        let batch = a.numel() / (n * k);
        for bi in 0..batch {
            gemm(
                &a.data()[bi * n * k..(bi + 1) * n * k],
                &b.data()[bi * k * m..(bi + 1) * k * m],
                &mut c[bi * n * m..(bi + 1) * n * m],
                n,
                k,
                m,
            );
        }
    }
    Tensor::new(shape, c).expect("shape")
}

fn slice_kernel<T: Real>(a: &Tensor<T>, axis: usize, start: usize, end: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(a.shape(), axis);
    let take = end - start;
    let mut out = Vec::with_capacity(outer * take * inner);
    let ad = a.data();
    for o in 0..outer {
        let s = (o * len + start) * inner;
        out.extend_from_slice(&ad[s..s + take * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = take;
    Tensor::new(shape, out).expect("shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let (c, a) = (T::of(GELU_C), T::of(GELU_A));
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a) = (T::of(GELU_C), T::of(GELU_A));
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

// ---------------------------------------------------------------------------
// primitives

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op<T>, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Var<'t, T> {
        let out = f(&self.value());
        let rg = self.requires_grad();
        self.tape.push(out, op, rg)
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        op: fn(usize, usize) -> Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            if broadcast_shape(a.shape(), b.shape()).is_none() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            broadcast_binary(&a, &b, f)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(out, op(self.id, other.id), rg))
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "subtract", Op::Sub, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "multiply", Op::Mul, |x, y| x * y)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "divide", Op::Div, |x, y| x / y)
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let s = T::of(c);
        self.unary(Op::Scale(self.id, c), |a| a.map(|x| x * s))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let s = T::of(c);
        self.unary(Op::AddScalar(self.id), |a| a.map(|x| x + s))
    }

    /// `[..., n, k] x [k, m]` (weight broadcast over leading axes) or
    /// `[..., n, k] x [..., k, m]` with identical leading axes.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            let ok = sa.len() >= 2
                && sb.len() >= 2
                && sa[sa.len() - 1] == sb[sb.len() - 2]
                && (sb.len() == 2 || sa[..sa.len() - 2] == sb[..sb.len() - 2]);
            if !ok {
                return Err(Error::shape("matmul", sa, sb));
            }
            matmul_kernel(&a, &b)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        if self.value().rank() < 2 {
            return Err(Error::shape("transpose", &self.shape(), &[]));
        }
        Ok(self.unary(Op::Transpose(self.id), transpose_last2))
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let tape = first.tape;
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let base = vals[0].shape().to_vec();
            if axis >= base.len() {
                return Err(Error::shape("concat", &base, &[axis]));
            }
            for v in &vals[1..] {
                let s = v.shape();
                let ok =
                    s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
                if !ok {
                    return Err(Error::shape("concat", &base, s));
                }
            }
            let outer = numel(&base[..axis]);
            let inner = numel(&base[axis + 1..]);
            let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let len = v.shape()[axis];
                    data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.rg(&ids);
        Ok(tape.push(out, Op::Concat { inputs: ids, axis }, rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        Ok(self.unary(
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            |a| slice_kernel(a, axis, start, end),
        ))
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(if mean { "mean" } else { "sum" }, &shape, &[axis]));
        }
        let op = if mean {
            Op::Mean { input: self.id, axis }
        } else {
            Op::Sum { input: self.id, axis }
        };
        Ok(self.unary(op, |a| {
            let (outer, len, inner) = split_axis(a.shape(), axis);
            let ad = a.data();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let row = &ad[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += x;
                    }
                }
            }
            if mean {
                let n = T::of(len as f64);
                out.iter_mut().for_each(|x| *x /= n);
            }
            let mut s: Vec<usize> = a.shape().to_vec();
            s.remove(axis);
            if s.is_empty() {
                s.push(1);
            }
            Tensor::new(s, out).expect("shape")
        }))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, true)
    }

    pub fn sum(self) -> Var<'t, T> {
        self.unary(Op::SumAll(self.id), |a| Tensor::scalar(a.data().iter().copied().sum()))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), |a| a.map(|x| x.exp()))
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.value().data().iter().find(|x| **x <= T::zero()) {
            return Err(Error::Domain {
                op: "logarithm",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(Op::Log(self.id), |a| a.map(|x| x.ln())))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |a| a.map(|x| x.max(T::zero())))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(Op::Gelu(self.id), |a| a.map(gelu))
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.value().data().iter().find(|x| **x < T::zero()) {
            return Err(Error::Domain {
                op: "square-root",
                msg: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(Op::Sqrt(self.id), |a| a.map(|x| x.sqrt())))
    }

    pub fn clamp_min(self, min: f64) -> Var<'t, T> {
        let m = T::of(min);
        self.unary(Op::ClampMin(self.id, min), |a| a.map(|x| x.max(m)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let cur = self.shape();
        if numel(&cur) != numel(shape) || shape.contains(&0) {
            return Err(Error::shape("reshape", &cur, shape));
        }
        let s = shape.to_vec();
        Ok(self.unary(Op::Reshape(self.id), |a| a.reshape(s.clone()).expect("reshape")))
    }

    /// Broadcasts to `shape` under NumPy rules.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let cur = self.shape();
        if broadcast_shape(&cur, shape).as_deref() != Some(shape) {
            return Err(Error::shape("broadcast", &cur, shape));
        }
        let s = shape.to_vec();
        Ok(self.unary(Op::BroadcastTo(self.id), |a| {
            let offs = broadcast_offsets(&s, a.shape());
            let ad = a.data();
            Tensor::new(s.clone(), offs.into_iter().map(|o| ad[o]).collect()).expect("shape")
        }))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(self) -> Var<'t, T> {
        self.unary(Op::Softmax(self.id), |a| {
            let d = *a.shape().last().expect("rank");
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(d) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
            Tensor::new(a.shape().to_vec(), out).expect("shape")
        })
    }

    pub fn log_softmax(self) -> Var<'t, T> {
        self.unary(Op::LogSoftmax(self.id), |a| {
            let d = *a.shape().last().expect("rank");
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(d) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
                for x in row.iter_mut() {
                    *x -= lse;
                }
            }
            Tensor::new(a.shape().to_vec(), out).expect("shape")
        })
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let d = *shape.last().expect("rank");
        for p in [gamma, beta] {
            if p.shape() != [d] {
                return Err(Error::shape("layer_norm", &shape, &p.shape()));
            }
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (out, xhat, rstd) = {
            let x = self.value();
            let (g, b) = (gamma.value(), beta.value());
            let rows = x.numel() / d;
            let mut xhat = vec![T::zero(); x.numel()];
            let mut rstd = vec![T::zero(); rows];
            let mut out = vec![T::zero(); x.numel()];
            let dn = T::of(d as f64);
            let e = T::of(eps);
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let rs = T::one() / (var + e).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(shape, out)?, xhat, rstd)
        };
        let rg = self.tape.rg(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Picks flat elements by index into a 1-D tensor.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(Error::contract(format!("gather indices out of range for {n} elements")));
        }
        let idx = indices.to_vec();
        Ok(self.unary(
            Op::Gather {
                input: self.id,
                indices: idx.clone(),
            },
            |a| {
                let ad = a.data();
                Tensor::new(vec![idx.len()], idx.iter().map(|&i| ad[i]).collect()).expect("shape")
            },
        ))
    }
}

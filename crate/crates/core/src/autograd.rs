//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the reverse sweep is a plain backwards walk.

use std::collections::HashMap;

use crate::conv::{self, ConvGeometry};
use crate::nn::ParamStore;
use crate::scalar::{gemm, Scalar};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Broadcast(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { input: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    Softmax(Var, usize),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    LogClamp(Var, T),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Upsample(Var, usize),
    UpsampleBilinear(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A computation tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new() }
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, value: Tensor<T>, op: Op<T>, input: Var) -> Var {
        let ng = self.needs_grad(input);
        self.push(value, op, ng)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Inserts a named parameter once per graph. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let entry = store.entry(name);
        let v = self.push(entry.value.clone(), Op::Leaf, entry.trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Makes later [`Graph::param`] lookups of `name` return `v`, e.g. to differentiate
    /// with respect to chosen parameters.
    pub fn bind_param(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    /// Parameters inserted into this graph, by name.
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary_same(&mut self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "div");
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.unary(v, Op::Scale(a, c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.unary(v, Op::AddScalar(a), a)
    }

    /// `1 - a`, used for complementary masks.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -T::one());
        self.add_scalar(n, T::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.unary(v, Op::Relu(a), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.unary(v, Op::Sigmoid(a), a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.unary(v, Op::Tanh(a), a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.unary(v, Op::Abs(a), a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.unary(v, Op::Square(a), a)
    }

    /// `ln(max(a, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamp(&mut self, a: Var, eps: T) -> Var {
        let v = self.value(a).map(|x| x.max(eps).ln());
        self.unary(v, Op::LogClamp(a, eps), a)
    }

    // ---- shape -------------------------------------------------------------

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        if self.shape(a) == shape {
            return a;
        }
        let v = self.value(a).broadcast_to(shape);
        self.unary(v, Op::Broadcast(a), a)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        self.unary(v, Op::Reshape(a), a)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self.value(a).permute(axes);
        self.unary(v, Op::Permute(a, axes.to_vec()), a)
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value(a).narrow(axis, start, len);
        self.unary(v, Op::Narrow { input: a, axis, start }, a)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let v = Tensor::concat(&parts, axis);
        let ng = inputs.iter().any(|&i| self.needs_grad(i));
        self.push(v, Op::Concat { inputs: inputs.to_vec(), axis }, ng)
    }

    // ---- reductions --------------------------------------------------------

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.value(a).sum_axis(axis);
        self.unary(v, Op::SumAxis(a, axis), a)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(v, Op::SumAll(a), a)
    }

    /// Value from [`Tensor::mean`]; the gradient is that of `sum / n`.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::cast(self.value(a).len() as f64);
        let v = Tensor::scalar(self.value(a).mean());
        let s = self.sum_all(a);
        self.unary(v, Op::Scale(s, T::one() / n), s)
    }

    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let v = softmax(self.value(a), axis);
        self.unary(v, Op::Softmax(a, axis), a)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `op(a) * op(b)` for rank-2 operands or rank-3 operands with equal batch.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let v = matmul(self.value(a), self.value(b), trans_a, trans_b);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(v, Op::MatMul { a, b, trans_a, trans_b }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Var {
        let v = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let ng = self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|b| self.needs_grad(b));
        self.push(v, Op::Conv2d { x, w, b, geom }, ng)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Var {
        let v = conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom, 0);
        let ng = self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|b| self.needs_grad(b));
        self.push(v, Op::ConvTranspose2d { x, w, b, geom }, ng)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let v = conv::upsample_nearest(self.value(x), factor);
        self.unary(v, Op::Upsample(x, factor), x)
    }

    /// Bilinear x2 upsampling of `[N, C, H, W]`.
    pub fn upsample_bilinear2(&mut self, x: Var) -> Var {
        let v = conv::upsample_bilinear2(self.value(x));
        self.unary(v, Op::UpsampleBilinear(x), x)
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Gradients of the scalar `loss` w.r.t. every node that needs one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs_grad(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        // Leaves keep their gradient; interior gradients were consumed.
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs_grad(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape for node {}", v.0);
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x / y));
                }
                if self.needs_grad(*b) {
                    // d(a/b)/db = -out / b
                    let t = g.zip_map(out, |x, o| x * o);
                    self.accumulate(grads, *b, t.zip_map(bv, |x, y| -x / y));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Broadcast(a) => {
                let s = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.reduce_to(&s));
            }
            Op::SumAxis(a, axis) => {
                let s = self.shape(*a).to_vec();
                let mut gs = g.shape().to_vec();
                gs[*axis] = 1;
                self.accumulate(grads, *a, g.clone().reshape(&gs).broadcast_to(&s));
            }
            Op::SumAll(a) => {
                let s = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&s, g.item()));
            }
            Op::Reshape(a) => {
                let s = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&s));
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                self.accumulate(grads, *a, g.permute(&inv));
            }
            Op::Narrow { input, axis, start } => {
                let s = self.shape(*input).to_vec();
                let (outer, n, inner) = split_axis(&s, *axis);
                let len = g.shape()[*axis];
                let mut full = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    full[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, Tensor::from_vec(&s, full));
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.needs_grad(v) {
                        self.accumulate(grads, v, g.narrow(*axis, start, len));
                    }
                    start += len;
                }
            }
            Op::MatMul { a, b, trans_a, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let ga = if *trans_a { matmul(bv, g, *trans_b, true) } else { matmul(g, bv, false, !*trans_b) };
                    self.accumulate(grads, *a, ga);
                }
                if self.needs_grad(*b) {
                    let gb = if *trans_b { matmul(g, av, true, *trans_a) } else { matmul(av, g, !*trans_a, false) };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Softmax(a, axis) => {
                self.accumulate(grads, *a, softmax_backward(out, g, *axis));
            }
            Op::Relu(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| if y > T::zero() { x } else { T::zero() })),
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| x * y * (T::one() - y))),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| x * (T::one() - y * y))),
            Op::Abs(a) => {
                let t = g.zip_map(self.value(*a), |x, v| {
                    if v > T::zero() {
                        x
                    } else if v < T::zero() {
                        -x
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, t);
            }
            Op::Square(a) => {
                let two = T::cast(2.0);
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |x, v| two * x * v));
            }
            Op::LogClamp(a, eps) => {
                let e = *eps;
                let t = g.zip_map(self.value(*a), |x, v| if v > e { x / v } else { T::zero() });
                self.accumulate(grads, *a, t);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *geom,
                    self.needs_grad(*x),
                    self.needs_grad(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *geom,
                    self.needs_grad(*x),
                    self.needs_grad(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Upsample(x, f) => self.accumulate(grads, *x, conv::sum_pool(g, *f)),
            Op::UpsampleBilinear(x) => self.accumulate(grads, *x, conv::upsample_bilinear2_adjoint(g)),
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-shifted softmax along `axis`.
pub fn softmax<T: Scalar>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let mut out = t.data().to_vec();
    if inner == 1 {
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            for v in row.iter_mut() {
                *v = (*v - m).exp_fast();
            }
            let s = T::one() / row.iter().copied().sum::<T>();
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        return Tensor::from_vec(t.shape(), out);
    }
    let mut acc = vec![T::zero(); inner];
    for block in out.chunks_mut(n * inner).take(outer) {
        // Work on whole rows of `inner` values so every loop is contiguous.
        acc.fill(T::neg_infinity());
        for row in block.chunks(inner) {
            for (m, &v) in acc.iter_mut().zip(row) {
                *m = m.max(v);
            }
        }
        for row in block.chunks_mut(inner) {
            for (v, &m) in row.iter_mut().zip(&acc) {
                *v = (*v - m).exp_fast();
            }
        }
        acc.fill(T::zero());
        for row in block.chunks(inner) {
            for (s, &v) in acc.iter_mut().zip(row) {
                *s += v;
            }
        }
        for s in acc.iter_mut() {
            *s = T::one() / *s;
        }
        for row in block.chunks_mut(inner) {
            for (v, &s) in row.iter_mut().zip(&acc) {
                *v *= s;
            }
        }
    }
    Tensor::from_vec(t.shape(), out)
}

/// Softmax vector-Jacobian product `y * (g - sum_axis(g * y))`.
fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (_, n, inner) = split_axis(y.shape(), axis);
    let mut out = vec![T::zero(); y.len()];
    if inner == 1 {
        for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
            let s = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
            for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                *o = yv * (gv - s);
            }
        }
        return Tensor::from_vec(y.shape(), out);
    }
    let mut acc = vec![T::zero(); inner];
    for ((ob, yb), gb) in out.chunks_mut(n * inner).zip(y.data().chunks(n * inner)).zip(g.data().chunks(n * inner)) {
        acc.fill(T::zero());
        for (yr, gr) in yb.chunks(inner).zip(gb.chunks(inner)) {
            for ((s, &yv), &gv) in acc.iter_mut().zip(yr).zip(gr) {
                *s += yv * gv;
            }
        }
        for ((or, yr), gr) in ob.chunks_mut(inner).zip(yb.chunks(inner)).zip(gb.chunks(inner)) {
            for (((o, &yv), &gv), &s) in or.iter_mut().zip(yr).zip(gr).zip(&acc) {
                *o = yv * (gv - s);
            }
        }
    }
    Tensor::from_vec(y.shape(), out)
}

/// Batched or plain matrix product of materialized tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Tensor<T> {
    let (batch, ar, ac, br, bc) = match (a.shape(), b.shape()) {
        (&[ar, ac], &[br, bc]) => (None, ar, ac, br, bc),
        (&[n, ar, ac], &[nb, br, bc]) if n == nb => (Some(n), ar, ac, br, bc),
        (sa, sb) => panic!("matmul: unsupported shapes {sa:?} x {sb:?}"),
    };
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "matmul inner dims: {:?} x {:?} (trans {trans_a}, {trans_b})", a.shape(), b.shape());
    let nb = batch.unwrap_or(1);
    let mut out = vec![T::zero(); nb * m * n];
    for i in 0..nb {
        gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[i * ar * ac..(i + 1) * ar * ac],
            trans_a,
            &b.data()[i * br * bc..(i + 1) * br * bc],
            trans_b,
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    match batch {
        Some(nb) => Tensor::from_vec(&[nb, m, n], out),
        None => Tensor::from_vec(&[m, n], out),
    }
}

pub mod gradcheck {
    //! Central finite differences against the reverse sweep.

    use super::*;

    /// Max over inputs of `|analytic - numeric| / max(|analytic|, |numeric|)` in norm.
    pub fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var, step: f64) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let mut worst: f64 = 0.0;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            let mut numeric = Tensor::zeros(t.shape());
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut shifted: Vec<Tensor<f64>> = inputs.to_vec();
                    shifted[k].data_mut()[i] += delta;
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = shifted.into_iter().map(|t| g2.variable(t)).collect();
                    let o = f(&mut g2, &vs);
                    g2.value(o).item()
                };
                numeric.data_mut()[i] = (eval(step) - eval(-step)) / (2.0 * step);
            }
            let diff = analytic.zip_map(&numeric, |a, b| a - b).norm();
            let scale = analytic.norm().max(numeric.norm()).max(1e-12);
            worst = worst.max(diff / scale);
        }
        worst
    }
}

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s; [`Graph::backward`]
//! walks the tape in reverse. Nodes are appended in topological order, so a
//! node's gradient is complete once the walk reaches it.

use std::cell::{Ref, RefCell};

use crate::kernels;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    SumTo(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    AvgPool(Var, usize),
    Upsample(Var, usize),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    SpatialSoftmax(Var),
    AttnPool(Var, Var),
    Gram(Var),
    MinOf(Vec<Var>),
    GridSample { img: Var, theta: Var, fill: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a computation.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Input node. `requires_grad` marks trainable leaves.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    fn unary(&self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            if va.shape() == vb.shape() {
                va.zip_map(&vb, &f)
            } else {
                let shape = kernels::broadcast_shape(va.shape(), vb.shape()).unwrap_or_else(|| {
                    panic!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape())
                });
                let mut out = Tensor::zeros(&shape);
                let (da, db) = (va.data(), vb.data());
                let dst = out.data_mut();
                kernels::for_each_broadcast(&shape, va.shape(), vb.shape(), |o, i, j| {
                    dst[o] = f(da[i], db[j])
                });
                out
            }
        };
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&self, x: Var, s: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn leaky_relu(&self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, lit(1.0 / n as f64))
    }

    /// Sums down to `shape` (same rank, reduced axes have extent 1).
    pub fn sum_to(&self, x: Var, shape: &[usize]) -> Var {
        let value = kernels::reduce_to(&self.value(x), shape);
        let rg = self.rg(&[x]);
        self.push(value, Op::SumTo(x), rg)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    /// `[m,k] × [k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert!(va.rank() == 2 && vb.rank() == 2, "matmul expects 2-d operands");
            let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
            assert_eq!(k, vb.dim(0), "matmul inner dimension mismatch");
            let mut out = Tensor::zeros(&[m, n]);
            T::gemm(m, k, n, va.data(), false, vb.data(), false, out.data_mut(), false);
            out
        };
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let value = kernels::conv2d_forward(&self.value(x), &self.value(w), stride, pad);
        let rg = self.rg(&[x, w]);
        self.push(value, Op::Conv2d { x, w, stride, pad }, rg)
    }

    pub fn avg_pool(&self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let value = kernels::avg_pool_forward(&self.value(x), factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::AvgPool(x, factor), rg)
    }

    pub fn upsample(&self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let value = kernels::upsample_forward(&self.value(x), factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Upsample(x, factor), rg)
    }

    /// Concatenation along axis 1.
    pub fn concat(&self, xs: &[Var]) -> Var {
        let value = {
            let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
            let refs: Vec<&Tensor<T>> = vals.iter().map(|r| &**r).collect();
            Tensor::concat1(&refs).unwrap_or_else(|e| panic!("concat: {e}"))
        };
        let rg = self.rg(xs);
        self.push(value, Op::Concat(xs.to_vec()), rg)
    }

    /// Slice `[start, start+len)` along axis 1.
    pub fn narrow(&self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).narrow1(start, len);
        let rg = self.rg(&[x]);
        self.push(value, Op::Narrow { x, start }, rg)
    }

    pub fn spatial_softmax(&self, x: Var) -> Var {
        let value = kernels::spatial_softmax_forward(&self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::SpatialSoftmax(x), rg)
    }

    /// `[N,C,H,W]` features pooled by `[N,T,H,W]` weights into `[N,T,C]`.
    pub fn attn_pool(&self, feat: Var, att: Var) -> Var {
        let value = kernels::attn_pool_forward(&self.value(feat), &self.value(att));
        let rg = self.rg(&[feat, att]);
        self.push(value, Op::AttnPool(feat, att), rg)
    }

    pub fn gram(&self, x: Var) -> Var {
        let value = kernels::gram_forward(&self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Gram(x), rg)
    }

    /// Elementwise minimum over equally shaped inputs. The gradient is split
    /// evenly among inputs that tie for the minimum.
    pub fn min_of(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "min_of needs at least one input");
        if xs.len() == 1 {
            return xs[0];
        }
        let value = {
            let mut out = self.value(xs[0]).clone();
            for &v in &xs[1..] {
                out = out.zip_map(&self.value(v), |a, b| a.min(b));
            }
            out
        };
        let rg = self.rg(xs);
        self.push(value, Op::MinOf(xs.to_vec()), rg)
    }

    /// Differentiable affine resampling; see [`kernels::grid_sample_forward`].
    pub fn grid_sample(&self, img: Var, theta: Var, fill: T) -> Var {
        let value = kernels::grid_sample_forward(&self.value(img), &self.value(theta), fill);
        let rg = self.rg(&[img, theta]);
        self.push(value, Op::GridSample { img, theta, fill }, rg)
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(nodes[root.0].value.shape()));
        let mut out: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();

        fn acc<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                Some(s) => s.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                out[id] = Some(g);
                continue;
            }
            let need = |v: &Var| nodes[v.0].requires_grad;
            let val = |v: &Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let neg = matches!(node.op, Op::Sub(..));
                    if need(a) {
                        acc(&mut grads[a.0], kernels::reduce_to(&g, val(a).shape()));
                    }
                    if need(b) {
                        let gb = kernels::reduce_to(&g, val(b).shape());
                        acc(&mut grads[b.0], if neg { gb.map(|x| -x) } else { gb });
                    }
                }
                Op::Mul(a, b) => {
                    for (this, other) in [(a, b), (b, a)] {
                        if !need(this) {
                            continue;
                        }
                        let o = val(other);
                        let prod = if o.shape() == g.shape() {
                            g.zip_map(o, |x, y| x * y)
                        } else {
                            let mut p = g.clone();
                            let od = o.data();
                            let pd = p.data_mut();
                            kernels::for_each_broadcast(g.shape(), o.shape(), o.shape(), |i, j, _| {
                                pd[i] *= od[j]
                            });
                            p
                        };
                        acc(&mut grads[this.0], kernels::reduce_to(&prod, val(this).shape()));
                    }
                }
                Op::Scale(x, s) => acc(&mut grads[x.0], g.map(|v| v * *s)),
                Op::AddScalar(x) | Op::Reshape(x) => {
                    let shape = val(x).shape().to_vec();
                    acc(&mut grads[x.0], g.reshape(&shape).expect("same size"));
                }
                Op::Relu(x) => {
                    acc(&mut grads[x.0], g.zip_map(val(x), |d, v| if v > T::zero() { d } else { T::zero() }))
                }
                Op::LeakyRelu(x, s) => acc(
                    &mut grads[x.0],
                    g.zip_map(val(x), |d, v| if v > T::zero() { d } else { d * *s }),
                ),
                Op::Sigmoid(x) => acc(
                    &mut grads[x.0],
                    g.zip_map(&node.value, |d, y| d * y * (T::one() - y)),
                ),
                Op::Tanh(x) => acc(&mut grads[x.0], g.zip_map(&node.value, |d, y| d * (T::one() - y * y))),
                Op::Abs(x) => acc(
                    &mut grads[x.0],
                    g.zip_map(val(x), |d, v| {
                        if v > T::zero() {
                            d
                        } else if v < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    }),
                ),
                Op::Square(x) => acc(&mut grads[x.0], g.zip_map(val(x), |d, v| d * (v + v))),
                Op::Sum(x) => {
                    let s = g.item();
                    acc(&mut grads[x.0], Tensor::full(val(x).shape(), s));
                }
                Op::SumTo(x) => acc(&mut grads[x.0], kernels::expand_to(&g, val(x).shape())),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                    if need(a) {
                        let mut da = Tensor::zeros(&[m, k]);
                        T::gemm(m, n, k, g.data(), false, vb.data(), true, da.data_mut(), false);
                        acc(&mut grads[a.0], da);
                    }
                    if need(b) {
                        let mut db = Tensor::zeros(&[k, n]);
                        T::gemm(k, m, n, va.data(), true, g.data(), false, db.data_mut(), false);
                        acc(&mut grads[b.0], db);
                    }
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (dx, dw) =
                        kernels::conv2d_backward(val(x), val(w), &g, *stride, *pad, need(x), need(w));
                    if let Some(dx) = dx {
                        acc(&mut grads[x.0], dx);
                    }
                    if let Some(dw) = dw {
                        acc(&mut grads[w.0], dw);
                    }
                }
                Op::AvgPool(x, f) => acc(&mut grads[x.0], kernels::avg_pool_backward(&g, val(x).shape(), *f)),
                Op::Upsample(x, f) => acc(&mut grads[x.0], kernels::upsample_backward(&g, val(x).shape(), *f)),
                Op::Concat(xs) => {
                    let mut start = 0;
                    for x in xs {
                        let c = val(x).dim(1);
                        if need(x) {
                            acc(&mut grads[x.0], g.narrow1(start, c));
                        }
                        start += c;
                    }
                }
                Op::Narrow { x, start } => {
                    let shape = val(x).shape().to_vec();
                    let (n, c) = (shape[0], shape[1]);
                    let len = g.dim(1);
                    let inner: usize = shape[2..].iter().product();
                    let mut dx = Tensor::zeros(&shape);
                    for b in 0..n {
                        let dst = (b * c + start) * inner;
                        let src = b * len * inner;
                        dx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    acc(&mut grads[x.0], dx);
                }
                Op::SpatialSoftmax(x) => acc(&mut grads[x.0], kernels::spatial_softmax_backward(&node.value, &g)),
                Op::AttnPool(f, a) => {
                    let (df, da) = kernels::attn_pool_backward(val(f), val(a), &g);
                    if need(f) {
                        acc(&mut grads[f.0], df);
                    }
                    if need(a) {
                        acc(&mut grads[a.0], da);
                    }
                }
                Op::Gram(x) => acc(&mut grads[x.0], kernels::gram_backward(val(x), &g)),
                Op::MinOf(xs) => {
                    let m = &node.value;
                    let ties: Vec<T> = (0..m.len())
                        .map(|i| {
                            let c = xs.iter().filter(|v| val(v).data()[i] == m.data()[i]).count();
                            T::one() / lit::<T>(c as f64)
                        })
                        .collect();
                    for x in xs {
                        if !need(x) {
                            continue;
                        }
                        let vx = val(x).data();
                        let d = Tensor::from_fn(m.shape(), |i| {
                            if vx[i] == m.data()[i] {
                                g.data()[i] * ties[i]
                            } else {
                                T::zero()
                            }
                        });
                        acc(&mut grads[x.0], d);
                    }
                }
                Op::GridSample { img, theta, fill } => {
                    let (di, dt) = kernels::grid_sample_backward(val(img), val(theta), &g, *fill, need(img));
                    if let Some(di) = di {
                        acc(&mut grads[img.0], di);
                    }
                    if need(theta) {
                        acc(&mut grads[theta.0], dt);
                    }
                }
            }
        }
        Gradients { grads: out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&Graph<f64>, Var) -> Var, x0: Tensor<f64>, tol: f64) {
        let g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let y = build(&g, x);
        let y = g.sum(y);
        let grads = g.backward(y);
        let analytic = grads.get_or_zeros(x, x0.shape());
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let g = Graph::new();
                let x = g.leaf(xp, false);
                let y = build(&g, x);
                let s = g.value(y).sum();
                s
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= tol * (1.0 + fd.abs().max(a.abs())),
                "grad mismatch at {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    fn smooth(shape: &[usize], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + seed) * 0.731).sin() * 0.9)
    }

    #[test]
    fn elementwise_gradients() {
        fd_check(|g, x| g.sigmoid(x), smooth(&[2, 3], 0.1), 1e-6);
        fd_check(|g, x| g.tanh(g.scale(x, 1.7)), smooth(&[5], 0.2), 1e-6);
        fd_check(|g, x| g.square(g.add_scalar(x, 0.3)), smooth(&[4], 0.3), 1e-6);
        fd_check(|g, x| g.leaky_relu(x, 0.2), smooth(&[7], 0.45), 1e-6);
    }

    #[test]
    fn broadcasting_gradients() {
        let other = smooth(&[2, 3, 4], 1.0);
        fd_check(
            move |g, x| {
                let o = g.constant(other.clone());
                let p = g.mul(o, x);
                g.sub(p, x)
            },
            smooth(&[2, 1, 4], 0.0),
            1e-6,
        );
        fd_check(|g, x| g.sum_to(g.square(x), &[1, 3, 1]), smooth(&[2, 3, 2], 0.5), 1e-6);
    }

    #[test]
    fn matmul_and_conv_gradients() {
        let w = smooth(&[3, 2], 2.0);
        fd_check(
            move |g, x| {
                let w = g.constant(w.clone());
                g.matmul(x, w)
            },
            smooth(&[4, 3], 0.0),
            1e-6,
        );
        let k = smooth(&[3, 2, 3, 3], 3.0);
        fd_check(
            move |g, x| {
                let k = g.constant(k.clone());
                let y = g.conv2d(x, k, 2, 1);
                g.square(y)
            },
            smooth(&[1, 2, 5, 6], 0.0),
            1e-5,
        );
        let x = smooth(&[2, 2, 4, 4], 4.0);
        fd_check(
            move |g, k| {
                let x = g.constant(x.clone());
                g.square(g.conv2d(x, k, 1, 1))
            },
            smooth(&[3, 2, 3, 3], 0.0),
            1e-5,
        );
    }

    #[test]
    fn structural_op_gradients() {
        fd_check(|g, x| g.square(g.avg_pool(x, 2)), smooth(&[1, 2, 4, 4], 0.0), 1e-6);
        fd_check(|g, x| g.square(g.upsample(x, 2)), smooth(&[1, 2, 2, 3], 0.0), 1e-6);
        fd_check(
            |g, x| {
                let a = g.narrow(x, 1, 2);
                let b = g.narrow(x, 0, 1);
                g.square(g.concat(&[a, b, a]))
            },
            smooth(&[2, 3, 2, 2], 0.0),
            1e-6,
        );
        fd_check(
            |g, x| {
                let s = g.spatial_softmax(x);
                g.mul(s, s)
            },
            smooth(&[1, 2, 3, 3], 0.0),
            1e-6,
        );
        fd_check(|g, x| g.square(g.gram(x)), smooth(&[2, 3, 2, 2], 0.0), 1e-6);
        let feat = smooth(&[2, 3, 2, 2], 7.0);
        fd_check(
            move |g, a| {
                let f = g.constant(feat.clone());
                let att = g.spatial_softmax(a);
                g.square(g.attn_pool(f, att))
            },
            smooth(&[2, 4, 2, 2], 0.0),
            1e-6,
        );
        let att = smooth(&[2, 4, 2, 2], 9.0);
        fd_check(
            move |g, f| {
                let a = g.constant(att.clone());
                g.square(g.attn_pool(f, a))
            },
            smooth(&[2, 3, 2, 2], 0.0),
            1e-6,
        );
    }

    #[test]
    fn min_of_splits_gradient_on_ties() {
        let g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let b = g.leaf(Tensor::from_vec(&[3], vec![1.0, 1.0, 4.0]).unwrap(), true);
        let m = g.min_of(&[a, b]);
        assert_eq!(g.value(m).data(), &[1.0, 1.0, 3.0]);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap().data(), &[0.5, 0.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.5, 1.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::<f32>::new();
        let c = g.constant(Tensor::ones(&[2]));
        let x = g.leaf(Tensor::ones(&[2]), true);
        let y = g.sum(g.mul(c, x));
        let grads = g.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    }
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a leaf created with `requires_grad`.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::tensor::{inverse_permutation, numel, Scalar, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of an N-d convolution, normalised to three spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
    /// Rank of the spatial part of the user-facing tensors (1, 2 or 3).
    pub spatial_rank: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    fn in_positions(&self) -> usize {
        self.input.iter().product()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumLastAxis(Var),
    BiasAxis1(Var, Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Conv(Var, Var, ConvGeom),
    AvgPool2(Var),
    Upsample2(Var),
    Concat1(Vec<Var>),
    MeanSpatial(Var),
    Gather(Var, Rc<Vec<usize>>),
    LogSoftmax(Var),
    Softmax(Var),
    RowNorm(Var, f64),
    RowNormalize(Var, f64),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// The autodiff tape.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const COL_BUDGET: usize = 1 << 22;

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

    fn push(&self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A trainable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that shares storage with an existing tensor.
    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&self, x: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(v, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let cs = T::from_f64_lossy(c);
        self.unary(x, Op::Scale(x, c), |v| v * cs)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let cs = T::from_f64_lossy(c);
        self.unary(x, Op::AddScalar(x), |v| v + cs)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * s })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid_scalar)
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(l).min(h))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = numel(&self.shape(x)) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums the trailing axis: `[..., D] -> [...]`.
    pub fn sum_last_axis(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape();
        let d = *shape.last().expect("sum_last_axis on a scalar");
        let out_shape = &shape[..shape.len() - 1];
        let data: Vec<T> = xv.data().chunks(d.max(1)).map(|c| c.iter().copied().sum()).collect();
        let data = if d == 0 { vec![T::zero(); numel(out_shape)] } else { data };
        let rg = self.rg(x);
        self.push(Tensor::from_vec(out_shape, data), Op::SumLastAxis(x), rg)
    }

    /// Adds `b[c]` to every element of `x[n, c, ...]`.
    pub fn bias_axis1(&self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let shape = xv.shape();
        assert!(shape.len() >= 2, "bias_axis1 needs rank >= 2, got {shape:?}");
        let c = shape[1];
        assert_eq!(bv.len(), c, "bias length {} does not match axis-1 size {c}", bv.len());
        let inner = numel(&shape[2..]);
        let mut out = (*xv).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let bias = bv.data()[i % c];
            for v in chunk {
                *v += bias;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::BiasAxis1(x, b), rg)
    }

    /// Matrix product of rank-2 (`[M,K]x[K,N]`) or batched rank-3 operands.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (batch, m, k, n) = matmul_dims(av.shape(), bv.shape());
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av.data()[bi * m * k..(bi + 1) * m * k],
                k as isize,
                1,
                &bv.data()[bi * k * n..(bi + 1) * k * n],
                n as isize,
                1,
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
            );
        }
        let shape = if av.ndim() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&shape, out), Op::MatMul(a, b), rg)
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Var {
        let v = self.value(x).permute(perm);
        let rg = self.rg(x);
        self.push(v, Op::Permute(x, perm.to_vec()), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self, x: Var) -> Var {
        let nd = self.shape(x).len();
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let v = (*self.value(x)).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    /// Cross-correlation over 1, 2 or 3 trailing spatial axes.
    ///
    /// `x` is `[N, C, *spatial]`, `w` is `[O, C, *kernel]`.
    pub fn conv(&self, x: Var, w: Var, stride: &[usize], padding: &[usize]) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let geom = conv_geom(xv.shape(), wv.shape(), stride, padding);
        let out = conv_forward(&xv, &wv, &geom);
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::Conv(x, w, geom), rg)
    }

    /// 2x2 average pooling with stride 2 over the last two axes.
    pub fn avg_pool2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape();
        let nd = shape.len();
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {shape:?}");
        let (ho, wo) = (h / 2, w / 2);
        let planes = numel(&shape[..nd - 2]);
        let quarter = T::from_f64_lossy(0.25);
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    out.push(s * quarter);
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[nd - 2] = ho;
        out_shape[nd - 1] = wo;
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&out_shape, out), Op::AvgPool2(x), rg)
    }

    /// Nearest-neighbour 2x upsampling over the last two axes.
    pub fn upsample2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape();
        let nd = shape.len();
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let planes = numel(&shape[..nd - 2]);
        let mut out = Vec::with_capacity(planes * h * w * 4);
        for p in 0..planes {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out.push(src[(i / 2) * w + j / 2]);
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[nd - 2] = 2 * h;
        out_shape[nd - 1] = 2 * w;
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&out_shape, out), Op::Upsample2(x), rg)
    }

    /// Concatenates `[N, C_i, ...]` tensors along axis 1.
    pub fn concat1(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values[0].shape().to_vec();
        let n = first[0];
        let inner = numel(&first[2..]);
        let mut total_c = 0;
        for v in &values {
            let s = v.shape();
            assert!(s[0] == n && s[2..] == first[2..], "concat1 shape mismatch {s:?} vs {first:?}");
            total_c += s[1];
        }
        let mut out = Vec::with_capacity(n * total_c * inner);
        for ni in 0..n {
            for v in &values {
                let block = v.shape()[1] * inner;
                out.extend_from_slice(&v.data()[ni * block..(ni + 1) * block]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(&shape, out), Op::Concat1(parts.to_vec()), rg)
    }

    /// Mean over every axis after the first two: `[N, C, ...] -> [N, C]`.
    pub fn mean_spatial(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape();
        let inner = numel(&shape[2..]);
        let inv = T::one() / T::from_usize(inner).unwrap();
        let data: Vec<T> = xv
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&shape[..2], data), Op::MeanSpatial(x), rg)
    }

    /// `out.flat[i] = x.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), indices.len(), "gather shape/index count mismatch");
        let xv = self.value(x);
        let data: Vec<T> = indices
            .iter()
            .map(|&i| {
                assert!(i < xv.len(), "gather index {i} out of range {}", xv.len());
                xv.data()[i]
            })
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(shape, data), Op::Gather(x, Rc::new(indices)), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("log_softmax on scalar");
        let mut out = (*xv).clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("softmax on scalar");
        let mut out = (*xv).clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Euclidean norm of each row of `[N, D]`; the derivative divides by
    /// `max(norm, eps)`.
    pub fn row_norm(&self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = row_width(xv.shape());
        let data: Vec<T> = xv
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let rows = data.len();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[rows], data), Op::RowNorm(x, eps), rg)
    }

    /// Rows of `[N, D]` scaled to unit norm, denominators floored at `eps`.
    pub fn row_normalize(&self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = row_width(xv.shape());
        let e = T::from_f64_lossy(eps);
        let mut out = (*xv).clone();
        for r in out.data_mut().chunks_mut(d) {
            let n = r.iter().map(|&v| v * v).sum::<T>().sqrt().max(e);
            for v in r.iter_mut() {
                *v = *v / n;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::RowNormalize(x, eps), rg)
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::ones(nodes[root.0].value.shape()));
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, d: Tensor<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            let val = |v: Var| Arc::clone(&nodes[v.0].value);
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[a.0].requires_grad {
                        acc(*a, g.zip_map(&bv, |x, y| x * y));
                    }
                    if nodes[b.0].requires_grad {
                        acc(*b, g.zip_map(&av, |x, y| x * y));
                    }
                }
                Op::Scale(x, c) => {
                    let cs = T::from_f64_lossy(*c);
                    acc(*x, g.map(|v| v * cs));
                }
                Op::AddScalar(x) => acc(*x, g),
                Op::Relu(x) => {
                    let xv = val(*x);
                    acc(*x, g.zip_map(&xv, |gv, xv| if xv > T::zero() { gv } else { T::zero() }));
                }
                Op::LeakyRelu(x, s) => {
                    let xv = val(*x);
                    let s = T::from_f64_lossy(*s);
                    acc(*x, g.zip_map(&xv, |gv, xv| if xv > T::zero() { gv } else { gv * s }));
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    acc(*x, g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)));
                }
                Op::Abs(x) => {
                    let xv = val(*x);
                    acc(
                        *x,
                        g.zip_map(&xv, |gv, xv| {
                            if xv > T::zero() {
                                gv
                            } else if xv < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        }),
                    );
                }
                Op::Square(x) => {
                    let xv = val(*x);
                    let two = T::from_f64_lossy(2.0);
                    acc(*x, g.zip_map(&xv, |gv, xv| gv * two * xv));
                }
                Op::Log(x) => {
                    let xv = val(*x);
                    acc(*x, g.zip_map(&xv, |gv, xv| gv / xv));
                }
                Op::Exp(x) => {
                    let y = &node.value;
                    acc(*x, g.zip_map(y, |gv, yv| gv * yv));
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = val(*x);
                    let (l, h) = (T::from_f64_lossy(*lo), T::from_f64_lossy(*hi));
                    acc(*x, g.zip_map(&xv, |gv, xv| if xv >= l && xv <= h { gv } else { T::zero() }));
                }
                Op::SumAll(x) => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    acc(*x, Tensor::full(&shape, g.item()));
                }
                Op::SumLastAxis(x) => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    let d = *shape.last().unwrap();
                    let mut data = Vec::with_capacity(numel(&shape));
                    for &gv in g.data() {
                        data.extend(std::iter::repeat_n(gv, d));
                    }
                    acc(*x, Tensor::from_vec(&shape, data));
                }
                Op::BiasAxis1(x, b) => {
                    if nodes[b.0].requires_grad {
                        let shape = g.shape();
                        let c = shape[1];
                        let inner = numel(&shape[2..]).max(1);
                        let mut db = vec![T::zero(); c];
                        for (i, chunk) in g.data().chunks(inner).enumerate() {
                            db[i % c] += chunk.iter().copied().sum();
                        }
                        acc(*b, Tensor::from_vec(&[c], db));
                    }
                    acc(*x, g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (batch, m, k, n) = matmul_dims(av.shape(), bv.shape());
                    if nodes[a.0].requires_grad {
                        // dA = dC * B^T
                        let mut da = vec![T::zero(); batch * m * k];
                        for bi in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                T::one(),
                                &g.data()[bi * m * n..(bi + 1) * m * n],
                                n as isize,
                                1,
                                &bv.data()[bi * k * n..(bi + 1) * k * n],
                                1,
                                n as isize,
                                T::zero(),
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                k as isize,
                                1,
                            );
                        }
                        acc(*a, Tensor::from_vec(av.shape(), da));
                    }
                    if nodes[b.0].requires_grad {
                        // dB = A^T * dC
                        let mut db = vec![T::zero(); batch * k * n];
                        for bi in 0..batch {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                &av.data()[bi * m * k..(bi + 1) * m * k],
                                1,
                                k as isize,
                                &g.data()[bi * m * n..(bi + 1) * m * n],
                                n as isize,
                                1,
                                T::zero(),
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                n as isize,
                                1,
                            );
                        }
                        acc(*b, Tensor::from_vec(bv.shape(), db));
                    }
                }
                Op::Permute(x, perm) => acc(*x, g.permute(&inverse_permutation(perm))),
                Op::Reshape(x) => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    acc(*x, g.reshape(&shape));
                }
                Op::Conv(x, w, geom) => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (dx, dw) = conv_backward(
                        &xv,
                        &wv,
                        &g,
                        geom,
                        nodes[x.0].requires_grad,
                        nodes[w.0].requires_grad,
                    );
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw);
                    }
                }
                Op::AvgPool2(x) => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    let nd = shape.len();
                    let (h, w) = (shape[nd - 2], shape[nd - 1]);
                    let (ho, wo) = (h / 2, w / 2);
                    let quarter = T::from_f64_lossy(0.25);
                    let mut dx = vec![T::zero(); numel(&shape)];
                    for (p, gp) in g.data().chunks(ho * wo).enumerate() {
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        for i in 0..h {
                            for j in 0..w {
                                dst[i * w + j] = gp[(i / 2) * wo + j / 2] * quarter;
                            }
                        }
                    }
                    acc(*x, Tensor::from_vec(&shape, dx));
                }
                Op::Upsample2(x) => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    let nd = shape.len();
                    let (h, w) = (shape[nd - 2], shape[nd - 1]);
                    let mut dx = vec![T::zero(); numel(&shape)];
                    for (p, gp) in g.data().chunks(4 * h * w).enumerate() {
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                dst[(i / 2) * w + j / 2] += gp[i * 2 * w + j];
                            }
                        }
                    }
                    acc(*x, Tensor::from_vec(&shape, dx));
                }
                Op::Concat1(parts) => {
                    let shape = g.shape().to_vec();
                    let n = shape[0];
                    let inner = numel(&shape[2..]);
                    let total_block = shape[1] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let pshape = nodes[p.0].value.shape().to_vec();
                        let block = pshape[1] * inner;
                        if nodes[p.0].requires_grad {
                            let mut d = Vec::with_capacity(n * block);
                            for ni in 0..n {
                                let start = ni * total_block + offset;
                                d.extend_from_slice(&g.data()[start..start + block]);
                            }
                            acc(p, Tensor::from_vec(&pshape, d));
                        }
                        offset += block;
                    }
                }
                Op::MeanSpatial(x) => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    let inner = numel(&shape[2..]);
                    let inv = T::one() / T::from_usize(inner).unwrap();
                    let mut d = Vec::with_capacity(numel(&shape));
                    for &gv in g.data() {
                        d.extend(std::iter::repeat_n(gv * inv, inner));
                    }
                    acc(*x, Tensor::from_vec(&shape, d));
                }
                Op::Gather(x, idx) => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    let mut d = vec![T::zero(); numel(&shape)];
                    for (&i, &gv) in idx.iter().zip(g.data()) {
                        d[i] += gv;
                    }
                    acc(*x, Tensor::from_vec(&shape, d));
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let d = *y.shape().last().unwrap();
                    let mut dx = g.clone();
                    for (row, yrow) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                        let s: T = row.iter().copied().sum();
                        for (gv, &yv) in row.iter_mut().zip(yrow) {
                            *gv -= yv.exp() * s;
                        }
                    }
                    acc(*x, dx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let d = *y.shape().last().unwrap();
                    let mut dx = g.clone();
                    for (row, yrow) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                        let dot: T = row.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for (gv, &yv) in row.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    acc(*x, dx);
                }
                Op::RowNorm(x, eps) => {
                    let xv = val(*x);
                    let d = row_width(xv.shape());
                    let e = T::from_f64_lossy(*eps);
                    let mut dx = (*xv).clone();
                    for ((row, &gv), &nv) in dx.data_mut().chunks_mut(d).zip(g.data()).zip(node.value.data()) {
                        let denom = nv.max(e);
                        for v in row.iter_mut() {
                            *v = gv * *v / denom;
                        }
                    }
                    acc(*x, dx);
                }
                Op::RowNormalize(x, eps) => {
                    let xv = val(*x);
                    let d = row_width(xv.shape());
                    let e = T::from_f64_lossy(*eps);
                    let y = &node.value;
                    let mut dx = g.clone();
                    for ((grow, yrow), xrow) in dx
                        .data_mut()
                        .chunks_mut(d)
                        .zip(y.data().chunks(d))
                        .zip(xv.data().chunks(d))
                    {
                        let n = xrow.iter().map(|&v| v * v).sum::<T>().sqrt();
                        if n > e {
                            let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                            for (gv, &yv) in grow.iter_mut().zip(yrow) {
                                *gv = (*gv - yv * dot) / n;
                            }
                        } else {
                            for gv in grow.iter_mut() {
                                *gv = *gv / e;
                            }
                        }
                    }
                    acc(*x, dx);
                }
            }
        }
        Gradients { grads }
    }
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn row_width(shape: &[usize]) -> usize {
    assert_eq!(shape.len(), 2, "expected a [N, D] tensor, got {shape:?}");
    shape[1].max(1)
}

fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize) {
    match (a, b) {
        ([m, k], [k2, n]) => {
            assert_eq!(k, k2, "matmul inner dims {a:?} x {b:?}");
            (1, *m, *k, *n)
        }
        ([ba, m, k], [bb, k2, n]) => {
            assert!(ba == bb && k == k2, "batched matmul dims {a:?} x {b:?}");
            (*ba, *m, *k, *n)
        }
        _ => panic!("matmul expects rank-2 or rank-3 operands, got {a:?} x {b:?}"),
    }
}

fn conv_geom(x: &[usize], w: &[usize], stride: &[usize], padding: &[usize]) -> ConvGeom {
    let rank = x.len().checked_sub(2).expect("conv input needs [N, C, ...]");
    assert!((1..=3).contains(&rank), "conv supports 1-3 spatial axes, got {x:?}");
    assert_eq!(w.len(), x.len(), "conv weight rank {w:?} vs input {x:?}");
    assert_eq!(w[1], x[1], "conv channel mismatch: weight {w:?}, input {x:?}");
    assert!(stride.len() == rank && padding.len() == rank, "conv stride/padding rank");
    let pad3 = |v: &[usize], fill: usize| {
        let mut out = [fill; 3];
        out[3 - rank..].copy_from_slice(v);
        out
    };
    let input = pad3(&x[2..], 1);
    let kernel = pad3(&w[2..], 1);
    let stride = pad3(stride, 1);
    let padding = pad3(padding, 0);
    let mut output = [0; 3];
    for a in 0..3 {
        let span = input[a] + 2 * padding[a];
        assert!(span >= kernel[a], "conv kernel larger than padded input on axis {a}");
        output[a] = (span - kernel[a]) / stride[a] + 1;
    }
    ConvGeom {
        batch: x[0],
        in_channels: x[1],
        out_channels: w[0],
        input,
        kernel,
        stride,
        padding,
        output,
        spatial_rank: rank,
    }
}

fn conv_out_shape(g: &ConvGeom) -> Vec<usize> {
    let mut s = vec![g.batch, g.out_channels];
    s.extend_from_slice(&g.output[3 - g.spatial_rank..]);
    s
}

/// Samples per im2col chunk so that the column buffer stays bounded.
fn chunk_size(g: &ConvGeom) -> usize {
    let per = g.patch_len() * g.out_positions();
    (COL_BUDGET / per.max(1)).clamp(1, g.batch.max(1))
}

/// Fills `col[K, chunk*P]` for samples `n0..n0+chunk`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, n0: usize, chunk: usize, col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [od, oh, ow] = g.output;
    let p = g.out_positions();
    let ncols = chunk * p;
    let in_plane = g.in_positions();
    for c in 0..g.in_channels {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let dst_row = &mut col[row * ncols..(row + 1) * ncols];
                    for ni in 0..chunk {
                        let src = &x[((n0 + ni) * g.in_channels + c) * in_plane..][..in_plane];
                        let dst = &mut dst_row[ni * p..(ni + 1) * p];
                        let mut o = 0;
                        for zd in 0..od {
                            let zi = (zd * sd + a) as isize - pd as isize;
                            for yh in 0..oh {
                                let yi = (yh * sh + b) as isize - ph as isize;
                                let valid_zy =
                                    zi >= 0 && (zi as usize) < id && yi >= 0 && (yi as usize) < ih;
                                if !valid_zy {
                                    for v in &mut dst[o..o + ow] {
                                        *v = T::zero();
                                    }
                                    o += ow;
                                    continue;
                                }
                                let base = (zi as usize * ih + yi as usize) * iw;
                                for xw in 0..ow {
                                    let xi = (xw * sw + e) as isize - pw as isize;
                                    dst[o] = if xi >= 0 && (xi as usize) < iw {
                                        src[base + xi as usize]
                                    } else {
                                        T::zero()
                                    };
                                    o += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col[K, chunk*P]` back into `dx` for samples `n0..`.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, n0: usize, chunk: usize, dx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [od, oh, ow] = g.output;
    let p = g.out_positions();
    let ncols = chunk * p;
    let in_plane = g.in_positions();
    for c in 0..g.in_channels {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let src_row = &col[row * ncols..(row + 1) * ncols];
                    for ni in 0..chunk {
                        let dst = &mut dx[((n0 + ni) * g.in_channels + c) * in_plane..][..in_plane];
                        let src = &src_row[ni * p..(ni + 1) * p];
                        let mut o = 0;
                        for zd in 0..od {
                            let zi = (zd * sd + a) as isize - pd as isize;
                            for yh in 0..oh {
                                let yi = (yh * sh + b) as isize - ph as isize;
                                if !(zi >= 0 && (zi as usize) < id && yi >= 0 && (yi as usize) < ih) {
                                    o += ow;
                                    continue;
                                }
                                let base = (zi as usize * ih + yi as usize) * iw;
                                for xw in 0..ow {
                                    let xi = (xw * sw + e) as isize - pw as isize;
                                    if xi >= 0 && (xi as usize) < iw {
                                        dst[base + xi as usize] += src[o];
                                    }
                                    o += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let k = g.patch_len();
    let p = g.out_positions();
    let o = g.out_channels;
    let mut out = vec![T::zero(); g.batch * o * p];
    let chunk = chunk_size(g);
    let mut col = vec![T::zero(); k * chunk * p];
    let mut tmp = vec![T::zero(); o * chunk * p];
    let mut n0 = 0;
    while n0 < g.batch {
        let c = chunk.min(g.batch - n0);
        let ncols = c * p;
        im2col(x.data(), g, n0, c, &mut col[..k * ncols]);
        T::gemm(
            o,
            k,
            ncols,
            T::one(),
            w.data(),
            k as isize,
            1,
            &col[..k * ncols],
            ncols as isize,
            1,
            T::zero(),
            &mut tmp[..o * ncols],
            ncols as isize,
            1,
        );
        for ni in 0..c {
            for oc in 0..o {
                let dst = &mut out[((n0 + ni) * o + oc) * p..][..p];
                dst.copy_from_slice(&tmp[oc * ncols + ni * p..][..p]);
            }
        }
        n0 += c;
    }
    Tensor::from_vec(&conv_out_shape(g), out)
}

fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let k = g.patch_len();
    let p = g.out_positions();
    let o = g.out_channels;
    let chunk = chunk_size(g);
    let mut col = vec![T::zero(); k * chunk * p];
    let mut gt = vec![T::zero(); o * chunk * p];
    let mut dw = if need_dw { Some(vec![T::zero(); o * k]) } else { None };
    let mut dx = if need_dx { Some(vec![T::zero(); x.len()]) } else { None };
    let mut n0 = 0;
    while n0 < g.batch {
        let c = chunk.min(g.batch - n0);
        let ncols = c * p;
        for ni in 0..c {
            for oc in 0..o {
                let src = &grad.data()[((n0 + ni) * o + oc) * p..][..p];
                gt[oc * ncols + ni * p..][..p].copy_from_slice(src);
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(x.data(), g, n0, c, &mut col[..k * ncols]);
            // dW[O,K] += G[O,ncols] * col^T
            T::gemm(
                o,
                ncols,
                k,
                T::one(),
                &gt[..o * ncols],
                ncols as isize,
                1,
                &col[..k * ncols],
                1,
                ncols as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[K,ncols] = W^T * G
            T::gemm(
                k,
                o,
                ncols,
                T::one(),
                w.data(),
                1,
                k as isize,
                &gt[..o * ncols],
                ncols as isize,
                1,
                T::zero(),
                &mut col[..k * ncols],
                ncols as isize,
                1,
            );
            col2im(&col[..k * ncols], g, n0, c, dx);
        }
        n0 += c;
    }
    (
        dx.map(|d| Tensor::from_vec(x.shape(), d)),
        dw.map(|d| Tensor::from_vec(w.shape(), d)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let data = (0..numel(shape)).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data)
    }

    /// Compares analytic input gradients against central differences for a
    /// scalar function built from the inputs.
    fn check_grad(inputs: Vec<Tensor<f64>>, f: impl Fn(&Graph<f64>, &[Var]) -> Var) {
        let eval = |vals: &[Tensor<f64>]| {
            let g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
            let out = f(&g, &vars);
            g.item(out)
        };
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - numeric).abs() / (1.0f64).max(a.abs()).max(numeric.abs());
                assert!(err < 1e-6, "input {i} elem {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 5, 6]);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.value(g.conv(xv, wv, &[2, 1], &[1, 1]));
        assert_eq!(y.shape(), &[2, 4, 3, 6]);
        for n in 0..2 {
            for o in 0..4 {
                for i in 0..3 {
                    for j in 0..6 {
                        let mut s = 0.0;
                        for c in 0..3 {
                            for a in 0..3 {
                                for b in 0..3 {
                                    let (yi, xi) = (i as isize * 2 + a as isize - 1, j as isize + b as isize - 1);
                                    if yi >= 0 && yi < 5 && xi >= 0 && xi < 6 {
                                        s += x.data()[((n * 3 + c) * 5 + yi as usize) * 6 + xi as usize]
                                            * w.data()[((o * 3 + c) * 3 + a) * 3 + b];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((n * 4 + o) * 3 + i) * 6 + j];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients_all_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check_grad(
            vec![rand_tensor(&mut rng, &[2, 2, 7]), rand_tensor(&mut rng, &[3, 2, 3])],
            |g, v| {
                let y = g.conv(v[0], v[1], &[1], &[1]);
                g.sum_all(g.square(y))
            },
        );
        check_grad(
            vec![rand_tensor(&mut rng, &[2, 2, 5, 4]), rand_tensor(&mut rng, &[3, 2, 3, 3])],
            |g, v| {
                let y = g.conv(v[0], v[1], &[2, 2], &[1, 1]);
                g.sum_all(g.square(y))
            },
        );
        check_grad(
            vec![rand_tensor(&mut rng, &[1, 2, 4, 4, 4]), rand_tensor(&mut rng, &[2, 2, 3, 3, 3])],
            |g, v| {
                let y = g.conv(v[0], v[1], &[1, 2, 2], &[1, 1, 1]);
                g.sum_all(g.square(y))
            },
        );
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let bias = rand_tensor(&mut rng, &[4]);
        check_grad(vec![a.clone(), b.clone(), bias], |g, v| {
            let s = g.mul(g.sigmoid(v[0]), g.leaky_relu(v[1], 0.1));
            let t = g.bias_axis1(g.sub(s, g.abs(v[0])), v[2]);
            let u = g.add(g.exp(g.scale(t, 0.5)), g.square(v[1]));
            let l = g.log(g.add_scalar(g.clamp(u, 0.0, 10.0), 1.0));
            g.sum_all(g.square(g.sum_last_axis(l)))
        });
        check_grad(vec![a, b], |g, v| {
            let m = g.matmul(v[0], g.transpose_last(v[1]));
            let ls = g.log_softmax(m);
            let sm = g.softmax(v[1]);
            let n = g.row_norm(g.row_normalize(sm, 1e-12), 1e-12);
            let gathered = g.gather(ls, vec![0, 5, 8, 4], &[4]);
            g.add(g.sum_all(gathered), g.sum_all(g.mul(n, n)))
        });
    }

    #[test]
    fn spatial_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let y = rand_tensor(&mut rng, &[2, 1, 2, 2]);
        check_grad(vec![x, y], |g, v| {
            let p = g.avg_pool2(v[0]);
            let c = g.concat1(&[p, v[1]]);
            let u = g.upsample2(c);
            let m = g.mean_spatial(g.square(u));
            let r = g.reshape(g.permute(m, &[1, 0]), &[6]);
            g.sum_all(g.square(r))
        });
    }

    #[test]
    fn batched_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check_grad(
            vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 4, 2])],
            |g, v| g.sum_all(g.square(g.matmul(v[0], v[1]))),
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(&[3]));
        let p = g.leaf(Tensor::ones(&[3]));
        let out = g.sum_all(g.mul(c, p));
        let grads = g.backward(out);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }
}

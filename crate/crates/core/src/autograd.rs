//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the
//! node list is a valid topological order for backpropagation.

use crate::kernels::{self, ConvGeometry, Trilinear};
use crate::loss::{self, LossReport};
use crate::tensor::{matmul, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    SigmoidClamped(Var, T),
    AddChannelBias(Var, Var),
    MulBroadcast(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        dims: (usize, usize, usize),
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Resize {
        x: Var,
        plan: Trilinear,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    MeanSpatial(Var),
    SoftmaxRows(Var),
    GateMlp {
        a: Var,
        c: Var,
        w2: Var,
        b2: Var,
    },
    MaskedLoss {
        probs: Var,
        targets: Tensor<T>,
        annotated: Vec<bool>,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddChannelBias(a, b)
            | Op::MulBroadcast(a, b) => vec![*a, *b],
            Op::AddScalar(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::SigmoidClamped(a, _)
            | Op::Reshape(a)
            | Op::MeanSpatial(a)
            | Op::SoftmaxRows(a) => vec![*a],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv3d { x, w, b, .. } => vec![*x, *w, *b],
            Op::InstanceNorm { x, .. } | Op::Resize { x, .. } | Op::Slice { x, .. } => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::GateMlp { a, c, w2, b2 } => vec![*a, *c, *w2, *b2],
            Op::MaskedLoss { probs, .. } => vec![*probs],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation graph. With `tracking` off every node is a constant and no
/// backward bookkeeping is kept.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    tracking: bool,
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_tracking(true)
    }

    pub fn inference() -> Self {
        Self::with_tracking(false)
    }

    pub fn with_tracking(tracking: bool) -> Self {
        Self {
            nodes: Vec::new(),
            tracking,
        }
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let needs = self.tracking;
        self.push(value, Op::Leaf, needs)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs = self.tracking && op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs { op } else { Op::Leaf };
        self.push(value, op, needs)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.derived(v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.derived(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x / y);
        self.derived(v, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.derived(v, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.derived(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::gelu);
        self.derived(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::sigmoid);
        self.derived(v, Op::Sigmoid(a))
    }

    /// Sigmoid of the logits clamped to `±bound`.
    pub fn sigmoid_clamped(&mut self, a: Var, bound: T) -> Var {
        let v = self
            .value(a)
            .map(|x| kernels::sigmoid(x.max(-bound).min(bound)));
        self.derived(v, Op::SigmoidClamped(a, bound))
    }

    /// `x[c, ...] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b).data().to_vec();
        let xv = self.value(x);
        assert_eq!(xv.shape()[0], bias.len(), "bias length mismatch");
        let n = xv.inner_len();
        let mut out = xv.clone();
        for (row, &bc) in out.data_mut().chunks_mut(n.max(1)).zip(&bias) {
            row.iter_mut().for_each(|v| *v += bc);
        }
        self.derived(out, Op::AddChannelBias(x, b))
    }

    /// `x[c, s] * g[0, s]`: scales every channel by a shared spatial field.
    pub fn mul_broadcast(&mut self, x: Var, g: Var) -> Var {
        let gv = self.value(g).data().to_vec();
        let xv = self.value(x);
        let n = xv.inner_len();
        assert_eq!(gv.len(), n, "broadcast field length mismatch");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&gv).for_each(|(v, &s)| *v *= s);
        }
        self.derived(out, Op::MulBroadcast(x, g))
    }

    /// 2-D product; `trans_*` reinterpret the operand's storage as transposed.
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs 2-D operands");
        let (m, k) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); m * n];
        matmul(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            (m, k, n),
            trans_a,
            trans_b,
            false,
        );
        let v = Tensor::from_vec(&[m, n], out).expect("matmul shape");
        self.derived(
            v,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                dims: (m, k, n),
            },
        )
    }

    /// 3×3×3 convolution, one voxel of replicate padding. `x: [Ci, D, W, H]`,
    /// `w: [Co, Ci·27]`, `b: [Co]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let co = self.shape(w)[0];
        assert_eq!(self.shape(w)[1], xs[0] * 27, "conv weight fan-in mismatch");
        let geo = ConvGeometry::new(xs[0], [xs[1], xs[2], xs[3]], stride);
        let out = kernels::conv3d_forward(
            &geo,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            co,
        );
        let [d, ww, h] = geo.dims_out;
        let v = Tensor::from_vec(&[co, d, ww, h], out).expect("conv shape");
        self.derived(v, Op::Conv3d { x, w, b, stride })
    }

    pub fn instance_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (y, _, inv_std) = kernels::instance_norm_forward(xv.data(), xv.shape()[0]);
        let v = Tensor::from_vec(xv.shape(), y).expect("same shape");
        self.derived(v, Op::InstanceNorm { x, inv_std })
    }

    /// Trilinear resize of a `[C, D, W, H]` map to `to`.
    pub fn resize(&mut self, x: Var, to: [usize; 3]) -> Var {
        let s = self.shape(x).to_vec();
        let plan = Trilinear::new(s[0], [s[1], s[2], s[3]], to);
        let out = plan.forward(self.value(x).data());
        let v = Tensor::from_vec(&[s[0], to[0], to[1], to[2]], out).expect("resize shape");
        self.derived(v, Op::Resize { x, plan })
    }

    /// Concatenate along axis 0; trailing axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            assert_eq!(&t.shape()[1..], &tail[..], "concat trailing shape mismatch");
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let v = Tensor::from_vec(&shape, data).expect("concat shape");
        self.derived(v, Op::Concat(xs.to_vec()))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let inner = t.inner_len();
        assert!(start + len <= t.shape()[0], "slice out of range");
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let v = Tensor::from_vec(&shape, data).expect("slice shape");
        self.derived(v, Op::Slice { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshaped(shape).expect("reshape size");
        self.derived(v, Op::Reshape(x))
    }

    /// Mean over every axis after the first: `[C, ...] -> [C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.inner_len();
        let inv = T::one() / T::of(n as f64);
        let data = t
            .data()
            .chunks(n)
            .map(|r| r.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::from_vec(&[t.shape()[0]], data).expect("mean shape");
        self.derived(v, Op::MeanSpatial(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.shape()[1];
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.derived(out, Op::SoftmaxRows(x))
    }

    /// Fused shared gate perceptron: `a: [H, N]`, `c: [H]`, `w2: [H]`,
    /// `b2: [1]` -> `[1, N]`.
    pub fn gate_mlp(&mut self, a: Var, c: Var, w2: Var, b2: Var) -> Var {
        let hidden = self.shape(c)[0];
        assert_eq!(self.shape(a)[0], hidden, "gate hidden width mismatch");
        let out = kernels::gate_mlp_forward(
            self.value(a).data(),
            self.value(c).data(),
            self.value(w2).data(),
            self.value(b2).data()[0],
        );
        let n = out.len();
        let v = Tensor::from_vec(&[1, n], out).expect("gate shape");
        self.derived(v, Op::GateMlp { a, c, w2, b2 })
    }

    /// Partial-label BCE + soft Dice over `probs: [K, N]`; see
    /// [`crate::loss::masked_loss_values`].
    pub fn masked_loss(
        &mut self,
        probs: Var,
        targets: Tensor<T>,
        annotated: Vec<bool>,
    ) -> crate::error::Result<(Var, LossReport)> {
        let report = loss::masked_loss_values(self.value(probs), &targets, &annotated)?;
        let v = Tensor::scalar(T::of(report.total));
        let var = self.derived(
            v,
            Op::MaskedLoss {
                probs,
                targets,
                annotated,
            },
        );
        Ok((var, report))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.shape(root).to_vec();
        grads[root.0] = Some(Tensor::full(&root_shape, T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let same = |shape: &[usize], data: Vec<T>| Tensor::from_vec(shape, data).expect("grad shape");
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        acc(grads, v, g.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                    acc(grads, *a, same(av.shape(), d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                    acc(grads, *b, same(bv.shape(), d));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&g, &y)| g / y).collect();
                    acc(grads, *a, same(av.shape(), d));
                }
                if self.wants(*b) {
                    let d = gd
                        .iter()
                        .zip(node.value.data())
                        .zip(bv.data())
                        .map(|((&g, &q), &y)| -g * q / y)
                        .collect();
                    acc(grads, *b, same(bv.shape(), d));
                }
            }
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Scale(a, s) => acc(grads, *a, g.map(|v| v * *s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = gd
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                acc(grads, *a, same(x.shape(), d));
            }
            Op::Sigmoid(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &p)| g * p * (T::one() - p))
                    .collect();
                acc(grads, *a, same(g.shape(), d));
            }
            Op::SigmoidClamped(a, bound) => {
                let x = self.value(*a);
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .zip(x.data())
                    .map(|((&g, &p), &x)| {
                        if x.abs() > *bound {
                            T::zero()
                        } else {
                            g * p * (T::one() - p)
                        }
                    })
                    .collect();
                acc(grads, *a, same(g.shape(), d));
            }
            Op::AddChannelBias(x, b) => {
                if self.wants(*x) {
                    acc(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let n = g.inner_len().max(1);
                    let d = gd.chunks(n).map(|r| r.iter().copied().sum()).collect();
                    acc(grads, *b, same(self.shape(*b), d));
                }
            }
            Op::MulBroadcast(x, f) => {
                let (xv, fv) = (self.value(*x), self.value(*f));
                let n = fv.numel();
                if self.wants(*x) {
                    let mut d = g.clone();
                    for row in d.data_mut().chunks_mut(n) {
                        row.iter_mut().zip(fv.data()).for_each(|(v, &s)| *v *= s);
                    }
                    acc(grads, *x, d);
                }
                if self.wants(*f) {
                    let mut d = vec![T::zero(); n];
                    for (grow, xrow) in gd.chunks(n).zip(xv.data().chunks(n)) {
                        for ((o, &g), &x) in d.iter_mut().zip(grow).zip(xrow) {
                            *o += g * x;
                        }
                    }
                    acc(grads, *f, same(fv.shape(), d));
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                dims: (m, k, n),
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let mut d = vec![T::zero(); m * k];
                    if *trans_a {
                        matmul(bv.data(), gd, &mut d, (k, n, m), *trans_b, true, false);
                    } else {
                        matmul(gd, bv.data(), &mut d, (m, n, k), false, !*trans_b, false);
                    }
                    acc(grads, *a, same(av.shape(), d));
                }
                if self.wants(*b) {
                    let mut d = vec![T::zero(); k * n];
                    if *trans_b {
                        matmul(gd, av.data(), &mut d, (n, m, k), true, *trans_a, false);
                    } else {
                        matmul(av.data(), gd, &mut d, (k, m, n), !*trans_a, false, false);
                    }
                    acc(grads, *b, same(bv.shape(), d));
                }
            }
            Op::Conv3d { x, w, b, stride } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let geo = ConvGeometry::new(s[0], [s[1], s[2], s[3]], *stride);
                let co = g.shape()[0];
                let need = [self.wants(*x), self.wants(*w), self.wants(*b)];
                let r = kernels::conv3d_backward(&geo, xv.data(), self.value(*w).data(), gd, co, need);
                if let Some(dx) = r.dx {
                    acc(grads, *x, same(s, dx));
                }
                if let Some(dw) = r.dw {
                    acc(grads, *w, same(self.shape(*w), dw));
                }
                if let Some(db) = r.db {
                    acc(grads, *b, same(self.shape(*b), db));
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let d = kernels::instance_norm_backward(node.value.data(), gd, inv_std);
                acc(grads, *x, same(g.shape(), d));
            }
            Op::Resize { x, plan } => {
                let d = plan.backward(gd);
                acc(grads, *x, same(self.shape(*x), d));
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).numel();
                    if self.wants(x) {
                        acc(grads, x, same(self.shape(x), gd[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let inner = xv.inner_len();
                let mut d = vec![T::zero(); xv.numel()];
                d[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                acc(grads, *x, same(xv.shape(), d));
            }
            Op::Reshape(x) => acc(grads, *x, same(self.shape(*x), gd.to_vec())),
            Op::MeanSpatial(x) => {
                let xv = self.value(*x);
                let n = xv.inner_len();
                let inv = T::one() / T::of(n as f64);
                let d = gd
                    .iter()
                    .flat_map(|&g| std::iter::repeat(g * inv).take(n))
                    .collect();
                acc(grads, *x, same(xv.shape(), d));
            }
            Op::SoftmaxRows(x) => {
                let cols = g.shape()[1];
                let mut d = Vec::with_capacity(gd.len());
                for (grow, prow) in gd.chunks(cols).zip(node.value.data().chunks(cols)) {
                    let dot: T = grow.iter().zip(prow).map(|(&g, &p)| g * p).sum();
                    d.extend(grow.iter().zip(prow).map(|(&g, &p)| p * (g - dot)));
                }
                acc(grads, *x, same(g.shape(), d));
            }
            Op::GateMlp { a, c, w2, b2 } => {
                let r = kernels::gate_mlp_backward(
                    self.value(*a).data(),
                    self.value(*c).data(),
                    self.value(*w2).data(),
                    gd,
                );
                if self.wants(*a) {
                    acc(grads, *a, same(self.shape(*a), r.da));
                }
                if self.wants(*c) {
                    acc(grads, *c, same(self.shape(*c), r.dc));
                }
                if self.wants(*w2) {
                    acc(grads, *w2, same(self.shape(*w2), r.dw2));
                }
                if self.wants(*b2) {
                    acc(grads, *b2, same(self.shape(*b2), vec![r.db2]));
                }
            }
            Op::MaskedLoss {
                probs,
                targets,
                annotated,
            } => {
                let pv = self.value(*probs);
                let mut d = loss::masked_loss_grad(pv, targets, annotated);
                let scale = gd[0];
                d.data_mut().iter_mut().for_each(|v| *v *= scale);
                acc(grads, *probs, d);
            }
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `d(sum(w ⊙ f(x)))/dx` for a graph builder.
    fn check<F>(inputs: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let eval = |inputs: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::inference();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            let t = g.value(out);
            t.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (1.0 + 0.1 * i as f64))
                .sum()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let n = g.value(out).numel();
        let weights = Tensor::from_vec(
            g.shape(out),
            (0..n).map(|i| 1.0 + 0.1 * i as f64).collect(),
        )
        .unwrap();
        let w = g.constant(weights);
        let prod = g.mul(out, w);
        let flat = g.reshape(prod, &[n, 1]);
        let ones = g.constant(Tensor::full(&[1, n], 1.0));
        let total = g.matmul(ones, flat, false, false);
        let grads = g.backward(total);
        for (idx, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).expect("grad present");
            for j in 0..inputs[idx].numel() {
                let h = 1e-5;
                let mut plus = inputs.clone();
                plus[idx].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[idx].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let tol = 1e-5 * a.abs().max(fd.abs()) + 1e-7;
                assert!((a - fd).abs() <= tol, "input {idx}[{j}]: analytic {a} vs fd {fd}");
            }
        }
    }

    fn t(shape: &[usize], seed: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|i| ((i as f64 + seed) * 1.37).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn elementwise_ops_gradients() {
        check(vec![t(&[2, 3], 0.0), t(&[2, 3], 1.0)], |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.gelu(a);
            let s = g.sigmoid(v[1]);
            let s = g.add_scalar(s, 0.5);
            let q = g.div(b, s);
            let c = g.add(q, v[0]);
            g.scale(c, 0.7)
        });
    }

    #[test]
    fn matmul_gradients_all_transposes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let sa = if ta { [3, 2] } else { [2, 3] };
            let sb = if tb { [4, 3] } else { [3, 4] };
            check(vec![t(&sa, 0.3), t(&sb, 2.0)], move |g, v| {
                g.matmul(v[0], v[1], ta, tb)
            });
        }
    }

    #[test]
    fn conv_and_norm_gradients() {
        for stride in [1, 2] {
            check(
                vec![t(&[2, 4, 3, 4], 0.0), t(&[3, 54], 1.0), t(&[3], 2.0)],
                move |g, v| {
                    let c = g.conv3d(v[0], v[1], v[2], stride);
                    g.instance_norm(c)
                },
            );
        }
    }

    #[test]
    fn structural_ops_gradients() {
        check(vec![t(&[2, 2, 2, 3], 0.0), t(&[3, 2, 2, 3], 5.0), t(&[5], 1.0)], |g, v| {
            let up = g.resize(v[0], [3, 4, 5]);
            let small = g.resize(v[1], [3, 4, 5]);
            let cat = g.concat(&[up, small]);
            let biased = g.add_channel_bias(cat, v[2]);
            let part = g.slice(biased, 1, 3);
            let field = g.slice(biased, 4, 1);
            let scaled = g.mul_broadcast(part, field);
            let m = g.mean_spatial(scaled);
            let m2 = g.reshape(m, &[1, 3]);
            let sm = g.softmax_rows(m2);
            let clamp = g.sigmoid_clamped(scaled, 0.5);
            let flat = g.reshape(clamp, &[3, 60]);
            let pooled = g.mean_spatial(flat);
            let pooled = g.reshape(pooled, &[1, 3]);
            g.add(sm, pooled)
        });
    }

    #[test]
    fn gate_mlp_gradients() {
        check(
            vec![t(&[4, 6], 0.0), t(&[4], 1.0), t(&[4], 2.0), t(&[1], 3.0)],
            |g, v| g.gate_mlp(v[0], v[1], v[2], v[3]),
        );
    }

    #[test]
    fn untracked_graph_keeps_no_tape() {
        let mut g = Graph::<f32>::inference();
        let a = g.param(Tensor::full(&[2], 1.0));
        let b = g.gelu(a);
        let grads = g.backward(b);
        assert!(grads.get(a).is_none());
    }
}

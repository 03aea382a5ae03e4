//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only arena of nodes; every operation computes its
//! value eagerly and records what it needs for the backward pass. [`Var`] is
//! an index into the arena, so graph handles are `Copy` and the borrow
//! checker stays out of the way. Parents always precede children, which lets
//! [`Tape::backward`] run a single reverse sweep, freeing intermediate
//! gradients as soon as they have been consumed and keeping only leaf
//! gradients.

mod spatial;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape it came from.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, S),
    AddConst(Var, S),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, S, S),
    Reshape(Var),
    Concat1(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SumPerSample(Var),
    MeanAll(Var),
    LogMeanExp(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor<S>,
        inv_std: Tensor<S>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPoolAdaptive {
        x: Var,
        oh: usize,
        ow: usize,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    Bilinear {
        x: Var,
    },
    ScaleChannels {
        x: Var,
        w: Var,
    },
    ScaleSpatial {
        x: Var,
        m: Var,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads<S: Scalar> {
    inner: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the backward root with respect to a leaf, if any reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.inner.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    tracked: Vec<(usize, Var)>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            tracked: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub(crate) fn push_op(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let needs = self.any_needs_grad(parents);
        self.push(value, op, needs)
    }

    /// New leaf holding `value`; participates in backward iff `needs_grad`.
    pub fn leaf(&mut self, value: Tensor<S>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Leaf that never receives gradient (inputs, ground truth, ...).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Associate an external key (e.g. a parameter id) with a leaf so its
    /// gradient can be fetched after backward.
    pub fn track(&mut self, key: usize, var: Var) {
        self.tracked.push((key, var));
    }

    pub fn tracked(&self) -> &[(usize, Var)] {
        &self.tracked
    }

    /// The leaf already tracked under `key`, if any.
    pub fn find_tracked(&self, key: usize) -> Option<Var> {
        self.tracked
            .iter()
            .find(|(k, _)| *k == key)
            .map(|&(_, var)| var)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_op(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push_op(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push_op(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push_op(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push_op(v, Op::Scale(a, c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push_op(v, Op::AddConst(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push_op(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid_scalar);
        self.push_op(v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push_op(v, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push_op(v, Op::Ln(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let v = self.value(a).map(|x| if x < lo { lo } else if x > hi { hi } else { x });
        self.push_op(v, Op::Clamp(a, lo, hi), &[a])
    }

    // ---- structure ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let v = self.value(a).reshaped(shape);
        self.push_op(v, Op::Reshape(a), &[a])
    }

    /// Concatenate along axis 1. All inputs must agree on every other axis.
    pub fn concat1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat1 needs at least one input");
        let first = self.value(parts[0]).shape().to_vec();
        assert!(first.len() >= 2, "concat1 needs rank >= 2, got {first:?}");
        let outer = first[0];
        let mut axis1 = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), first.len(), "concat1 rank mismatch");
            assert_eq!(s[0], outer, "concat1 batch mismatch");
            assert_eq!(&s[2..], &first[2..], "concat1 trailing-dim mismatch");
            axis1 += s[1];
        }
        let mut out_shape = first.clone();
        out_shape[1] = axis1;
        let tail: usize = first[2..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for b in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                let block = c * tail;
                data.extend_from_slice(&t.as_slice()[b * block..(b + 1) * block]);
            }
        }
        let v = Tensor::new(out_shape, data);
        self.push_op(v, Op::Concat1(parts.to_vec()), parts)
    }

    /// Row permutation/selection of a `[rows, cols]` tensor: `out[r] = x[idx[r]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let (rows, cols) = self.value(a).dims2();
        assert!(idx.iter().all(|&i| i < rows), "gather_rows index out of range");
        let src = self.value(a).as_slice();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let v = Tensor::new(vec![idx.len(), cols], data);
        self.push_op(v, Op::GatherRows(a, idx), &[a])
    }

    /// Fully connected layer: `y = x @ w^T + b` with `x: [B, Din]`,
    /// `w: [Dout, Din]`, `b: [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (bsz, din) = self.value(x).dims2();
        let (dout, din_w) = self.value(w).dims2();
        assert_eq!(din, din_w, "linear input/weight width mismatch");
        let mut out = vec![S::zero(); bsz * dout];
        S::gemm(
            bsz,
            din,
            dout,
            S::one(),
            self.value(x).as_slice(),
            false,
            self.value(w).as_slice(),
            true,
            S::zero(),
            &mut out,
        );
        if let Some(bias) = b {
            let bv = self.value(bias).as_slice().to_vec();
            assert_eq!(bv.len(), dout, "linear bias length mismatch");
            for row in out.chunks_exact_mut(dout) {
                for (o, &add) in row.iter_mut().zip(bv.iter()) {
                    *o += add;
                }
            }
        }
        let v = Tensor::new(vec![bsz, dout], out);
        let mut parents = vec![x, w];
        if let Some(bias) = b {
            parents.push(bias);
        }
        self.push_op(v, Op::Linear { x, w, b }, &parents)
    }

    // ---- reductions --------------------------------------------------------

    /// `[B, ...] -> [B]`, summing everything but the leading axis.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape();
        assert!(!shape.is_empty(), "sum_per_sample on scalar");
        let bsz = shape[0];
        let tail: usize = shape[1..].iter().product();
        let src = self.value(a).as_slice();
        let data: Vec<S> = (0..bsz)
            .map(|b| src[b * tail..(b + 1) * tail].iter().copied().sum())
            .collect();
        let v = Tensor::new(vec![bsz], data);
        self.push_op(v, Op::SumPerSample(a), &[a])
    }

    /// Mean over every element, producing a `[1]` tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = S::cast_usize(t.numel());
        let v = Tensor::scalar(t.sum() / n);
        self.push_op(v, Op::MeanAll(a), &[a])
    }

    /// Numerically stabilized `log(mean(exp(x)))` of a `[B]` tensor -> `[1]`.
    pub fn log_mean_exp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 1, "log_mean_exp expects a vector");
        let xs = t.as_slice();
        let m = xs.iter().copied().fold(S::neg_infinity(), S::max);
        let n = S::cast_usize(xs.len());
        let sum_shifted: S = xs.iter().map(|&x| (x - m).exp()).sum();
        let v = Tensor::scalar((sum_shifted / n).ln() + m);
        self.push_op(v, Op::LogMeanExp(a), &[a])
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a one-element `root`. Returns gradients for every
    /// leaf that requires them; intermediate gradients are dropped as soon as
    /// all their consumers have been processed.
    pub fn backward(&self, root: Var) -> Grads<S> {
        assert_eq!(
            self.value(root).numel(),
            1,
            "backward root must be a single element, got shape {:?}",
            self.shape(root)
        );
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[root.0].needs_grad {
            return Grads { inner: grads };
        }
        grads[root.0] = Some(Tensor::full(self.shape(root).to_vec(), S::one()));
        for id in (0..=root.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // retained for the caller
            }
            let Some(g) = grads[id].take() else { continue };
            self.scatter(id, &g, &mut grads);
        }
        Grads { inner: grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], target: Var, delta: Tensor<S>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        debug_assert_eq!(
            delta.shape(),
            self.shape(target),
            "gradient shape mismatch for node {}",
            target.0
        );
        match &mut grads[target.0] {
            slot @ None => *slot = Some(delta),
            Some(existing) => {
                let dst = existing.make_mut();
                for (d, s) in dst.iter_mut().zip(delta.as_slice()) {
                    *d += *s;
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn scatter(&self, id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[id].op {
            Op::Leaf => unreachable!("leaves are skipped in the sweep"),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |gi, bi| gi * bi));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |gi, ai| gi * ai));
                }
            }
            Op::Div(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |gi, bi| gi / bi));
                }
                if self.wants(*b) {
                    let av = self.value(*a).as_slice();
                    let bv = self.value(*b).as_slice();
                    let delta = Tensor::from_fn(self.shape(*b).to_vec(), |i| {
                        -g.as_slice()[i] * av[i] / (bv[i] * bv[i])
                    });
                    self.acc(grads, *b, delta);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|x| x * c));
            }
            Op::AddConst(a, _) => self.acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let delta = g.zip_map(self.value(*a), |gi, xi| if xi > S::zero() { gi } else { S::zero() });
                self.acc(grads, *a, delta);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let delta = g.zip_map(y, |gi, yi| gi * yi * (S::one() - yi));
                self.acc(grads, *a, delta);
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                let delta = g.zip_map(y, |gi, yi| gi * yi);
                self.acc(grads, *a, delta);
            }
            Op::Ln(a) => {
                let delta = g.zip_map(self.value(*a), |gi, xi| gi / xi);
                self.acc(grads, *a, delta);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let delta = g.zip_map(self.value(*a), |gi, xi| {
                    if xi > lo && xi < hi {
                        gi
                    } else {
                        S::zero()
                    }
                });
                self.acc(grads, *a, delta);
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, g.reshaped(self.shape(*a).to_vec()));
            }
            Op::Concat1(parts) => {
                let out_shape = self.nodes[id].value.shape();
                let outer = out_shape[0];
                let tail: usize = out_shape[2..].iter().product();
                let total_block: usize = out_shape[1] * tail;
                let gsrc = g.as_slice();
                let mut offset = 0usize;
                for &p in parts {
                    let c = self.shape(p)[1];
                    let block = c * tail;
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(outer * block);
                        for b in 0..outer {
                            let start = b * total_block + offset;
                            data.extend_from_slice(&gsrc[start..start + block]);
                        }
                        self.acc(grads, p, Tensor::new(self.shape(p).to_vec(), data));
                    }
                    offset += block;
                }
            }
            Op::GatherRows(a, idx) => {
                let (_, cols) = self.value(*a).dims2();
                let mut delta = Tensor::zeros(self.shape(*a).to_vec());
                {
                    let dst = delta.make_mut();
                    let gsrc = g.as_slice();
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dst[i * cols + c] += gsrc[r * cols + c];
                        }
                    }
                }
                self.acc(grads, *a, delta);
            }
            Op::Linear { x, w, b } => {
                let (bsz, din) = self.value(*x).dims2();
                let (dout, _) = self.value(*w).dims2();
                if self.wants(*x) {
                    // dX = dY @ W : [B, Dout] x [Dout, Din]
                    let mut dx = vec![S::zero(); bsz * din];
                    S::gemm(
                        bsz,
                        dout,
                        din,
                        S::one(),
                        g.as_slice(),
                        false,
                        self.value(*w).as_slice(),
                        false,
                        S::zero(),
                        &mut dx,
                    );
                    self.acc(grads, *x, Tensor::new(vec![bsz, din], dx));
                }
                if self.wants(*w) {
                    // dW = dY^T @ X : [Dout, B] x [B, Din]
                    let mut dw = vec![S::zero(); dout * din];
                    S::gemm(
                        dout,
                        bsz,
                        din,
                        S::one(),
                        g.as_slice(),
                        true,
                        self.value(*x).as_slice(),
                        false,
                        S::zero(),
                        &mut dw,
                    );
                    self.acc(grads, *w, Tensor::new(vec![dout, din], dw));
                }
                if let Some(bias) = b {
                    if self.wants(*bias) {
                        let gsrc = g.as_slice();
                        let mut db = vec![S::zero(); dout];
                        for row in gsrc.chunks_exact(dout) {
                            for (d, &gi) in db.iter_mut().zip(row) {
                                *d += gi;
                            }
                        }
                        self.acc(grads, *bias, Tensor::new(vec![dout], db));
                    }
                }
            }
            Op::SumPerSample(a) => {
                let shape = self.shape(*a).to_vec();
                let tail: usize = shape[1..].iter().product();
                let gsrc = g.as_slice();
                let delta = Tensor::from_fn(shape, |i| gsrc[i / tail]);
                self.acc(grads, *a, delta);
            }
            Op::MeanAll(a) => {
                let n = S::cast_usize(self.value(*a).numel());
                let gi = g.item() / n;
                self.acc(grads, *a, Tensor::full(self.shape(*a).to_vec(), gi));
            }
            Op::LogMeanExp(a) => {
                // d/dx_i log(mean(exp(x))) = softmax(x)_i
                let xs = self.value(*a).as_slice();
                let m = xs.iter().copied().fold(S::neg_infinity(), S::max);
                let denom: S = xs.iter().map(|&x| (x - m).exp()).sum();
                let gi = g.item();
                let delta = Tensor::from_fn(self.shape(*a).to_vec(), |i| gi * (xs[i] - m).exp() / denom);
                self.acc(grads, *a, delta);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(id, g, grads, *x, *w, *b, *stride, *pad);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                self.batch_norm_backward(g, grads, *x, *gamma, *beta, mean, inv_std, *batch_stats);
            }
            Op::MaxPool { x, argmax, .. } => {
                self.scatter_argmax(g, grads, *x, argmax);
            }
            Op::GlobalMaxPool { x, argmax } => {
                self.scatter_argmax(g, grads, *x, argmax);
            }
            Op::ChannelMax { x, argmax } => {
                self.scatter_argmax(g, grads, *x, argmax);
            }
            Op::AvgPoolAdaptive { x, oh, ow } => {
                self.adaptive_avg_pool_backward(g, grads, *x, *oh, *ow);
            }
            Op::ChannelMean(x) => {
                self.channel_mean_backward(g, grads, *x);
            }
            Op::Bilinear { x } => {
                let (oh, ow) = {
                    let s = self.nodes[id].value.shape();
                    (s[2], s[3])
                };
                self.bilinear_backward(g, grads, *x, oh, ow);
            }
            Op::ScaleChannels { x, w } => {
                self.scale_channels_backward(g, grads, *x, *w);
            }
            Op::ScaleSpatial { x, m } => {
                self.scale_spatial_backward(g, grads, *x, *m);
            }
        }
    }

    fn scatter_argmax(&self, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>], x: Var, argmax: &[u32]) {
        if !self.wants(x) {
            return;
        }
        let mut delta = Tensor::zeros(self.shape(x).to_vec());
        {
            let dst = delta.make_mut();
            for (out_i, &src_i) in argmax.iter().enumerate() {
                dst[src_i as usize] += g.as_slice()[out_i];
            }
        }
        self.acc(grads, x, delta);
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node whose
//! inputs are strictly earlier nodes, so node order is a topological order
//! and `backward` is a single reverse sweep. Leaf gradients accumulate across
//! `backward` calls until [`Graph::zero_grad`].

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, LerpAxis};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Max,
    Avg,
}

/// Grouping used by [`Graph::l2_normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormScope {
    /// The channel vector at each spatial location (axis `rank-3`).
    PerPixel,
    /// Each slice along the leading axis.
    PerChannel,
    WholeTensor,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        bank: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        bank: Var,
        geom: ConvGeom,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Resize {
        input: Var,
        ys: LerpAxis,
        xs: LerpAxis,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    GlobalMax {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvg {
        input: Var,
    },
    AvgPool2 {
        input: Var,
    },
    L2Normalize {
        input: Var,
        groups: Groups,
        norms: Vec<T>,
        eps: T,
    },
    Blur {
        input: Var,
        taps: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Abs(Var),
    Square(Var),
    ClampMax(Var, T),
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    Gram(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
}

/// Strided layout of the vectors normalized by `l2_normalize`.
#[derive(Debug, Clone, Copy)]
struct Groups {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Groups {
    #[inline]
    fn index(&self, o: usize, j: usize, i: usize) -> usize {
        (o * self.len + j) * self.inner + i
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- ops

    /// Same-size cross-correlation when `pad == (k-1)/2`.
    pub fn conv2d(&mut self, input: Var, bank: Var, pad: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3("conv2d")?;
        let (k, bc, kh, kw) = self.value(bank).dims4("conv2d")?;
        if bc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, bank expects {bc}"),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            in_c: c,
            in_h: h,
            in_w: w,
            out_c: k,
            kh,
            kw,
            pad,
        };
        let mut out = Tensor::zeros(&[k, geom.out_h(), geom.out_w()]);
        kernels::conv2d(self.value(input).data(), self.value(bank).data(), &geom, out.data_mut());
        self.push("conv2d", out, Op::Conv2d { input, bank, geom }, &[input, bank])
    }

    /// Exact adjoint of [`Graph::conv2d`] with the same bank and padding.
    pub fn conv_transpose2d(&mut self, input: Var, bank: Var, pad: usize) -> Result<Var> {
        let (k, h, w) = self.value(input).dims3("conv_transpose2d")?;
        let (bk, c, kh, kw) = self.value(bank).dims4("conv_transpose2d")?;
        if bk != k {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {k} channels, bank has {bk} filters"),
            ));
        }
        if h + kh < 1 + 2 * pad || w + kw < 1 + 2 * pad {
            return Err(Error::shape("conv_transpose2d", "padding too large"));
        }
        let geom = ConvGeom {
            in_c: c,
            in_h: h + kh - 1 - 2 * pad,
            in_w: w + kw - 1 - 2 * pad,
            out_c: k,
            kh,
            kw,
            pad,
        };
        let mut out = Tensor::zeros(&[c, geom.in_h, geom.in_w]);
        kernels::conv2d_adjoint(self.value(input).data(), self.value(bank).data(), &geom, out.data_mut());
        self.push(
            "conv_transpose2d",
            out,
            Op::ConvTranspose2d { input, bank, geom },
            &[input, bank],
        )
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let c = x.shape().first().copied().unwrap_or(0);
        if self.value(bias).len() != c {
            return Err(Error::shape(
                "channel_bias",
                format!("{c} channels, bias of length {}", self.value(bias).len()),
            ));
        }
        let mut out = x.clone();
        let b = self.value(bias).data().to_vec();
        for (ch, &bv) in b.iter().enumerate() {
            for v in out.channel_mut(ch) {
                *v = *v + bv;
            }
        }
        self.push("channel_bias", out, Op::ChannelBias { input, bias }, &[input, bias])
    }

    /// Align-corners bilinear resize of a `C×H×W` tensor.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3("bilinear_resize")?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::shape("bilinear_resize", "zero extent"));
        }
        let ys = LerpAxis::new(h, out_h);
        let xs = LerpAxis::new(w, out_w);
        let mut out = Tensor::zeros(&[c, out_h, out_w]);
        kernels::resize_bilinear(self.value(input).data(), (c, h, w), &ys, &xs, out.data_mut());
        self.push("bilinear_resize", out, Op::Resize { input, ys, xs }, &[input])
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let out = match kind {
            Activation::Relu => self.value(input).map(|v| v.max(T::zero())),
            Activation::Softplus => self.value(input).map(kernels::softplus),
        };
        self.push("activation", out, Op::Activation { input, kind }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn softplus(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Softplus)
    }

    /// Per-channel global pooling of a `K×H×W` tensor into a length-`K` vector.
    pub fn global_pool(&mut self, input: Var, kind: Pool) -> Result<Var> {
        let (k, h, w) = self.value(input).dims3("global_pool")?;
        if h == 0 || w == 0 {
            return Err(Error::shape("global_pool", "empty map"));
        }
        let x = self.value(input);
        let mut out = Tensor::zeros(&[k]);
        match kind {
            Pool::Max => {
                let mut argmax = Vec::with_capacity(k);
                for ch in 0..k {
                    let plane = x.channel(ch);
                    let mut best = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    out.data_mut()[ch] = plane[best];
                }
                self.push("global_pool", out, Op::GlobalMax { input, argmax }, &[input])
            }
            Pool::Avg => {
                let n = T::of((h * w) as f64);
                for ch in 0..k {
                    out.data_mut()[ch] = x.channel(ch).iter().copied().sum::<T>() / n;
                }
                self.push("global_pool", out, Op::GlobalAvg { input }, &[input])
            }
        }
    }

    /// 2×2 average downsampling of a `C×H×W` tensor with even `H`, `W`.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("odd extent {h}×{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let quarter = T::of(0.25);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        {
            let o = out.data_mut();
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let base = ch * h * w + 2 * y * w + 2 * xx;
                        o[(ch * oh + y) * ow + xx] = (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]) * quarter;
                    }
                }
            }
        }
        self.push("avg_pool2", out, Op::AvgPool2 { input }, &[input])
    }

    /// `x / max(‖x‖₂, eps)` over the vectors selected by `scope`.
    pub fn l2_normalize(&mut self, input: Var, scope: NormScope, eps: f64) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let groups = match scope {
            NormScope::WholeTensor => Groups {
                outer: 1,
                len: x.len(),
                inner: 1,
            },
            NormScope::PerChannel => {
                let lead = *shape.first().ok_or_else(|| Error::shape("l2_normalize", "rank 0"))?;
                Groups {
                    outer: lead,
                    len: if lead == 0 { 0 } else { x.len() / lead },
                    inner: 1,
                }
            }
            NormScope::PerPixel => {
                if shape.len() < 3 {
                    return Err(Error::shape("l2_normalize", "per-pixel scope needs rank ≥ 3"));
                }
                let axis = shape.len() - 3;
                Groups {
                    outer: shape[..axis].iter().product(),
                    len: shape[axis],
                    inner: shape[axis + 1..].iter().product(),
                }
            }
        };
        let eps = T::of(eps);
        let mut norms = Vec::with_capacity(groups.outer * groups.inner);
        let mut out = x.clone();
        {
            let xd = x.data();
            let od = out.data_mut();
            for o in 0..groups.outer {
                for i in 0..groups.inner {
                    let mut ss = T::zero();
                    for j in 0..groups.len {
                        let v = xd[groups.index(o, j, i)];
                        ss = ss + v * v;
                    }
                    let n = ss.sqrt();
                    let d = n.max(eps);
                    for j in 0..groups.len {
                        let idx = groups.index(o, j, i);
                        od[idx] = xd[idx] / d;
                    }
                    norms.push(n);
                }
            }
        }
        self.push(
            "l2_normalize",
            out,
            Op::L2Normalize {
                input,
                groups,
                norms,
                eps,
            },
            &[input],
        )
    }

    /// Separable Gaussian smoothing of each plane of a `K×H×W` tensor with
    /// reflective borders.
    pub fn gaussian_blur(&mut self, input: Var, sigma: f64) -> Result<Var> {
        if !(sigma > 0.0) {
            return Err(Error::Invalid(format!("blur sigma must be > 0, got {sigma}")));
        }
        let dims = self.value(input).dims3("gaussian_blur")?;
        let taps = kernels::gaussian_taps(sigma);
        let mut out = Tensor::zeros(self.shape(input));
        kernels::blur_planes(self.value(input).data(), dims, &taps, false, out.data_mut());
        self.push("gaussian_blur", out, Op::Blur { input, taps }, &[input])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |p, q| p + q);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |p, q| p - q);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |p, q| p * q);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.abs());
        self.push("abs", out, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push("square", out, Op::Square(a), &[a])
    }

    /// `min(x, cap)` elementwise.
    pub fn clamp_max(&mut self, a: Var, cap: f64) -> Result<Var> {
        let cap = T::of(cap);
        let out = self.value(a).map(|v| v.min(cap));
        self.push("clamp_max", out, Op::ClampMax(a, cap), &[a])
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&tensors)?;
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    /// `len` slices along the leading axis starting at `start`.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let lead = *x.shape().first().ok_or_else(|| Error::shape("slice", "rank 0"))?;
        if start + len > lead {
            return Err(Error::shape("slice", format!("{start}+{len} > {lead}")));
        }
        let inner: usize = x.shape()[1..].iter().product();
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(shape, x.data()[start * inner..(start + len) * inner].to_vec())?;
        self.push("slice", out, Op::Slice { input, start }, &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(input), &[input])
    }

    /// `G[i,j] = ⟨x_i, x_j⟩` over slices of the leading axis.
    pub fn gram(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let k = *x.shape().first().ok_or_else(|| Error::shape("gram", "rank 0"))?;
        let mut out = Tensor::zeros(&[k, k]);
        for i in 0..k {
            for j in i..k {
                let v: T = x.channel(i).iter().zip(x.channel(j)).map(|(&a, &b)| a * b).sum();
                out.data_mut()[i * k + j] = v;
                out.data_mut()[j * k + i] = v;
            }
        }
        self.push("gram", out, Op::Gram(input), &[input])
    }

    /// Softmax cross-entropy of a logit vector against class `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if target >= z.len() {
            return Err(Error::Invalid(format!("target {target} ≥ {} classes", z.len())));
        }
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let probs: Vec<T> = exps.iter().map(|&e| e / total).collect();
        let loss = -(z[target] - m - total.ln());
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, target, probs },
            &[logits],
        )
    }

    // ----------------------------------------------------------- backward

    /// Backpropagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + *b;
                        }
                    }
                    None => {
                        node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut emit = |v: Var, f: &mut dyn FnMut(&mut [T])| -> Result<()> {
            if v.0 >= idx {
                return Err(Error::Cycle { node: idx, input: v.0 });
            }
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, bank, geom } => {
                let bank_data = self.value(*bank).data();
                emit(*input, &mut |gi| kernels::conv2d_adjoint(g, bank_data, geom, gi))?;
                let in_data = self.value(*input).data();
                emit(*bank, &mut |gb| kernels::conv2d_bank_grad(in_data, g, geom, gb))?;
            }
            Op::ConvTranspose2d { input, bank, geom } => {
                // forward was y = Aᵀx, so dx = A g and dW pairs g (input side) with x (output side)
                let bank_data = self.value(*bank).data();
                emit(*input, &mut |gi| kernels::conv2d(g, bank_data, geom, gi))?;
                let x = self.value(*input).data();
                emit(*bank, &mut |gb| kernels::conv2d_bank_grad(g, x, geom, gb))?;
            }
            Op::ChannelBias { input, bias } => {
                emit(*input, &mut |gi| add_into(gi, g))?;
                let c = self.value(*bias).len();
                let inner = if c == 0 { 0 } else { g.len() / c };
                emit(*bias, &mut |gb| {
                    for ch in 0..c {
                        gb[ch] = gb[ch] + g[ch * inner..(ch + 1) * inner].iter().copied().sum::<T>();
                    }
                })?;
            }
            Op::Resize { input, ys, xs } => {
                let dims = self.value(*input).dims3("bilinear_resize")?;
                emit(*input, &mut |gi| kernels::resize_bilinear_adjoint(g, dims, ys, xs, gi))?;
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input).data();
                emit(*input, &mut |gi| match kind {
                    Activation::Relu => {
                        for ((a, &xv), &gv) in gi.iter_mut().zip(x).zip(g) {
                            if xv > T::zero() {
                                *a = *a + gv;
                            }
                        }
                    }
                    Activation::Softplus => {
                        for ((a, &xv), &gv) in gi.iter_mut().zip(x).zip(g) {
                            *a = *a + gv * kernels::sigmoid(xv);
                        }
                    }
                })?;
            }
            Op::GlobalMax { input, argmax } => {
                let plane = self.value(*input).len() / argmax.len().max(1);
                emit(*input, &mut |gi| {
                    for (ch, &am) in argmax.iter().enumerate() {
                        gi[ch * plane + am] = gi[ch * plane + am] + g[ch];
                    }
                })?;
            }
            Op::GlobalAvg { input } => {
                let k = g.len();
                let plane = self.value(*input).len() / k.max(1);
                let inv = T::one() / T::of(plane as f64);
                emit(*input, &mut |gi| {
                    for ch in 0..k {
                        for v in &mut gi[ch * plane..(ch + 1) * plane] {
                            *v = *v + g[ch] * inv;
                        }
                    }
                })?;
            }
            Op::AvgPool2 { input } => {
                let (c, h, w) = self.value(*input).dims3("avg_pool2")?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                emit(*input, &mut |gi| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let gv = g[(ch * oh + y) * ow + x] * quarter;
                                let base = ch * h * w + 2 * y * w + 2 * x;
                                for off in [0, 1, w, w + 1] {
                                    gi[base + off] = gi[base + off] + gv;
                                }
                            }
                        }
                    }
                })?;
            }
            Op::L2Normalize {
                input,
                groups,
                norms,
                eps,
            } => {
                let y = node.value.data();
                emit(*input, &mut |gi| {
                    for o in 0..groups.outer {
                        for i in 0..groups.inner {
                            let n = norms[o * groups.inner + i];
                            if n > *eps {
                                let mut gy = T::zero();
                                for j in 0..groups.len {
                                    let k = groups.index(o, j, i);
                                    gy = gy + g[k] * y[k];
                                }
                                for j in 0..groups.len {
                                    let k = groups.index(o, j, i);
                                    gi[k] = gi[k] + (g[k] - y[k] * gy) / n;
                                }
                            } else {
                                for j in 0..groups.len {
                                    let k = groups.index(o, j, i);
                                    gi[k] = gi[k] + g[k] / *eps;
                                }
                            }
                        }
                    }
                })?;
            }
            Op::Blur { input, taps } => {
                let dims = self.value(*input).dims3("gaussian_blur")?;
                emit(*input, &mut |gi| {
                    let mut tmp = vec![T::zero(); gi.len()];
                    kernels::blur_planes(g, dims, taps, true, &mut tmp);
                    add_into(gi, &tmp);
                })?;
            }
            Op::Add(a, b) => {
                emit(*a, &mut |gi| add_into(gi, g))?;
                emit(*b, &mut |gi| add_into(gi, g))?;
            }
            Op::Sub(a, b) => {
                emit(*a, &mut |gi| add_into(gi, g))?;
                emit(*b, &mut |gi| {
                    for (x, &gv) in gi.iter_mut().zip(g) {
                        *x = *x - gv;
                    }
                })?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                emit(*a, &mut |gi| {
                    for ((x, &gv), &o) in gi.iter_mut().zip(g).zip(bv) {
                        *x = *x + gv * o;
                    }
                })?;
                emit(*b, &mut |gi| {
                    for ((x, &gv), &o) in gi.iter_mut().zip(g).zip(av) {
                        *x = *x + gv * o;
                    }
                })?;
            }
            Op::Scale(a, s) => {
                emit(*a, &mut |gi| {
                    for (x, &gv) in gi.iter_mut().zip(g) {
                        *x = *x + gv * *s;
                    }
                })?;
            }
            Op::Sum(a) => {
                emit(*a, &mut |gi| {
                    for x in gi.iter_mut() {
                        *x = *x + g[0];
                    }
                })?;
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                emit(*a, &mut |gi| {
                    for ((x, &gv), &v) in gi.iter_mut().zip(g).zip(av) {
                        let s = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *x = *x + gv * s;
                    }
                })?;
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                let two = T::of(2.0);
                emit(*a, &mut |gi| {
                    for ((x, &gv), &v) in gi.iter_mut().zip(g).zip(av) {
                        *x = *x + two * gv * v;
                    }
                })?;
            }
            Op::ClampMax(a, cap) => {
                let av = self.value(*a).data();
                emit(*a, &mut |gi| {
                    for ((x, &gv), &v) in gi.iter_mut().zip(g).zip(av) {
                        if v < *cap {
                            *x = *x + gv;
                        }
                    }
                })?;
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let seg = &g[offset..offset + n];
                    emit(p, &mut |gi| add_into(gi, seg))?;
                    offset += n;
                }
            }
            Op::Slice { input, start } => {
                let inner: usize = self.shape(*input)[1..].iter().product();
                let off = start * inner;
                emit(*input, &mut |gi| add_into(&mut gi[off..off + g.len()], g))?;
            }
            Op::Reshape(a) => emit(*a, &mut |gi| add_into(gi, g))?,
            Op::Gram(a) => {
                let x = self.value(*a);
                let k = x.shape()[0];
                let m = x.len() / k.max(1);
                emit(*a, &mut |gi| {
                    for i in 0..k {
                        for j in 0..k {
                            let c = g[i * k + j] + g[j * k + i];
                            if c == T::zero() {
                                continue;
                            }
                            let xj = x.channel(j);
                            for (t, &v) in gi[i * m..(i + 1) * m].iter_mut().zip(xj) {
                                *t = *t + c * v;
                            }
                        }
                    }
                })?;
            }
            Op::CrossEntropy { logits, target, probs } => {
                emit(*logits, &mut |gi| {
                    for (c, (x, &p)) in gi.iter_mut().zip(probs).enumerate() {
                        let t = if c == *target { T::one() } else { T::zero() };
                        *x = *x + g[0] * (p - t);
                    }
                })?;
            }
        }
        Ok(())
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_one_by_one_scales() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = g.conv2d(x, w, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_same_padding_single_pixel() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1], &[5.0]));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, 1).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 3]));
        let w = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(matches!(g.conv2d(x, w, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_transpose_identity_filter() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, -2.0, 3.0, 4.5]));
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = g.conv_transpose2d(x, w, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn resize_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1], &[7.0]));
        let y = g.bilinear_resize(x, 4, 4).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 7.0));
        let x = g.constant(t(&[1, 1, 2], &[0.0, 2.0]));
        let y = g.bilinear_resize(x, 1, 3).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let x = g.constant(t(&[2, 3, 5], &data));
        let y = g.bilinear_resize(x, 3, 5).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-3.0, 0.0, 3.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = g.softplus(x).unwrap();
        assert!((g.value(s).data()[1] - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 0.0]));
        let mx = g.global_pool(x, Pool::Max).unwrap();
        let av = g.global_pool(x, Pool::Avg).unwrap();
        assert_eq!(g.value(mx).data(), &[3.0]);
        assert_eq!(g.value(av).data(), &[1.5]);
        let c = g.constant(Tensor::full(&[2, 3, 3], 4.0));
        let mx = g.global_pool(c, Pool::Max).unwrap();
        let av = g.global_pool(c, Pool::Avg).unwrap();
        assert_eq!(g.value(mx).data(), &[4.0, 4.0]);
        assert_eq!(g.value(av).data(), &[4.0, 4.0]);
    }

    #[test]
    fn max_pool_routes_to_first_argmax() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 2, 2], &[5.0, 1.0, 5.0, 0.0]));
        let m = g.global_pool(x, Pool::Max).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.l2_normalize(x, NormScope::WholeTensor, 1e-8).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
        let z = g.constant(Tensor::zeros(&[3]));
        let y = g.l2_normalize(z, NormScope::WholeTensor, 1e-8).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 3]);
        let p = g.constant(t(&[2, 1, 2], &[3.0, 0.0, 4.0, 2.0]));
        let y = g.l2_normalize(p, NormScope::PerPixel, 1e-8).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.0, 0.8, 1.0]);
    }

    #[test]
    fn blur_keeps_constants() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 5, 4], 3.0f64));
        let y = g.gaussian_blur(x, 1.3).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let y = g.scale(x, 2.0).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[1e308]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.param(t(&[2], &[3.0, 4.0]));
        let p = g.mul(x, w).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 2.0]);
    }
}

//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value and whatever
//! it needs for the backward pass. Node ids are append positions, so the
//! append order is already a topological order and [`Tape::backward`]
//! simply walks the nodes in reverse.
//!
//! A tape lives for one forward/backward pass. Parameters enter it as
//! leaves (copies of the model's tensors); the optimizer updates the
//! model between tapes.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, ConvGeom, Padding, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<u32>,
    },
    AvgPool2d {
        input: Var,
        dims: [usize; 4],
    },
    Upsample {
        input: Var,
        dims: [usize; 4],
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a[N,C,H,W] * b[N,1,H,W]`, `b` shared across channels.
    MulChannels {
        a: Var,
        b: Var,
        dims: [usize; 4],
    },
    Div(Var, Var),
    Affine {
        input: Var,
        scale: T,
    },
    Relu(Var),
    Sigmoid(Var),
    Pow {
        input: Var,
        exponent: T,
    },
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    Concat {
        a: Var,
        b: Var,
        dims_a: [usize; 4],
        cb: usize,
    },
    Slice {
        input: Var,
        dims: [usize; 4],
        start: usize,
        len: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the differentiable leaves of a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` if nothing reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`; zeros shaped like `v` when the loss did not depend on it.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut [T] {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            bias.map(|b| self.value(b).shape()),
            padding,
        )?;
        let out = tensor::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![geom.n, geom.o, geom.oh, geom.ow], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom }, rg))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).dims4("maxpool2d")?;
        tensor::check_poolable("maxpool2d", dims)?;
        let (out, argmax) = tensor::maxpool2d_forward(dims, self.value(input).data());
        let value = Tensor::new(vec![dims[0], dims[1], dims[2] / 2, dims[3] / 2], out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    pub fn avgpool2d(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).dims4("avgpool2d")?;
        tensor::check_poolable("avgpool2d", dims)?;
        let out = tensor::avgpool2d_forward(dims, self.value(input).data());
        let value = Tensor::new(vec![dims[0], dims[1], dims[2] / 2, dims[3] / 2], out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::AvgPool2d { input, dims }, rg))
    }

    /// 2x bilinear upsampling with half-pixel centres (`align_corners = false`).
    pub fn upsample_bilinear(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).dims4("upsample_bilinear")?;
        let out = tensor::upsample_forward(dims, self.value(input).data());
        let value = Tensor::new(vec![dims[0], dims[1], dims[2] * 2, dims[3] * 2], out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Upsample { input, dims }, rg))
    }

    fn zip_same(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op_name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product of equal shapes, or `[N,C,H,W] * [N,1,H,W]`
    /// with the second operand shared across channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let rg = self.needs(a) || self.needs(b);
        if sa == sb {
            let value = self.zip_same("mul", a, b, |x, y| x * y)?;
            return Ok(self.push(value, Op::Mul(a, b), rg));
        }
        match (sa, sb) {
            (&[n, c, h, w], &[nb, 1, hb, wb]) if n == nb && h == hb && w == wb => {
                let plane = h * w;
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                let mut out = Vec::with_capacity(ta.len());
                for i in 0..n {
                    let coef = &tb[i * plane..(i + 1) * plane];
                    for ch in 0..c {
                        let x = &ta[(i * c + ch) * plane..][..plane];
                        out.extend(x.iter().zip(coef).map(|(&xv, &cv)| xv * cv));
                    }
                }
                let value = Tensor::new(vec![n, c, h, w], out)?;
                Ok(self.push(value, Op::MulChannels { a, b, dims: [n, c, h, w] }, rg))
            }
            _ => Err(Error::shape(
                "mul",
                format!("cannot broadcast {sb:?} onto {sa:?} (only [N,1,H,W] over channels)"),
            )),
        }
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("div", a, b, |x, y| x / y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Var {
        let value = self.value(input).map(|x| scale * x + shift);
        let rg = self.needs(input);
        self.push(value, Op::Affine { input, scale }, rg)
    }

    /// Hash of every branch taken by the recorded piecewise ops: the sign
    /// of each ReLU input, each max-pool winner and the side of each clamp
    /// bound. Two evaluations with equal signatures lie on the same smooth
    /// piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => {
                    for &x in self.value(*input).data() {
                        (x > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } => argmax.hash(&mut h),
                Op::Clamp { input, lo, hi } => {
                    for &x in self.value(*input).data() {
                        let side: u8 = if x < *lo {
                            0
                        } else if x > *hi {
                            2
                        } else {
                            1
                        };
                        side.hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.needs(input);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.needs(input);
        self.push(value, Op::Sigmoid(input), rg)
    }

    /// `x^exponent` for non-negative `x`.
    pub fn pow_scalar(&mut self, input: Var, exponent: T) -> Result<Var> {
        let x = self.value(input);
        if let Some(bad) = x.data().iter().find(|&&v| v < T::zero() || v.is_nan()) {
            return Err(Error::InvalidArgument(format!(
                "pow_scalar needs a non-negative base, got {bad}"
            )));
        }
        let value = if exponent == T::one() {
            x.clone()
        } else {
            x.map(|v| v.powf(exponent))
        };
        let rg = self.needs(input);
        Ok(self.push(value, Op::Pow { input, exponent }, rg))
    }

    /// Clamps into `[lo, hi]`; the gradient passes through inside the interval.
    pub fn clamp(&mut self, input: Var, lo: T, hi: T) -> Var {
        let value = self.value(input).map(|v| v.max(lo).min(hi));
        let rg = self.needs(input);
        self.push(value, Op::Clamp { input, lo, hi }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims_a = self.value(a).dims4("concat_channels")?;
        let dims_b = self.value(b).dims4("concat_channels")?;
        let [n, ca, h, w] = dims_a;
        let [nb, cb, hb, wb] = dims_b;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("batch/spatial mismatch: {dims_a:?} vs {dims_b:?}"),
            ));
        }
        let plane = h * w;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ta.len() + tb.len());
        for i in 0..n {
            out.extend_from_slice(&ta[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&tb[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Concat { a, b, dims_a, cb }, rg))
    }

    /// Channels `[start, start + len)` of a `[N,C,H,W]` tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let dims = self.value(input).dims4("slice_channels")?;
        let [n, c, h, w] = dims;
        if start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{} exceeds {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            out.extend_from_slice(&src[(i * c + start) * plane..(i * c + start + len) * plane]);
        }
        let value = Tensor::new(vec![n, len, h, w], out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Slice { input, dims, start, len }, rg))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum::<T>();
        let rg = self.needs(input);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a single value, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let mut leaves: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        leaves.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                // Inputs precede the node, and are distinct slots unless the
                // same var is used twice, which conv never does.
                let mut dx = want(*input).then(|| grads[input.0].take().unwrap_or_else(|| vec![T::zero(); len(*input)]));
                let mut dk = want(*kernel).then(|| grads[kernel.0].take().unwrap_or_else(|| vec![T::zero(); len(*kernel)]));
                let mut db = bias
                    .filter(|b| want(*b))
                    .map(|b| grads[b.0].take().unwrap_or_else(|| vec![T::zero(); len(b)]));
                tensor::conv2d_backward(geom, x, k, g, dx.as_deref_mut(), dk.as_deref_mut(), db.as_deref_mut());
                if let Some(dx) = dx {
                    grads[input.0] = Some(dx);
                }
                if let Some(dk) = dk {
                    grads[kernel.0] = Some(dk);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    grads[b.0] = Some(db);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if want(*input) {
                    let dx = accumulate(&mut grads[input.0], len(*input));
                    for (&gi, &src) in g.iter().zip(argmax) {
                        dx[src as usize] += gi;
                    }
                }
            }
            Op::AvgPool2d { input, dims } => {
                if want(*input) {
                    let [n, c, h, w] = *dims;
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = T::lit(0.25);
                    let dx = accumulate(&mut grads[input.0], len(*input));
                    for plane in 0..n * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(plane * oh + oy) * ow + ox] * quarter;
                                let i0 = plane * h * w + 2 * oy * w + 2 * ox;
                                dx[i0] += gv;
                                dx[i0 + 1] += gv;
                                dx[i0 + w] += gv;
                                dx[i0 + w + 1] += gv;
                            }
                        }
                    }
                }
            }
            Op::Upsample { input, dims } => {
                if want(*input) {
                    let dx = accumulate(&mut grads[input.0], len(*input));
                    tensor::upsample_backward(*dims, g, dx);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if want(*a) {
                    let da = accumulate(&mut grads[a.0], g.len());
                    da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
                if want(*b) {
                    let db = accumulate(&mut grads[b.0], g.len());
                    db.iter_mut().zip(g).for_each(|(d, &gi)| *d += sign * gi);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if want(*a) {
                    let da = accumulate(&mut grads[a.0], g.len());
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(vb) {
                        *d += gi * y;
                    }
                }
                if want(*b) {
                    let db = accumulate(&mut grads[b.0], g.len());
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(va) {
                        *d += gi * x;
                    }
                }
            }
            Op::MulChannels { a, b, dims } => {
                let [n, c, h, w] = *dims;
                let plane = h * w;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if want(*a) {
                    let da = accumulate(&mut grads[a.0], va.len());
                    for i in 0..n {
                        let coef = &vb[i * plane..(i + 1) * plane];
                        for ch in 0..c {
                            let off = (i * c + ch) * plane;
                            for p in 0..plane {
                                da[off + p] += g[off + p] * coef[p];
                            }
                        }
                    }
                }
                if want(*b) {
                    let db = accumulate(&mut grads[b.0], vb.len());
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * plane;
                            for p in 0..plane {
                                db[i * plane + p] += g[off + p] * va[off + p];
                            }
                        }
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if want(*a) {
                    let da = accumulate(&mut grads[a.0], g.len());
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(vb) {
                        *d += gi / y;
                    }
                }
                if want(*b) {
                    let db = accumulate(&mut grads[b.0], g.len());
                    for (((d, &gi), &x), &y) in db.iter_mut().zip(g).zip(va).zip(vb) {
                        *d -= gi * x / (y * y);
                    }
                }
            }
            Op::Affine { input, scale } => {
                if want(*input) {
                    let dx = accumulate(&mut grads[input.0], g.len());
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += *scale * gi);
                }
            }
            Op::Relu(input) => {
                if want(*input) {
                    let x = self.value(*input).data();
                    let dx = accumulate(&mut grads[input.0], g.len());
                    for ((d, &gi), &xv) in dx.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(input) => {
                if want(*input) {
                    let y = node.value.data();
                    let dx = accumulate(&mut grads[input.0], g.len());
                    for ((d, &gi), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yv * (T::one() - yv);
                    }
                }
            }
            Op::Pow { input, exponent } => {
                if want(*input) {
                    let x = self.value(*input).data();
                    let e = *exponent;
                    let dx = accumulate(&mut grads[input.0], g.len());
                    for ((d, &gi), &xv) in dx.iter_mut().zip(g).zip(x) {
                        // d/dx x^e is unbounded at 0 for e < 1; use 0 there.
                        if e == T::one() {
                            *d += gi;
                        } else if xv > T::zero() {
                            *d += gi * e * xv.powf(e - T::one());
                        }
                    }
                }
            }
            Op::Clamp { input, lo, hi } => {
                if want(*input) {
                    let x = self.value(*input).data();
                    let dx = accumulate(&mut grads[input.0], g.len());
                    for ((d, &gi), &xv) in dx.iter_mut().zip(g).zip(x) {
                        if xv >= *lo && xv <= *hi {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Concat { a, b, dims_a, cb } => {
                let [n, ca, h, w] = *dims_a;
                let plane = h * w;
                let stride = (ca + cb) * plane;
                if want(*a) {
                    let da = accumulate(&mut grads[a.0], n * ca * plane);
                    for i in 0..n {
                        let src = &g[i * stride..i * stride + ca * plane];
                        da[i * ca * plane..(i + 1) * ca * plane]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
                if want(*b) {
                    let db = accumulate(&mut grads[b.0], n * cb * plane);
                    for i in 0..n {
                        let src = &g[i * stride + ca * plane..(i + 1) * stride];
                        db[i * cb * plane..(i + 1) * cb * plane]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Slice { input, dims, start, len: width } => {
                if want(*input) {
                    let [n, c, h, w] = *dims;
                    let plane = h * w;
                    let dx = accumulate(&mut grads[input.0], n * c * plane);
                    for i in 0..n {
                        let dst = &mut dx[(i * c + start) * plane..(i * c + start + width) * plane];
                        let src = &g[i * width * plane..(i + 1) * width * plane];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Sum(input) => {
                if want(*input) {
                    let n = len(*input);
                    let dx = accumulate(&mut grads[input.0], n);
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(&tape, unused).data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn relu_kink_and_sigmoid_midpoint() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-3.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let z = tape.constant(Tensor::scalar(0.0));
        let sg = tape.sigmoid(z);
        assert_eq!(tape.value(sg).data(), &[0.5]);
    }

    #[test]
    fn pow_scalar_value_and_negative_rejection() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.4));
        let y = tape.pow_scalar(x, 0.75).unwrap();
        assert!((tape.value(y).data()[0] - 0.4f64.powf(0.75)).abs() < 1e-15);
        assert!((tape.value(y).data()[0] - 0.502_973_3).abs() < 1e-6);
        let neg = tape.leaf(Tensor::scalar(-0.1));
        assert!(tape.pow_scalar(neg, 0.75).is_err());
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(vec![2, 2, 2, 3], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(vec![2, 1, 2, 3], |i| -(i as f64)));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3, 2, 3]);
        let a2 = tape.slice_channels(c, 0, 2).unwrap();
        let b2 = tape.slice_channels(c, 2, 1).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
    }

    #[test]
    fn concat_with_empty_block_is_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f64));
        let e = tape.constant(Tensor::zeros(vec![1, 0, 2, 2]));
        let c = tape.concat_channels(a, e).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![1, 2, 4, 4]));
        let b = tape.leaf(Tensor::zeros(vec![1, 2, 2, 4]));
        assert!(tape.concat_channels(a, b).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first_element() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 4, 4], 3.0));
        let p = tape.maxpool2d(x).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 3.0));
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        let gx = g.get(x).unwrap().data();
        for y in 0..4 {
            for xx in 0..4 {
                let expect = if y % 2 == 0 && xx % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(gx[y * 4 + xx], expect);
            }
        }
    }

    #[test]
    fn mul_rejects_undocumented_broadcast() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![1, 2, 4, 4]));
        let b = tape.leaf(Tensor::zeros(vec![1, 2, 1, 4]));
        assert!(tape.mul(a, b).is_err());
    }
}

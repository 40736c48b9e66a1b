//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};

/// Dense row-major array. `shape` holds only positive dimensions, except
/// that a channel dimension may be zero so that an empty channel block can
/// be concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() {
            return Err(Error::shape("tensor", "shape must have at least one dimension"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(
                "item",
                format!("expected a single value, shape is {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets the shape as `[N, C, H, W]`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            s => Err(Error::shape(op, format!("expected a 4-d [N,C,H,W] tensor, got {s:?}"))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Spatial padding for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that the output has the input's spatial size.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: Option<&[usize]>,
        padding: Padding,
    ) -> Result<Self> {
        let [n, c, h, w] = match *input {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::shape("conv2d", format!("input must be [N,C,H,W], got {input:?}"))),
        };
        let [o, kc, kh, kw] = match *kernel {
            [o, kc, kh, kw] => [o, kc, kh, kw],
            _ => return Err(Error::shape("conv2d", format!("kernel must be [O,C,kh,kw], got {kernel:?}"))),
        };
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but kernel expects {kc}"),
            ));
        }
        if let Some(b) = bias {
            if b != [o] {
                return Err(Error::shape("conv2d", format!("bias must be [{o}], got {b:?}")));
            }
        }
        let (pad_h, pad_w, oh, ow) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::shape(
                        "conv2d",
                        format!("same padding needs odd kernel sizes, got {kh}x{kw}"),
                    ));
                }
                (kh / 2, kw / 2, h, w)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape(
                        "conv2d",
                        format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                    ));
                }
                (0, 0, h - kh + 1, w - kw + 1)
            }
        };
        Ok(ConvGeom { n, c, h, w, o, kh, kw, pad_h, pad_w, oh, ow })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Unfolds one image `[C,H,W]` into columns `[C*kh*kw, OH*OW]`.
fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy + ky) as isize - g.pad_h as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &img[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in out_row.iter_mut().enumerate() {
                        let ix = (ox + kx) as isize - g.pad_w as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image gradient.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox + kx) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.oh * g.ow;
    let in_stride = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.o * plane];
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * plane]
    };
    for b in 0..g.n {
        let img = &input[b * in_stride..(b + 1) * in_stride];
        let dst = &mut out[b * g.o * plane..(b + 1) * g.o * plane];
        let src: &[T] = if g.pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        gemm::nn(g.o, g.patch(), plane, kernel, src, dst, false);
        if let Some(bias) = bias {
            for (row, &bv) in dst.chunks_exact_mut(plane).zip(bias) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Accumulates gradients of a convolution. Any of the three outputs may be
/// skipped by passing `None`.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    dout: &[T],
    mut dinput: Option<&mut [T]>,
    mut dkernel: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let plane = g.oh * g.ow;
    let in_stride = g.c * g.h * g.w;
    let patch = g.patch();
    let need_cols = !g.pointwise() && dkernel.is_some();
    let mut cols = if need_cols { vec![T::zero(); patch * plane] } else { Vec::new() };
    let mut dcols = if !g.pointwise() && dinput.is_some() {
        vec![T::zero(); patch * plane]
    } else {
        Vec::new()
    };
    for b in 0..g.n {
        let img = &input[b * in_stride..(b + 1) * in_stride];
        let dy = &dout[b * g.o * plane..(b + 1) * g.o * plane];
        if let Some(db) = dbias.as_deref_mut() {
            for (acc, row) in db.iter_mut().zip(dy.chunks_exact(plane)) {
                *acc += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = dkernel.as_deref_mut() {
            let src: &[T] = if g.pointwise() {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            gemm::nt(g.o, plane, patch, dy, src, dk, true);
        }
        if let Some(dx) = dinput.as_deref_mut() {
            let dimg = &mut dx[b * in_stride..(b + 1) * in_stride];
            if g.pointwise() {
                gemm::tn(patch, g.o, plane, kernel, dy, dimg, true);
            } else {
                gemm::tn(patch, g.o, plane, kernel, dy, &mut dcols, false);
                col2im(g, &dcols, dimg);
            }
        }
    }
}

/// 2x2 stride-2 max pooling. Returns the pooled values and, per output,
/// the flat input index that won (first occurrence on ties).
pub(crate) fn maxpool2d_forward<T: Scalar>(dims: [usize; 4], input: &[T]) -> (Vec<T>, Vec<u32>) {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avgpool2d_forward<T: Scalar>(dims: [usize; 4], input: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                out.push((input[i0] + input[i0 + 1] + input[i0 + w] + input[i0 + w + 1]) * quarter);
            }
        }
    }
    out
}

pub(crate) fn check_poolable(op: &'static str, dims: [usize; 4]) -> Result<()> {
    let [_, _, h, w] = dims;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(op, format!("spatial size {h}x{w} must be even")));
    }
    Ok(())
}

/// Source taps of 2x bilinear upsampling along one axis (half-pixel
/// centres, `align_corners = false`): `(lo, hi, w_lo, w_hi)` per output.
pub(crate) fn bilinear_taps<T: Scalar>(len: usize) -> Vec<(usize, usize, T, T)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            let frac = src - lo as f64;
            (lo, hi, T::lit(1.0 - frac), T::lit(frac))
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Scalar>(dims: [usize; 4], input: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let ty = bilinear_taps::<T>(h);
    let tx = bilinear_taps::<T>(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] =
                    wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(dims: [usize; 4], dout: &[T], dinput: &mut [T]) {
    let [n, c, h, w] = dims;
    let ty = bilinear_taps::<T>(h);
    let tx = bilinear_taps::<T>(w);
    let (oh, ow) = (2 * h, 2 * w);
    for plane in 0..n * c {
        let dy = &dout[plane * oh * ow..(plane + 1) * oh * ow];
        let dx = &mut dinput[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = dy[oy * ow + ox];
                dx[y0 * w + x0] += g * wy0 * wx0;
                dx[y0 * w + x1] += g * wy0 * wx1;
                dx[y1 * w + x0] += g * wy1 * wx0;
                dx[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
}

/// Tape-free convolution, for inference paths and tests.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), bias.map(|b| b.shape()), padding)?;
    let out = conv2d_forward(&g, input.data(), kernel.data(), bias.map(|b| b.data()));
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)
}

/// Tape-free 2x2 max pooling.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = input.dims4("maxpool2d")?;
    check_poolable("maxpool2d", dims)?;
    let (out, _) = maxpool2d_forward(dims, input.data());
    Tensor::new(vec![dims[0], dims[1], dims[2] / 2, dims[3] / 2], out)
}

/// Tape-free 2x2 average pooling.
pub fn avgpool2d<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = input.dims4("avgpool2d")?;
    check_poolable("avgpool2d", dims)?;
    let out = avgpool2d_forward(dims, input.data());
    Tensor::new(vec![dims[0], dims[1], dims[2] / 2, dims[3] / 2], out)
}

/// Tape-free 2x bilinear upsampling.
pub fn upsample_bilinear<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = input.dims4("upsample_bilinear")?;
    let out = upsample_forward(dims, input.data());
    Tensor::new(vec![dims[0], dims[1], dims[2] * 2, dims[3] * 2], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
        let k = Tensor::from_fn(vec![3, 2, 3, 3], |i| i as f64 * 0.1 - 1.0);
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &k, Some(&b), Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, b.data()[i / 16]);
        }
    }

    #[test]
    fn pointwise_conv_scales() {
        let x = Tensor::new(vec![1, 1, 3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        let y = conv2d(&x, &k, Some(&b), Padding::Same).unwrap();
        assert_eq!(y.data(), x.map(|v| 2.0 * v).data());
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernel() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(vec![1, 3, 3, 3]), None, Padding::Same).is_err());
        assert!(conv2d(&x, &Tensor::zeros(vec![1, 2, 2, 2]), None, Padding::Same).is_err());
        assert!(conv2d(&x, &Tensor::zeros(vec![1, 2, 2, 2]), None, Padding::Valid).is_ok());
    }

    #[test]
    fn maxpool_single_window_and_odd_rejection() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&x).unwrap().data(), &[4.0]);
        assert!(maxpool2d(&Tensor::<f64>::zeros(vec![1, 1, 3, 4])).is_err());
    }

    #[test]
    fn upsample_half_pixel_row() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = upsample_bilinear(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(&y.data()[4..], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = Tensor::full(vec![2, 3, 3, 5], 0.7f64);
        let y = upsample_bilinear(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }
}

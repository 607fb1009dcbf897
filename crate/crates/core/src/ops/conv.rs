//! 2-D convolution and transposed convolution with reverse-mode gradients.
//!
//! Both are lowered to im2col/col2im plus a gemm. A transposed convolution is
//! the adjoint of the convolution that maps its output back onto its input,
//! so the two share one patch geometry.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{matmul, MatRef};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Which weight axis holds the output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightLayout {
    /// `(C_out, C_in, ks, ks)`
    Conv,
    /// `(C_in, C_out, ks, ks)`
    Deconv,
}

/// Weight, bias and geometry of a convolution-like layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub layout: WeightLayout,
    pub stride: usize,
    pub padding: usize,
    /// Extra rows/columns appended to a transposed convolution's output.
    /// Always zero for [`WeightLayout::Conv`].
    pub output_padding: usize,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, layout: WeightLayout, stride: usize, padding: usize) -> Result<Self> {
        Self::with_output_padding(weight, bias, layout, stride, padding, 0)
    }

    pub fn with_output_padding(
        weight: Tensor<T>,
        bias: Tensor<T>,
        layout: WeightLayout,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        let w = Self { weight, bias, layout, stride, padding, output_padding };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weight.shape();
        ensure_dim("conv weights", "kernel width", s.w, s.h)?;
        ensure_dim("conv weights", "bias length", self.bias.len(), self.out_channels())?;
        if self.stride == 0 {
            return Err(Error::invalid("conv weights", "stride must be positive"));
        }
        if self.layout == WeightLayout::Conv && self.output_padding != 0 {
            return Err(Error::invalid("conv weights", "output padding only applies to transposed convolution"));
        }
        if self.output_padding >= self.stride.max(1) && self.output_padding > 0 {
            return Err(Error::invalid("conv weights", "output padding must be smaller than stride"));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        match self.layout {
            WeightLayout::Conv => self.weight.shape().c,
            WeightLayout::Deconv => self.weight.shape().n,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.layout {
            WeightLayout::Conv => self.weight.shape().n,
            WeightLayout::Deconv => self.weight.shape().c,
        }
    }

    pub fn ks(&self) -> usize {
        self.weight.shape().h
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Spatial output size for an input of `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ks, s, p) = (self.ks(), self.stride, self.padding);
        match self.layout {
            WeightLayout::Conv => {
                if h + 2 * p < ks || w + 2 * p < ks {
                    return Err(Error::invalid("conv2d", format!("input {h}x{w} smaller than kernel {ks} after padding {p}")));
                }
                Ok(((h + 2 * p - ks) / s + 1, (w + 2 * p - ks) / s + 1))
            }
            WeightLayout::Deconv => {
                let full = |x: usize| (x.saturating_sub(1)) * s + ks + self.output_padding;
                if h == 0 || w == 0 || full(h) <= 2 * p || full(w) <= 2 * p {
                    return Err(Error::invalid("deconv2d", format!("input {h}x{w} yields empty output")));
                }
                Ok((full(h) - 2 * p, full(w) - 2 * p))
            }
        }
    }
}

/// Patch geometry of a convolution from `(c, h, w)` to `(oh, ow)`.
#[derive(Debug, Clone, Copy)]
struct Patches {
    c: usize,
    h: usize,
    w: usize,
    ks: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Patches {
    fn rows(&self) -> usize {
        self.c * self.ks * self.ks
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source coordinate along one axis, or `None` when it falls in padding.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let i = (o * stride + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let cols = self.cols();
        for c in 0..self.c {
            for u in 0..self.ks {
                for v in 0..self.ks {
                    let row = (c * self.ks + u) * self.ks + v;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match Self::src(oy, u, self.stride, self.pad, self.h) {
                            None => line.iter_mut().for_each(|d| *d = T::zero()),
                            Some(iy) => {
                                let base = (c * self.h + iy) * self.w;
                                for (ox, d) in line.iter_mut().enumerate() {
                                    *d = match Self::src(ox, v, self.stride, self.pad, self.w) {
                                        Some(ix) => x[base + ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Patches::im2col`]: scatter-adds columns back into `x`.
    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T]) {
        let cols = self.cols();
        for c in 0..self.c {
            for u in 0..self.ks {
                for v in 0..self.ks {
                    let row = (c * self.ks + u) * self.ks + v;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let Some(iy) = Self::src(oy, u, self.stride, self.pad, self.h) else { continue };
                        let base = (c * self.h + iy) * self.w;
                        for ox in 0..self.ow {
                            if let Some(ix) = Self::src(ox, v, self.stride, self.pad, self.w) {
                                x[base + ix] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_input<T: Scalar>(op: &'static str, input: &Tensor<T>, w: &ConvWeights<T>) -> Result<()> {
    w.validate()?;
    ensure_dim(op, "input channels", input.shape().c, w.in_channels())
}

fn add_bias<T: Scalar>(out: &mut Tensor<T>, bias: &[T]) {
    let s = out.shape();
    let plane = s.plane();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let b = bias[i % s.c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Scalar>(grad_out: &Tensor<T>) -> Vec<T> {
    let s = grad_out.shape();
    let mut gb = vec![T::zero(); s.c];
    for (i, chunk) in grad_out.data().chunks(s.plane()).enumerate() {
        gb[i % s.c] += chunk.iter().copied().sum::<T>();
    }
    gb
}

/// Zero-padded strided convolution: `out = input ⊗ W + B(b)`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    if w.layout != WeightLayout::Conv {
        return Err(Error::invalid("conv2d", "weights use the transposed-convolution layout"));
    }
    check_input("conv2d", input, w)?;
    let s = input.shape();
    let (oh, ow) = w.output_hw(s.h, s.w)?;
    let g = Patches { c: s.c, h: s.h, w: s.w, ks: w.ks(), stride: w.stride, pad: w.padding, oh, ow };
    let cout = w.out_channels();
    let mut out = Tensor::zeros(Shape::new(s.n, cout, oh, ow));
    let mut col = vec![T::zero(); g.rows() * g.cols()];
    let wmat = MatRef::row_major(w.weight.data(), cout, g.rows());
    for n in 0..s.n {
        g.im2col(&input.data()[n * s.item()..(n + 1) * s.item()], &mut col);
        let dst = &mut out.data_mut()[n * cout * oh * ow..(n + 1) * cout * oh * ow];
        matmul(wmat, MatRef::row_major(&col, g.rows(), g.cols()), dst, false);
    }
    add_bias(&mut out, w.bias.data());
    Ok(out)
}

/// Transposed convolution; the weight is laid out `(C_in, C_out, ks, ks)`.
pub fn deconv2d<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    if w.layout != WeightLayout::Deconv {
        return Err(Error::invalid("deconv2d", "weights use the convolution layout"));
    }
    check_input("deconv2d", input, w)?;
    let s = input.shape();
    let (oh, ow) = w.output_hw(s.h, s.w)?;
    let cout = w.out_channels();
    let g = Patches { c: cout, h: oh, w: ow, ks: w.ks(), stride: w.stride, pad: w.padding, oh: s.h, ow: s.w };
    let mut out = Tensor::zeros(Shape::new(s.n, cout, oh, ow));
    let mut col = vec![T::zero(); g.rows() * g.cols()];
    let wmat = MatRef::row_major(w.weight.data(), s.c, g.rows());
    let out_item = cout * oh * ow;
    for n in 0..s.n {
        let x = MatRef::row_major(&input.data()[n * s.item()..(n + 1) * s.item()], s.c, s.plane());
        matmul(wmat.t(), x, &mut col, false);
        g.col2im(&col, &mut out.data_mut()[n * out_item..(n + 1) * out_item]);
    }
    add_bias(&mut out, w.bias.data());
    Ok(out)
}

/// Gradients of a convolution-like layer.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    /// Same layout as the weight tensor.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Reverse pass of [`conv2d`]. The input gradient is only formed when
/// `need_input` is set.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    check_input("conv2d_backward", input, w)?;
    let s = input.shape();
    let (oh, ow) = w.output_hw(s.h, s.w)?;
    let cout = w.out_channels();
    let gs = grad_out.shape();
    ensure_dim("conv2d_backward", "grad channels", gs.c, cout)?;
    ensure_dim("conv2d_backward", "grad height", gs.h, oh)?;
    ensure_dim("conv2d_backward", "grad width", gs.w, ow)?;
    let g = Patches { c: s.c, h: s.h, w: s.w, ks: w.ks(), stride: w.stride, pad: w.padding, oh, ow };
    let mut col = vec![T::zero(); g.rows() * g.cols()];
    let mut gw = vec![T::zero(); w.weight.len()];
    let mut gin = need_input.then(|| Tensor::zeros(s));
    let wmat = MatRef::row_major(w.weight.data(), cout, g.rows());
    let out_item = cout * oh * ow;
    for n in 0..s.n {
        let dy = MatRef::row_major(&grad_out.data()[n * out_item..(n + 1) * out_item], cout, g.cols());
        g.im2col(&input.data()[n * s.item()..(n + 1) * s.item()], &mut col);
        matmul(dy, MatRef::row_major(&col, g.rows(), g.cols()).t(), &mut gw, true);
        if let Some(gin) = gin.as_mut() {
            matmul(wmat.t(), dy, &mut col, false);
            g.col2im(&col, &mut gin.data_mut()[n * s.item()..(n + 1) * s.item()]);
        }
    }
    Ok(ConvGrads { input: gin, weight: gw, bias: bias_grad(grad_out) })
}

/// Reverse pass of [`deconv2d`].
pub fn deconv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    check_input("deconv2d_backward", input, w)?;
    let s = input.shape();
    let (oh, ow) = w.output_hw(s.h, s.w)?;
    let cout = w.out_channels();
    let gs = grad_out.shape();
    ensure_dim("deconv2d_backward", "grad channels", gs.c, cout)?;
    ensure_dim("deconv2d_backward", "grad height", gs.h, oh)?;
    ensure_dim("deconv2d_backward", "grad width", gs.w, ow)?;
    let g = Patches { c: cout, h: oh, w: ow, ks: w.ks(), stride: w.stride, pad: w.padding, oh: s.h, ow: s.w };
    let mut col = vec![T::zero(); g.rows() * g.cols()];
    let mut gw = vec![T::zero(); w.weight.len()];
    let mut gin = need_input.then(|| Tensor::zeros(s));
    let wmat = MatRef::row_major(w.weight.data(), s.c, g.rows());
    let out_item = cout * oh * ow;
    for n in 0..s.n {
        g.im2col(&grad_out.data()[n * out_item..(n + 1) * out_item], &mut col);
        let dcol = MatRef::row_major(&col, g.rows(), g.cols());
        let x = MatRef::row_major(&input.data()[n * s.item()..(n + 1) * s.item()], s.c, s.plane());
        matmul(x, dcol.t(), &mut gw, true);
        if let Some(gin) = gin.as_mut() {
            matmul(wmat, dcol, &mut gin.data_mut()[n * s.item()..(n + 1) * s.item()], false);
        }
    }
    Ok(ConvGrads { input: gin, weight: gw, bias: bias_grad(grad_out) })
}

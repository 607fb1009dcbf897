//! Dense NCHW tensor with an optional gradient buffer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![T::zero(); shape.len()], grad: None }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self { shape, data: vec![value; shape.len()], grad: None }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape { op: "tensor", dim: "data length", got: data.len(), expected: shape.len() });
        }
        Ok(Self { shape, data, grad: None })
    }

    /// 1-D parameter vector stored as `(1, len, 1, 1)`.
    pub fn vector(data: Vec<T>) -> Self {
        let shape = Shape::new(1, data.len(), 1, 1);
        Self { shape, data, grad: None }
    }

    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: T, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::of(v) * std
            })
            .collect();
        Self { shape, data, grad: None }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: T, hi: T, rng: &mut R) -> Self {
        let (lo, hi) = (lo.as_f64(), hi.as_f64());
        let data = (0..shape.len()).map(|_| T::of(rng.gen_range(lo..hi))).collect();
        Self { shape, data, grad: None }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let i = self.shape.index(n, c, h, w);
        &mut self.data[i]
    }

    /// Same data viewed under a different shape of equal size.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::Shape { op: "reshape", dim: "element count", got: shape.len(), expected: self.data.len() });
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::invalid("zip_map", format!("shapes {} and {} differ", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape, data, grad: None })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Concatenates tensors of equal item shape along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("stack", "no tensors"))?.shape;
        let mut data = Vec::with_capacity(first.item() * items.iter().map(|t| t.shape.n).sum::<usize>());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (first.c, first.h, first.w) {
                return Err(Error::invalid("stack", format!("item shape {} differs from {}", t.shape, first)));
            }
            data.extend_from_slice(&t.data);
            n += t.shape.n;
        }
        Ok(Self { shape: Shape::new(n, first.c, first.h, first.w), data, grad: None })
    }

    /// Single batch item as its own tensor.
    pub fn item(&self, n: usize) -> Self {
        let len = self.shape.item();
        Self {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * len..(n + 1) * len].to_vec(),
            grad: None,
        }
    }

    /// Keeps the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Self {
        let s = self.shape;
        let mut out = Self::zeros(Shape::new(s.n, channels.len(), s.h, s.w));
        let plane = s.plane();
        for n in 0..s.n {
            for (j, &c) in channels.iter().enumerate() {
                let src = s.index(n, c, 0, 0);
                let dst = out.shape.index(n, j, 0, 0);
                out.data[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        out
    }

    /// Keeps the listed indices along the batch axis (dimension 0); used to
    /// slice input-channel-major weight layouts.
    pub fn select_outer(&self, indices: &[usize]) -> Self {
        let item = self.shape.item();
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            data.extend_from_slice(&self.data[i * item..(i + 1) * item]);
        }
        Self { shape: Shape::new(indices.len(), self.shape.c, self.shape.h, self.shape.w), data, grad: None }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_or_init(&mut self) -> &mut [T] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[T]) {
        let buf = self.grad_or_init();
        assert_eq!(buf.len(), g.len(), "gradient length mismatch");
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    /// Parameter and gradient buffers borrowed together for an update.
    pub fn param_and_grad(&mut self) -> (&mut [T], Option<&[T]>) {
        (&mut self.data, self.grad.as_deref())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }
}

/// Largest elementwise deviation relative to the reference's largest
/// magnitude (floored at 1 so near-zero references compare absolutely).
pub fn max_relative_error<T: Scalar>(reference: &[T], candidate: &[T]) -> f64 {
    assert_eq!(reference.len(), candidate.len());
    let scale = reference.iter().fold(1.0f64, |m, v| m.max(v.as_f64().abs()));
    reference
        .iter()
        .zip(candidate)
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs() / scale)
        .fold(0.0, f64::max)
}

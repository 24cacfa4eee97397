//! Dense rank-4 tensors in `(N, C, F, T)` layout.
//!
//! The frequency axis comes before the time axis, so a single spectrogram
//! is `(1, 1, n_mels, n_frames)`. Storage is a row-major `Vec`; the element
//! type is generic so that training can run in `f32` while gradient checks
//! run in `f64`.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Element for f32 {}
impl Element for f64 {}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub f: usize,
    pub t: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, f: usize, t: usize) -> Self {
        Shape { n, c, f, t }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.f * self.t
    }

    /// Elements in one `(F, T)` plane.
    pub const fn plane(&self) -> usize {
        self.f * self.t
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, f: usize, t: usize) -> usize {
        ((n * self.c + c) * self.f + f) * self.t + t
    }

    pub const fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.f, self.t]
    }

    /// `NxCxFxT`, the form [`Shape::parse`] reads.
    pub fn compact(&self) -> String {
        format!("{}x{}x{}x{}", self.n, self.c, self.f, self.t)
    }

    /// Parses `NxCxFxT`, e.g. `1x1x256x64`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(['x', 'X', ','])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Invalid(format!("cannot parse shape {s:?}")))?;
        match parts.as_slice() {
            [n, c, f, t] => Ok(Shape::new(*n, *c, *f, *t)),
            [c, f, t] => Ok(Shape::new(1, *c, *f, *t)),
            _ => Err(Error::Invalid(format!(
                "shape {s:?} must have 3 or 4 dimensions"
            ))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.f, self.t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "from_vec",
                format!("{} elements for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    /// `0, 1, 2, ...` in storage order.
    pub fn iota(shape: Shape) -> Self {
        let data = (0..shape.numel()).map(|i| T::lit(i as f64)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for fi in 0..shape.f {
                    for t in 0..shape.t {
                        data.push(f(n, c, fi, t));
                    }
                }
            }
        }
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, f: usize, t: usize) -> T {
        self.data[self.shape.index(n, c, f, t)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, f: usize, t: usize, v: T) {
        let i = self.shape.index(n, c, f, t);
        self.data[i] = v;
    }

    /// Same data under a different shape with equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {shape}", self.shape),
            ));
        }
        Ok(Tensor { shape, ..self })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Swaps the frequency and time axes.
    pub fn transpose_ft(&self) -> Self {
        let s = self.shape;
        let out = Shape::new(s.n, s.c, s.t, s.f);
        Tensor::from_fn(out, |n, c, f, t| self.get(n, c, t, f))
    }

    /// Copies batch item `n` into a `(1, C, F, T)` tensor.
    pub fn item(&self, n: usize) -> Self {
        let s = self.shape;
        let len = s.c * s.plane();
        Tensor {
            shape: Shape::new(1, s.c, s.f, s.t),
            data: self.data[n * len..(n + 1) * len].to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Stacks `(1, C, F, T)` tensors along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("stack of zero tensors".into()))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for it in items {
            let s = it.shape;
            if (s.c, s.f, s.t) != (first.c, first.f, first.t) {
                return Err(Error::shape("stack", format!("{first} vs {s}")));
            }
            n += s.n;
            data.extend_from_slice(&it.data);
        }
        Tensor::from_vec(Shape::new(n, first.c, first.f, first.t), data)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64_lossy()))
                .collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::lit(v.to_f64_lossy())).collect()),
        }
    }

    /// Adds `g` into the accumulated gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{} gradient values for shape {}", g.len(), self.shape),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Stride, padding and grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: (usize, usize), padding: (usize, usize), groups: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            groups,
        }
    }

    /// Output spatial size for an input `(f, t)` and kernel `(kf, kt)`.
    pub fn output_size(&self, input: (usize, usize), kernel: (usize, usize)) -> Result<(usize, usize)> {
        let axis = |len: usize, k: usize, s: usize, p: usize, name: &str| {
            if k == 0 || s == 0 {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel and stride must be positive along {name}"),
                ));
            }
            let padded = len + 2 * p;
            if padded < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {k} exceeds padded input {padded} along {name}"),
                ));
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            axis(input.0, kernel.0, self.stride.0, self.padding.0, "F")?,
            axis(input.1, kernel.1, self.stride.1, self.padding.1, "T")?,
        ))
    }
}

/// Kernel, optional bias and geometry of a convolution, detached from any tape.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    /// `(out_ch, in_ch / groups, k_f, k_t)`.
    pub kernel: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub geometry: ConvGeometry,
}

impl<T: Element> ConvParams<T> {
    pub fn in_channels(&self) -> usize {
        self.kernel.shape().c * self.geometry.groups
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kernel.shape();
        let g = self.geometry.groups;
        if g == 0 {
            return Err(Error::Invalid("groups must be positive".into()));
        }
        if k.n % g != 0 {
            return Err(Error::Divisibility {
                op: "conv2d",
                channels: k.n,
                divisor: g,
            });
        }
        if k.f == 0 || k.t == 0 || self.geometry.stride.0 == 0 || self.geometry.stride.1 == 0 {
            return Err(Error::Invalid(
                "kernel size and stride must be positive".into(),
            ));
        }
        if let Some(b) = &self.bias {
            if b.len() != k.n {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias length {} for {} output channels", b.len(), k.n),
                ));
            }
        }
        Ok(())
    }
}

//! Dense rank-4 `(n, c, h, w)` tensors stored row-major.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [n, c, h, w] => Ok(Shape::new(n, c, h, w)),
            _ => Err(Error::invalid(format!(
                "expected 4 dimensions, got {}",
                dims.len()
            ))),
        }
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

/// Immutable-by-convention dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(format!(
                "buffer of length {} does not fit shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` in storage order.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Single-channel `1×1×h×w` map from a row-major buffer.
    pub fn from_plane(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Shape::new(1, 1, h, w), data)
    }

    pub fn from_f64(shape: Shape, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::narrow(v)).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.offset(n, c, y, x)]
    }

    /// The `h×w` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape, op)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub(crate) fn expect_shape(&self, shape: Shape, op: &'static str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape,
                right: shape,
            });
        }
        Ok(())
    }

    /// Sum accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.widen()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.sum_f64() / self.data.len() as f64
    }

    /// Population standard deviation accumulated in `f64`.
    pub fn std_f64(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let mean = self.mean_f64();
        let ss: f64 = self
            .data
            .iter()
            .map(|v| {
                let d = v.widen() - mean;
                d * d
            })
            .sum();
        (ss / self.data.len() as f64).sqrt()
    }

    pub fn min_max(&self) -> Option<(T, T)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reverses the width axis.
    pub fn hflip(&self) -> Self {
        let w = self.shape.w;
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(w.max(1)) {
            data.extend(row.iter().rev());
        }
        Tensor {
            shape: self.shape,
            data,
        }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::narrow(v.widen())).collect(),
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = first.shape;
        let mut c_total = 0;
        for p in parts {
            let s = p.shape;
            if s.n != base.n || s.h != base.h || s.w != base.w {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s,
                });
            }
            c_total += s.c;
        }
        let shape = Shape::new(base.n, c_total, base.h, base.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..base.n {
            for p in parts {
                let block = p.shape.c * p.shape.plane();
                data.extend_from_slice(&p.data[n * block..(n + 1) * block]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Splits along the channel axis into pieces with the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Result<Vec<Self>> {
        if counts.iter().sum::<usize>() != self.shape.c {
            return Err(Error::invalid(format!(
                "channel split {counts:?} does not cover shape {}",
                self.shape
            )));
        }
        let plane = self.shape.plane();
        let mut out: Vec<Vec<T>> = counts
            .iter()
            .map(|&c| Vec::with_capacity(self.shape.n * c * plane))
            .collect();
        for n in 0..self.shape.n {
            let mut c0 = 0;
            for (i, &c) in counts.iter().enumerate() {
                let start = (n * self.shape.c + c0) * plane;
                out[i].extend_from_slice(&self.data[start..start + c * plane]);
                c0 += c;
            }
        }
        Ok(out
            .into_iter()
            .zip(counts)
            .map(|(data, &c)| Tensor {
                shape: Shape::new(self.shape.n, c, self.shape.h, self.shape.w),
                data,
            })
            .collect())
    }
}

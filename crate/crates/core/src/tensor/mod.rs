//! Dense row-major tensors and the differentiable operator set.
//!
//! Every operator is a pure function with an explicit backward counterpart.
//! Feature maps use H×W×C layout: element `(y, x, c)` lives at
//! `(y * W + x) * C + c`.

mod activation;
mod conv;
pub mod gradcheck;
pub(crate) mod linalg;
mod norm;
mod resize;
mod spectral;

pub use activation::*;
pub use conv::*;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use linalg::{linear, linear_backward, matmul, LinearGrads};
pub use norm::*;
pub use resize::*;
pub use spectral::*;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panicking constructor for shapes known to be consistent.
    pub(crate) fn from_parts(shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(&[1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, (0..n).map(&mut f).collect())
    }

    /// Normal(0, std²) entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(H, W, C)` of a rank-3 feature map.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::InvalidShape(format!(
                "expected an H×W×C feature map, got {:?}",
                self.shape
            ))),
        }
    }

    /// `(rows, cols)` of a rank-2 matrix.
    pub fn rc(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape(format!(
                "expected a matrix, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> f64 {
        let (_, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self::from_parts(
            &self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::InvalidShape(format!(
                "shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `[start, end)` of a matrix, or of the leading axis in general.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::from_parts(&shape, self.data[start * inner..end * inner].to_vec())
    }

    /// Concatenate H×W×C maps along channels.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Self> {
        let (h, w, ca) = a.hwc()?;
        let (hb, wb, cb) = b.hwc()?;
        crate::error::expect_dim("height", h, hb)?;
        crate::error::expect_dim("width", w, wb)?;
        let mut out = Vec::with_capacity(h * w * (ca + cb));
        for p in 0..h * w {
            out.extend_from_slice(&a.data[p * ca..(p + 1) * ca]);
            out.extend_from_slice(&b.data[p * cb..(p + 1) * cb]);
        }
        Ok(Self::from_parts(&[h, w, ca + cb], out))
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> Result<(Self, Self)> {
        let (h, w, c) = self.hwc()?;
        if first == 0 || first >= c {
            return Err(Error::InvalidShape(format!(
                "cannot split {c} channels at {first}"
            )));
        }
        let second = c - first;
        let mut a = Vec::with_capacity(h * w * first);
        let mut b = Vec::with_capacity(h * w * second);
        for p in 0..h * w {
            a.extend_from_slice(&self.data[p * c..p * c + first]);
            b.extend_from_slice(&self.data[p * c + first..(p + 1) * c]);
        }
        Ok((
            Self::from_parts(&[h, w, first], a),
            Self::from_parts(&[h, w, second], b),
        ))
    }
}

/// Complex H×W×C grid stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    pub shape: [usize; 3],
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexGrid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            shape: [h, w, c],
            re: vec![0.0; h * w * c],
            im: vec![0.0; h * w * c],
        }
    }

    pub fn amplitude(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r.hypot(*i))
            .collect()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| i.atan2(*r))
            .collect()
    }

    pub fn sq_norm(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .sum()
    }
}

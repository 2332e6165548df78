//! Dense frames x channels x height x width value grid and the scalar trait
//! that selects the run-wide numeric precision.
//!
//! Precision is a global mode: gradient checks instantiate everything with
//! `f64`, training runs default to `f32`. The two are never mixed inside a
//! single run.

use crate::error::{Error, Result};
use num_traits::Float;

/// Floating-point element type for all tensors in a run.
pub trait Scalar:
    Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Dimensions of a [`Tensor4`]: (frames, channels, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims4 {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims4 {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Dims4 {
            frames,
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major flat offset of element (d, c, h, w).
    #[inline(always)]
    pub fn index(&self, d: usize, c: usize, h: usize, w: usize) -> usize {
        ((d * self.channels + c) * self.height + h) * self.width + w
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("all tensor dims must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.frames, self.channels, self.height, self.width
        )
    }
}

/// Dense row-major 4D tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<S> {
    dims: Dims4,
    data: Vec<S>,
}

impl<S: Scalar> Tensor4<S> {
    pub fn zeros(dims: Dims4) -> Self {
        Tensor4 {
            dims,
            data: vec![S::zero(); dims.len()],
        }
    }

    pub fn filled(dims: Dims4, value: S) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims4, data: Vec<S>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::Config(format!(
                "data length {} does not match dims {dims} ({})",
                data.len(),
                dims.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    /// Build from a generator over (d, c, h, w).
    pub fn from_fn(dims: Dims4, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for d in 0..dims.frames {
            for c in 0..dims.channels {
                for h in 0..dims.height {
                    for w in 0..dims.width {
                        data.push(f(d, c, h, w));
                    }
                }
            }
        }
        Tensor4 { dims, data }
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline(always)]
    pub fn at(&self, d: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.dims.index(d, c, h, w)]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, d: usize, c: usize, h: usize, w: usize) -> &mut S {
        let i = self.dims.index(d, c, h, w);
        &mut self.data[i]
    }

    /// Contiguous H*W slice for one (frame, channel) pair.
    pub fn slice(&self, d: usize, c: usize) -> &[S] {
        let start = self.dims.index(d, c, 0, 0);
        &self.data[start..start + self.dims.height * self.dims.width]
    }

    pub fn slice_mut(&mut self, d: usize, c: usize) -> &mut [S] {
        let start = self.dims.index(d, c, 0, 0);
        let len = self.dims.height * self.dims.width;
        &mut self.data[start..start + len]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise accumulate: self += other.
    pub fn add_assign(&mut self, other: &Tensor4<S>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn min_max(&self) -> (S, S) {
        let mut lo = S::infinity();
        let mut hi = S::neg_infinity();
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn validate_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Contract(format!("{what} contains non-finite values")))
        }
    }

    /// Lossy precision cast between run modes (used at IO boundaries only).
    pub fn cast<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }
}

/// A value tensor paired with its accumulated cotangent, used as the node
/// type of the recorded forward pass during backpropagation.
#[derive(Clone, Debug)]
pub struct GradPair<S> {
    pub value: Tensor4<S>,
    pub grad: Tensor4<S>,
}

impl<S: Scalar> GradPair<S> {
    pub fn new(value: Tensor4<S>) -> Self {
        let grad = Tensor4::zeros(value.dims());
        GradPair { value, grad }
    }

    pub fn dims(&self) -> Dims4 {
        self.value.dims()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_row_major() {
        let dims = Dims4::new(2, 3, 4, 5);
        assert_eq!(dims.index(0, 0, 0, 0), 0);
        assert_eq!(dims.index(0, 0, 0, 1), 1);
        assert_eq!(dims.index(0, 0, 1, 0), 5);
        assert_eq!(dims.index(0, 1, 0, 0), 20);
        assert_eq!(dims.index(1, 0, 0, 0), 60);
        assert_eq!(dims.index(1, 2, 3, 4), dims.len() - 1);
    }

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor4::<f64>::from_vec(Dims4::new(1, 1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(Tensor4::<f64>::from_vec(Dims4::new(1, 0, 2, 2), vec![]).is_err());
    }

    #[test]
    fn slice_matches_at() {
        let t = Tensor4::<f64>::from_fn(Dims4::new(2, 2, 3, 3), |d, c, h, w| {
            (d * 1000 + c * 100 + h * 10 + w) as f64
        });
        let s = t.slice(1, 1);
        assert_eq!(s.len(), 9);
        assert_eq!(s[4], t.at(1, 1, 1, 1));
    }
}

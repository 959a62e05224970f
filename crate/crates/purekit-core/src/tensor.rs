//! Flat float tensors: CHW images and named parameter arrays.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// One image: channel-planar row-major `f32` values, nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        ImageTensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::DataLength { expected: c * h * w, actual: data.len() });
        }
        Ok(ImageTensor { c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Clamp every value into [lo, hi] in place.
    pub fn clamp_in_place(&mut self, lo: f32, hi: f32) {
        for v in self.data.iter_mut() {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    /// Error unless `other` matches this image's shape.
    pub fn check_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch { expected: self.shape(), actual: other.shape() })
        }
    }
}

/// Euclidean distance between two equal-shape images.
pub fn l2_distance(a: &ImageTensor, b: &ImageTensor) -> f32 {
    debug_assert_eq!(a.shape(), b.shape());
    let mut acc = 0.0f32;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = x - y;
        acc += d * d;
    }
    libm::sqrtf(acc)
}

/// Largest absolute componentwise difference.
pub fn linf_distance(a: &ImageTensor, b: &ImageTensor) -> f32 {
    debug_assert_eq!(a.shape(), b.shape());
    let mut acc = 0.0f32;
    for (x, y) in a.data.iter().zip(&b.data) {
        acc = acc.max(libm::fabsf(x - y));
    }
    acc
}

/// A named parameter array of arbitrary rank, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::DataLength { expected: n, actual: data.len() });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// A tensor with a stable name, the unit of checkpoint serialization and of
/// network parameter bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: alloc::string::String,
    pub tensor: Tensor,
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = ImageTensor::from_vec(3, 2, 2, vec![0.0; 11]).unwrap_err();
        assert_eq!(err, Error::DataLength { expected: 12, actual: 11 });
        assert!(ImageTensor::from_vec(3, 2, 2, vec![0.0; 12]).is_ok());
    }

    #[test]
    fn distances_on_known_vectors() {
        let a = ImageTensor::from_vec(1, 1, 2, vec![0.0, 0.0]).unwrap();
        let b = ImageTensor::from_vec(1, 1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(l2_distance(&a, &b), 5.0);
        assert_eq!(linf_distance(&a, &b), 4.0);
        assert_eq!(l2_distance(&a, &a), 0.0);
    }

    #[test]
    fn clamp_bounds_everything() {
        let mut t = ImageTensor::from_vec(1, 1, 4, vec![-1.0, 0.25, 0.5, 2.0]).unwrap();
        t.clamp_in_place(0.0, 1.0);
        assert_eq!(t.data, vec![0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn finiteness_check_catches_nan() {
        let mut t = ImageTensor::zeros(1, 2, 2);
        assert!(t.is_finite());
        t.data[3] = f32::NAN;
        assert!(!t.is_finite());
    }
}

//! Dense row-major tensors.
//!
//! The one value type every layer works with: a shape plus a contiguous
//! scalar buffer. Rank is capped at 5 (batch, channel, up to three spatial
//! axes). Operations live in [`ops`]; reverse-mode differentiation over them
//! in [`tape`].

pub mod ops;
pub mod tape;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use std::fmt;

pub const MAX_RANK: usize = 5;

/// Ordered list of positive extents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::InvalidArgument(format!(
                "shape rank must be 1..={MAX_RANK}, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "shape extents must be >= 1, got {dims:?}"
            )));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.rank()];
        for i in (0..self.rank().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.0[i + 1];
        }
        s
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Dense N-dimensional array. Immutable once produced by an operation;
/// in-place mutation is reserved for exclusively owned buffers (parameter
/// updates in the trainer).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            data: vec![T::ZERO; n],
        })
    }

    pub fn filled(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            data: vec![value; n],
        })
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{} elements for {shape}", shape.numel()),
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::from_vec"));
        }
        Ok(Tensor { shape, data })
    }

    /// Fan-in scaled uniform values in (-sqrt(3/fan_in), sqrt(3/fan_in)),
    /// which preserves unit variance under a dense fan-in.
    pub fn uniform_init(dims: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Result<Self> {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel())
            .map(|_| T::from_f64(rng.uniform(-bound, bound)))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape(vec![1]),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// True scalar: exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on non-scalar tensor {}", self.shape);
        self.data[0]
    }

    pub fn reshaped(&self, dims: &[usize]) -> Result<Tensor<T>> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.numel()),
                format!("{shape}"),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            Err(Error::NonFinite(context))
        } else {
            Ok(())
        }
    }

    /// Convert element type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

impl<T: Scalar> fmt::Display for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} x{}", self.shape, T::DTYPE.tag())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_extent_and_excess_rank() {
        assert!(Shape::new(&[3, 0]).is_err());
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[1, 1, 1, 1, 1, 1]).is_err());
        assert!(Shape::new(&[2, 3, 4, 5, 6]).is_ok());
    }

    #[test]
    fn strides_are_row_major() {
        let s = Shape::new(&[2, 3, 4]).unwrap();
        assert_eq!(s.strides(), vec![12, 4, 1]);
        assert_eq!(s.numel(), 24);
    }

    #[test]
    fn from_vec_checks_length_and_finiteness() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2], vec![1.0, f32::INFINITY]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.numel(), 4);
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = SplitMix64::new(5);
        let t = Tensor::<f32>::uniform_init(&[64, 16], 16, &mut rng).unwrap();
        let bound = (3.0f32 / 16.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
        // seeded: same seed, same tensor
        let mut rng2 = SplitMix64::new(5);
        let t2 = Tensor::<f32>::uniform_init(&[64, 16], 16, &mut rng2).unwrap();
        assert_eq!(t, t2);
    }
}

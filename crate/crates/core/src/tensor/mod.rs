//! Dense row-major tensors and a reverse-mode tape with hand-written adjoints.
//!
//! Storage is a shared immutable buffer: [`Tensor::reshape`] is the only view,
//! every other operation allocates a fresh buffer. All sums are serial and run
//! in ascending flat-index order (matrix products use `matrixmultiply`'s fixed
//! single-threaded blocking), so identical inputs give bit-identical outputs.

mod gradcheck;
mod io;
pub mod kernels;
mod tape;

use std::sync::Arc;

use crate::error::{Error, Result};

pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use io::{read_vsft, read_vsft_file, write_vsft, write_vsft_file, VSFT_MAGIC};
pub use tape::{Gradients, Roi, ShiftBias, Tape, Var};

/// Dense N-dimensional array of `f64` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("rank must be at least 1".into()));
    }
    if let Some(i) = shape.iter().position(|&e| e == 0) {
        return Err(Error::Shape(format!("extent {i} of {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor, validating extents, element count and finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor construction (element {i})")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernel outputs; shape is trusted.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("invalid shape");
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = check_shape(shape).expect("invalid shape");
        Self::from_parts(shape.to_vec(), (0..n).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same buffer under new shape metadata.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        let n = check_shape(new_shape)?;
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {new_shape:?} ({n} elements)",
                self.shape,
                self.numel()
            )));
        }
        Ok(Self {
            shape: new_shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn shares_buffer_with(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Row-major flat index of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.rank());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &e)| {
                assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
                acc * e + i
            })
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_round_trip_is_lossless() {
        let t = Tensor::from_fn(&[6, 2, 4, 4], |i| i as f64 * 0.25 - 3.0);
        let v = t.reshape(&[2, 2, 4, 4, 3]).unwrap();
        let back = v.reshape(&[6, 2, 4, 4]).unwrap();
        assert_eq!(back, t);
        assert!(back.shares_buffer_with(&t));
        let bits: Vec<u64> = back.data().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig);
    }

    #[test]
    fn reshape_singleton() {
        let t = Tensor::new(&[1], vec![4.5]).unwrap();
        let r = t.reshape(&[1, 1, 1]).unwrap();
        assert_eq!(r.shape(), &[1, 1, 1]);
        assert_eq!(r.data(), &[4.5]);
    }

    #[test]
    fn reshape_count_mismatch_is_an_error() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(matches!(t.reshape(&[4, 2]), Err(Error::Shape(_))));
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(&[2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }
}

//! Dense row-major tensor value type.
//!
//! Tensors are immutable once produced by an operation; cloning shares the
//! underlying buffer. The optional `grad` buffer is filled in by the trainer
//! after a backward pass and never aliases `data`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from raw parts, checking the shape/data contract.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![T::ZERO; numel]).expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("full: valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(&[1], vec![value]).expect("scalar")
    }

    /// He-style fan-in uniform init on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
    pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel)
            .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
            .collect();
        Tensor::from_vec(shape, data).expect("he_uniform: valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Shares the buffer but reinterprets the shape; element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Installs a gradient computed elsewhere; shape must match exactly.
    pub fn set_grad(&mut self, grad: Vec<T>) {
        assert_eq!(grad.len(), self.data.len(), "grad shape mismatch");
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Replaces the value buffer (optimizer update). Breaks sharing.
    pub fn set_data(&mut self, data: Vec<T>) {
        assert_eq!(data.len(), self.data.len(), "data length mismatch");
        self.data = Arc::new(data);
    }

    /// Debug-build invariant: finite values everywhere.
    pub fn debug_check_finite(&self, op: &str) {
        if cfg!(debug_assertions) {
            for (i, v) in self.data.iter().enumerate() {
                assert!(
                    v.is_finite(),
                    "non-finite value {v:?} at index {i} after {op}"
                );
            }
        }
    }

    /// Casts elementwise through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data.iter().map(|v| U::from_f64(v.to_f64())).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}

/// Integer mask over a volume, class values in `{0, 1, 2}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    shape: [usize; 3],
    data: Vec<u8>,
}

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_TZ: u8 = 1;
pub const CLASS_PZ: u8 = 2;
pub const NUM_CLASSES: usize = 3;

impl LabelVolume {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let numel = shape[0] * shape[1] * shape[2];
        if numel != data.len() {
            return Err(Error::Shape {
                op: "label_volume",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::data(format!(
                "label {bad} out of range (expected 0..{NUM_CLASSES})"
            )));
        }
        Ok(LabelVolume { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        LabelVolume {
            shape,
            data: vec![0; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn slices(&self) -> usize {
        self.shape[0]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, s: usize, y: usize, x: usize) -> u8 {
        self.data[(s * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn set(&mut self, s: usize, y: usize, x: usize, v: u8) {
        self.data[(s * self.shape[1] + y) * self.shape[2] + x] = v;
    }

    /// Extracts the sub-volume covering `slice_range` (end exclusive).
    pub fn slice_range(&self, start: usize, end: usize) -> LabelVolume {
        assert!(start < end && end <= self.shape[0]);
        let per = self.shape[1] * self.shape[2];
        LabelVolume {
            shape: [end - start, self.shape[1], self.shape[2]],
            data: self.data[start * per..end * per].to_vec(),
        }
    }

    pub fn count_class(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_product() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn reshape_shares_data() {
        let t = Tensor::<f64>::from_vec(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn labels_reject_out_of_range() {
        assert!(LabelVolume::new([1, 1, 2], vec![0, 2]).is_ok());
        assert!(LabelVolume::new([1, 1, 2], vec![0, 3]).is_err());
    }
}

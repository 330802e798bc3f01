//! Dense row-major tensors with a runtime precision tag.
//!
//! Values are held in `f64` storage. A tensor tagged [`DType::F32`] keeps
//! every stored value rounded to the nearest `f32`, so kernels that build
//! their outputs through [`Tensor::new`] observe single-precision results.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, ApnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({:?}, {:?}, ", self.dtype, self.dims)?;
        if self.data.len() <= 16 {
            write!(f, "{:?})", self.data)
        } else {
            write!(f, "{:?}...)", &self.data[..16])
        }
    }
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(shape_err!("tensor dims must be non-empty"));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(shape_err!("tensor dims must be >= 1, got {dims:?}"));
    }
    Ok(dims.iter().product())
}

impl Tensor {
    pub fn new(dims: &[usize], mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        let n = check_dims(dims)?;
        if n != data.len() {
            return Err(shape_err!(
                "dims {dims:?} require {n} values, got {}",
                data.len()
            ));
        }
        if dtype == DType::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        Ok(Tensor { dims: dims.to_vec(), data, dtype })
    }

    pub fn from_f64(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(dims, data, DType::F64)
    }

    pub fn from_f32(dims: &[usize], data: &[f32]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f64).collect(), DType::F32)
    }

    pub fn full(dims: &[usize], value: f64, dtype: DType) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims, vec![value; n], dtype)
    }

    pub fn zeros(dims: &[usize], dtype: DType) -> Result<Self> {
        Self::full(dims, 0.0, dtype)
    }

    pub fn scalar(v: f64, dtype: DType) -> Self {
        Tensor { dims: vec![1], data: vec![dtype.round(v)], dtype }
    }

    pub fn identity(n: usize, dtype: DType) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(&[n, n], data, dtype)
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, dtype: DType, rng: &mut R) -> Result<Self> {
        let n = check_dims(dims)?;
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(dims, data, dtype)
    }

    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], lo: f64, hi: f64, dtype: DType, rng: &mut R) -> Result<Self> {
        let n = check_dims(dims)?;
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::new(dims, data, dtype)
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to raw values. Callers are responsible for keeping
    /// F32-tagged values representable; [`Tensor::normalize_precision`]
    /// restores the invariant.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn normalize_precision(&mut self) {
        if self.dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        let mut t = Tensor { dims: self.dims.clone(), data: self.data.clone(), dtype };
        t.normalize_precision();
        t
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let n = check_dims(dims)?;
        if n != self.len() {
            return Err(shape_err!("cannot reshape {:?} to {dims:?}", self.dims));
        }
        Ok(Tensor { dims: dims.to_vec(), data: self.data.clone(), dtype: self.dtype })
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(ApnError::Usage(format!("item() on tensor with dims {:?}", self.dims)));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let mut t = Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            dtype: self.dtype,
        };
        t.normalize_precision();
        t
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(shape_err!("elementwise dims {:?} vs {:?}", self.dims, other.dims));
        }
        let mut t = Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            dtype: self.dtype,
        };
        t.normalize_precision();
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!("axpy dims {:?} vs {:?}", self.dims, other.dims));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        self.normalize_precision();
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rows of a rank-2 tensor as slices.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.dims.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self.dtype == other.dtype
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dims() {
        assert!(Tensor::from_f64(&[], vec![]).is_err());
        assert!(Tensor::from_f64(&[2, 0], vec![]).is_err());
        assert!(Tensor::from_f64(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn f32_tag_rounds_values() {
        let t = Tensor::new(&[1], vec![0.1], DType::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
        let t = Tensor::new(&[1], vec![0.1], DType::F64).unwrap();
        assert_eq!(t.data()[0], 0.1);
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::from_f64(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4]).is_err());
    }
}

//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major value type (rank 0, 1 or 2 in practice).
//! Differentiable computation happens on a per-step [`Tape`]: leaves are bound
//! with [`Tape::leaf`] / [`Tape::param`], operations record backward rules,
//! and [`Tape::backward`] fills gradients for every bound parameter. The tape
//! is discarded after the step; gradients accumulate additively across
//! fan-out, so callers zero or rebuild between steps.

mod check;
mod io;
mod tape;

pub use check::grad_check;
pub use io::{read_uft1, write_uft1, UFT1_MAGIC};
pub use tape::{Tape, Val};

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
///
/// Invariants: `data.len() == product(shape)` and every stored value is
/// finite. Constructors and file I/O enforce both.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{numel} values for shape {shape:?}"),
                data.len(),
            ));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor")?;
        Ok(t)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a rank-2 tensor; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.rank() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Length of the last axis (columns for rank 2, length for rank 1).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::shape("scalar_value", "scalar", format!("{:?}", self.shape)))
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Max absolute entry; 0 for an empty tensor.
    pub fn linf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Elementwise clamp to [-bound, bound].
    pub fn clamped(&self, bound: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.clamp(-bound, bound)).collect(),
        }
    }

    /// Elementwise sum with a same-shape tensor.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "tensor add",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::from_vec(self.shape.clone(), data)
    }

    /// Order-dependent FNV-1a hash over the raw bit patterns, including shape.
    /// Used by tests to assert that parameters were not mutated.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u64| {
            for byte in b.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(self.shape.len() as u64);
        for &d in &self.shape {
            eat(d as u64);
        }
        for &v in &self.data {
            eat(v.to_bits());
        }
        h
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn non_finite_values_rejected() {
        assert!(Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn scalar_shape_is_rank_zero() {
        let s = Tensor::scalar(2.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.scalar_value().unwrap(), 2.5);
    }

    #[test]
    fn checksum_tracks_bit_changes() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.data_mut()[1] = f64::from_bits(2.0_f64.to_bits() + 1);
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn clamp_bounds_linf() {
        let t = Tensor::vector(vec![-0.5, 0.01, 0.2]);
        let c = t.clamped(0.03);
        assert_eq!(c.data(), &[-0.03, 0.01, 0.03]);
        assert!(c.linf() <= 0.03);
    }
}

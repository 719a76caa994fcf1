// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense fp32 tensors (rank ≤ 3) and a reverse-mode tape over them.
//!
//! [`Tensor`] is a plain value: a shape plus row-major data. Differentiation
//! happens on a [`Tape`], which records every operation applied to its
//! [`Var`] handles and replays them backwards in [`Tape::backward`]. A fresh
//! tape is built for every forward pass.

mod kernels;
mod tape;

pub use kernels::gemm;
pub use tape::{Gradients, NodeId, Tape, Var};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Maximum supported rank.
pub const MAX_RANK: usize = 3;

/// Row-major fp32 tensor of rank 0 to 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::Shape {
                op: "tensor rank",
                lhs: shape.to_vec(),
                rhs: vec![MAX_RANK],
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor data length",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} > {MAX_RANK}", shape.len());
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.sample::<f32, _>(StandardNormal) * std;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.last_dim();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn get2(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the column range `[start, end)` of the last axis.
    pub fn slice_last(&self, start: usize, end: usize) -> Result<Self> {
        let cols = self.last_dim();
        if start > end || end > cols {
            return Err(Error::Range {
                start,
                end,
                extent: cols,
            });
        }
        let rows = self.data.len() / cols.max(1);
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * cols + start..r * cols + end]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") = width;
        Self::new(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
        assert!(Tensor::new(&[1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn slice_last_bounds() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.slice_last(1, 3).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
        assert!(matches!(t.slice_last(2, 4), Err(Error::Range { .. })));
    }
}

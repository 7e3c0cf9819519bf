//! Dense 4-D `f32` tensors in `(batch, channels, height, width)` order.
//!
//! Data is stored row-major (`w` fastest), which makes a `(B, C, H, W)`
//! activation reinterpretable as `(B, C*H*W, 1, 1)` without copying — the
//! layout contract the flatten layer and the feature codec rely on.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
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

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Flat index of `(b, c, h, w)`.
    #[inline]
    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.offset(b, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, h: usize, w: usize) -> &mut f32 {
        let i = self.offset(b, c, h, w);
        &mut self.data[i]
    }

    /// Reinterprets the tensor with a new shape of identical element count.
    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor { shape, data: self.data })
    }

    /// Copies the single sample `b` into a fresh batch-1 tensor.
    pub fn sample(&self, b: usize) -> Result<Self> {
        if b >= self.shape[0] {
            return Err(Error::invalid(format!(
                "sample index {b} out of range for batch {}",
                self.shape[0]
            )));
        }
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        let data = self.data[b * per..(b + 1) * per].to_vec();
        Ok(Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

//! Labeled image datasets held in memory.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A set of labeled samples stored as one `(N, C, H, W)` tensor.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::invalid("dataset needs at least 2 classes"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Single-sample shape `(channels, height, width)`.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let [_, c, h, w] = self.images.shape();
        (c, h, w)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the samples at `indices` into a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch requested"));
        }
        let [_, c, h, w] = self.images.shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::from_vec([indices.len(), c, h, w], data)?, labels))
    }

    /// Copies sample `i` as a batch-1 tensor.
    pub fn sample(&self, i: usize) -> Result<Tensor> {
        self.images.sample(i)
    }
}

/// Train/test split of one dataset.
#[derive(Clone, Debug)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let images = Tensor::from_vec([3, 1, 1, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        Dataset::new(images, vec![0, 1, 0], 2).unwrap()
    }

    #[test]
    fn gather_preserves_order_and_labels() {
        let d = toy();
        let (batch, labels) = d.gather(&[2, 0]).unwrap();
        assert_eq!(batch.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(labels, vec![0, 0]);
        assert!(d.gather(&[3]).is_err());
        assert!(d.gather(&[]).is_err());
    }

    #[test]
    fn constructor_validates() {
        let images = Tensor::zeros([2, 1, 1, 1]);
        assert!(Dataset::new(images.clone(), vec![0], 2).is_err());
        assert!(Dataset::new(images.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(images, vec![0, 1], 2).is_ok());
    }
}

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// In-memory images (`[C, H, W]` each) with their binary label vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<Vec<u8>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Vec<Tensor<T>>, labels: Vec<Vec<u8>>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} label rows",
                images.len(),
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    /// Stacks the selected samples into a `[B, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<Vec<u8>>)> {
        let imgs: Vec<&Tensor<T>> = indices.iter().map(|&i| &self.images[i]).collect();
        let labels = indices.iter().map(|&i| self.labels[i].clone()).collect();
        Ok((Tensor::stack(&imgs)?, labels))
    }

    /// Leading `n` samples (all of them if fewer).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

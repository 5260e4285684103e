//! Dataset loaders, checkpoints and image/tensor export.

mod checkpoint;
mod cifar;
mod export;
mod idx;
mod synthetic;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use cifar::{load_cifar10, write_cifar10, CIFAR_RECORD};
pub use export::{export_pgm, load_tensor, pgm_bytes, save_tensor};
pub use idx::{load_idx, parse_idx, write_idx};
pub use synthetic::{synthetic_dataset, SyntheticKind};

/// Images `[n, c, h, w]` in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(invalid(format!(
                "dataset needs [n, c, h, w] images and n labels, got {:?} and {}",
                images.shape(),
                labels.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("dataset pixels must lie in [0, 1]"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Rows `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(invalid(format!("slice {start}..{end} out of range for {} samples", self.len())));
        }
        let per = self.images.len() / self.len().max(1);
        let mut shape = self.images.shape().to_vec();
        shape[0] = end - start;
        Ok(Self {
            images: Tensor::new(shape, self.images.data()[start * per..end * per].to_vec())?,
            labels: self.labels[start..end].to_vec(),
            classes: self.classes,
            name: self.name.clone(),
        })
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.images.len() / self.len().max(1);
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(invalid(format!("sample {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(shape, data)?, labels))
    }
}

/// Pixel byte to `[0, 1]`.
pub(crate) fn byte_to_unit(b: u8) -> f64 {
    f64::from(b) / 255.0
}

/// `[0, 1]` to the nearest byte, halves rounded up.
pub(crate) fn unit_to_byte(v: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(invalid(format!("pixel value {v} outside [0, 1]")));
    }
    Ok((v * 255.0 + 0.5).floor() as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_rules() {
        assert_eq!(byte_to_unit(255), 1.0);
        assert_eq!(unit_to_byte(0.5).unwrap(), 128);
        assert_eq!(unit_to_byte(1.0).unwrap(), 255);
        assert!(unit_to_byte(1.01).is_err());
        for b in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(b)).unwrap(), b);
        }
    }

    #[test]
    fn slicing_and_batching() {
        let images = Tensor::new([3, 1, 1, 2], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let d = Dataset::new(images, vec![0, 1, 2], 3, "t").unwrap();
        let s = d.slice(1, 3).unwrap();
        assert_eq!(s.labels, vec![1, 2]);
        assert_eq!(s.images.data(), &[0.2, 0.3, 0.4, 0.5]);
        let (x, y) = d.batch(&[2, 0]).unwrap();
        assert_eq!(x.data(), &[0.4, 0.5, 0.0, 0.1]);
        assert_eq!(y, vec![2, 0]);
        assert!(Dataset::new(Tensor::zeros([2, 1, 1, 1]), vec![0], 1, "bad").is_err());
    }
}

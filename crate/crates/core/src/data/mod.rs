//! Labelled image collections, IDX ingestion and the synthetic grating set.

mod idx;
mod synth;

pub use idx::{load_idx, read_idx_images, read_idx_labels, save_idx};
pub use synth::{synth_dataset, synth_split, SynthConfig};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Eval,
}

/// `[m, h, w, c]` images in `[0, 1]` with labels in `[0, n_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::InvalidArgument(format!(
                "dataset images must be [m, h, w, c], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::IdxCountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(Error::LabelRange {
                label,
                index,
                n_classes,
            });
        }
        if let Some(&bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::PixelRange(bad));
        }
        Ok(Dataset {
            images,
            labels,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `[h, w, c]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image_data(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// The `i`-th image as an `[h, w, c]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        Tensor::from_parts(self.image_shape().to_vec(), self.image_data(i).to_vec())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for a dataset of {}",
                self.len()
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image_data(i));
        }
        let [h, w, c] = self.image_shape();
        Ok(Dataset {
            images: Tensor::from_parts(vec![indices.len(), h, w, c], data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            split: self.split,
        })
    }

    /// `n` distinct images chosen uniformly by `seed`, in ascending index order.
    /// Asking for at least the whole set returns it unchanged.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, self.len(), n).into_vec();
        picked.sort_unstable();
        self.subset(&picked).expect("sampled indices are in range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = Tensor::new(vec![4, 1, 2, 1], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]).unwrap();
        Dataset::new(images, vec![0, 1, 0, 1], 2, Split::Test).unwrap()
    }

    #[test]
    fn rejects_bad_labels_and_pixels() {
        let images = Tensor::zeros(vec![2, 1, 1, 1]);
        assert!(matches!(
            Dataset::new(images.clone(), vec![0, 5], 2, Split::Train),
            Err(Error::LabelRange { label: 5, index: 1, .. })
        ));
        assert!(matches!(
            Dataset::new(images, vec![0], 2, Split::Train),
            Err(Error::IdxCountMismatch { .. })
        ));
        let bright = Tensor::full(vec![1, 1, 1, 1], 1.5);
        assert!(matches!(
            Dataset::new(bright, vec![0], 2, Split::Train),
            Err(Error::PixelRange(_))
        ));
    }

    #[test]
    fn sampling_is_seeded_and_distinct() {
        let d = tiny();
        let a = d.sample(2, 9);
        assert_eq!(a, d.sample(2, 9));
        assert_eq!(a.len(), 2);
        assert_ne!(a.image_data(0), a.image_data(1));
        assert_eq!(d.sample(10, 0), d);
    }

    #[test]
    fn image_accessor_slices_rows() {
        let d = tiny();
        assert_eq!(d.image(2).data(), &[0.4, 0.5]);
        assert_eq!(d.image(2).shape(), &[1, 2, 1]);
    }
}

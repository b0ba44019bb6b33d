//! Labeled image collections and the rectangles marking their planted objects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn square(row: usize, col: usize, size: usize) -> Self {
        Region { row, col, height: size, width: size }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row && row < self.row + self.height && col >= self.col && col < self.col + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// True when the rectangle lies inside an `h x w` grid.
    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.height > 0 && self.width > 0 && self.row + self.height <= h && self.col + self.width <= w
    }
}

/// Images with class labels and, for positives, the planted object's region.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub regions: Vec<Option<Region>>,
}

impl LabeledDataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, regions: Vec<Option<Region>>) -> Result<Self> {
        if images.len() != labels.len() || images.len() != regions.len() {
            return Err(Error::invalid(format!(
                "dataset columns disagree: {} images, {} labels, {} regions",
                images.len(),
                labels.len(),
                regions.len()
            )));
        }
        if let Some(first) = images.first() {
            if let Some(i) = images.iter().position(|im| im.shape() != first.shape()) {
                return Err(Error::shape(format!(
                    "image {i} has shape {:?}, expected {:?}",
                    images[i].shape(),
                    first.shape()
                )));
            }
        }
        Ok(LabeledDataset { images, labels, regions })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(Tensor::shape)
    }

    /// Splits into the first `n_first` samples and the rest.
    pub fn split_at(&self, n_first: usize) -> Result<(LabeledDataset, LabeledDataset)> {
        if n_first > self.len() {
            return Err(Error::invalid(format!("cannot take {n_first} of {} samples", self.len())));
        }
        let part = |range: std::ops::Range<usize>| LabeledDataset {
            images: self.images[range.clone()].to_vec(),
            labels: self.labels[range.clone()].to_vec(),
            regions: self.regions[range].to_vec(),
        };
        Ok((part(0..n_first), part(n_first..self.len())))
    }

    /// Same images with labels replaced.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<LabeledDataset> {
        LabeledDataset::new(self.images.clone(), labels, self.regions.clone())
    }

    /// Stacks all images into one `N x C x H x W` tensor.
    pub fn stacked_images(&self) -> Result<Tensor> {
        let shape = self.image_shape().ok_or_else(|| Error::Empty("dataset has no images".into()))?;
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        let data = self.images.iter().flat_map(|im| im.data().iter().copied()).collect();
        Tensor::new(full, data)
    }

    /// Inverse of [`stacked_images`](Self::stacked_images).
    pub fn unstack(stacked: &Tensor) -> Result<Vec<Tensor>> {
        if stacked.ndim() < 2 {
            return Err(Error::shape(format!("expected a stacked N x ... tensor, got {:?}", stacked.shape())));
        }
        let inner = stacked.shape()[1..].to_vec();
        let per: usize = inner.iter().product();
        stacked.data().chunks_exact(per).map(|c| Tensor::new(inner.clone(), c.to_vec())).collect()
    }
}

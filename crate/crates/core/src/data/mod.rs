//! Samples, synthetic lesion datasets, image-directory ingestion and
//! train/test partitioning.

mod io;
mod split;
mod synth;

pub use io::{
    export_dataset, load_dataset_dir, load_image_dir, resample_bilinear, resample_nearest, save_gray_png,
};
pub use split::{kfold, kfold_indices, split, split_indices, SplitSpec};
pub use synth::{generate_synthetic, DatasetStats, SyntheticConfig};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An image `[C,H,W]` with values in `[0,1]` and its binary mask `[1,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
    pub id: String,
}

impl<T: Scalar> Sample<T> {
    pub fn new(image: Tensor<T>, mask: Tensor<T>, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let (ishape, mshape) = (image.shape(), mask.shape());
        if ishape.len() != 3 || mshape.len() != 3 || mshape[0] != 1 || ishape[1..] != mshape[1..] {
            return Err(Error::shape(
                "sample",
                format!("{id}: image {ishape:?} and mask {mshape:?} are not aligned [C,H,W]/[1,H,W]"),
            ));
        }
        if mask.data().iter().any(|v| *v != T::zero() && *v != T::one()) {
            return Err(Error::InvalidArgument(format!("{id}: mask is not binary")));
        }
        Ok(Sample { image, mask, id })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.mask.data().iter().filter(|v| **v == T::one()).count();
        fg as f64 / self.mask.len() as f64
    }
}

/// Stacks samples into `([N,C,H,W], [N,1,H,W])`.
pub fn stack<T: Scalar>(samples: &[&Sample<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack an empty batch".into()))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut images = Vec::with_capacity(samples.len() * c * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::shape(
                "stack",
                format!("{} has shape {:?}, {} has {:?}", s.id, s.image.shape(), first.id, first.image.shape()),
            ));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    let n = samples.len();
    Ok((Tensor::new(vec![n, c, h, w], images)?, Tensor::new(vec![n, 1, h, w], masks)?))
}

//! Samples, label maps, synthetic phantoms, preprocessing and on-disk datasets.

mod batch;
mod dataset;
mod mask;
pub mod netpbm;
mod phantom;
mod preprocess;

pub use batch::make_batches;
pub use dataset::{load_dataset, read_manifest, split_of, write_dataset, Dataset, Split};
pub use mask::{decode_mask, encode_mask, LabelMap};
pub use netpbm::{overlay, GrayImage, RgbImage};
pub use phantom::{generate_phantom, generate_phantom_raw, PhantomSpec, RawPhantom};
pub use preprocess::{preprocess, resize_bilinear, resize_mask_nearest};

use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;

/// Segmentation classes in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Class {
    Background = 0,
    Kidney = 1,
    Tumor = 2,
}

impl Class {
    pub fn id(self) -> usize {
        self as usize
    }
}

/// A normalised grayscale image with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1,H,W]`, values in `[0,1]`.
    pub image: Tensor,
    pub mask: LabelMap,
}

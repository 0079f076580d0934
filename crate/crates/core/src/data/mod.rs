//! Synthetic multi-label shape images with tight ground-truth boxes, plus
//! manifest and image I/O.

mod batch;
mod manifest;
mod ppm;
mod synth;

pub use batch::epoch_batches;
pub use manifest::{dataset_digest, load_manifest, save_manifest, MANIFEST_FILE};
pub use ppm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use synth::{generate, rasterize, DatasetSpec, ShapeKind};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Inclusive pixel box `(r0, c0)..=(r1, c1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl PixelBox {
    pub fn new(r0: usize, c0: usize, r1: usize, c1: usize) -> Self {
        debug_assert!(r0 <= r1 && c0 <= c1);
        PixelBox { r0, c0, r1, c1 }
    }

    pub fn height(&self) -> usize {
        self.r1 - self.r0 + 1
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0 + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..=self.r1).contains(&r) && (self.c0..=self.c1).contains(&c)
    }
}

/// A labelled object: class index and its tight pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GtBox {
    pub class: usize,
    pub bbox: PixelBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: Vec<u8>,
    pub boxes: Vec<GtBox>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn positive_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &l)| l == 1).map(|(j, _)| j)
    }

    pub fn boxes_of(&self, class: usize) -> impl Iterator<Item = PixelBox> + '_ {
        self.boxes.iter().filter(move |b| b.class == class).map(|b| b.bbox)
    }
}

//! Dataset manifests, object-centred cropping, augmentation, annotation
//! decoding and synthetic fixtures.

mod dataset;
pub mod fixtures;
pub mod io;
pub mod manifest;
pub mod transform;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::SegmentationMap;

pub use dataset::{collate, load_sample, load_samples, sample_rng, stack_images, Batch, Sample};
pub use fixtures::{generate_synthetic_fixture, render_fixture, Fixture, Scene};
pub use io::{encode_mask, image_to_tensor, mask_to_png, read_mask, read_rgb, write_mask, write_rgb};
pub use manifest::{DatasetManifest, Normalization, SampleRecord, Split};
pub use transform::{
    apply_augmentation, apply_crop, augment, crop_object_centered, plan_crop, AugmentDraw, AugmentationConfig,
    CropWindow,
};

pub use image::RgbImage;

/// Axis-aligned box in pixels with exclusive maxima.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Argument(format!("degenerate bounding box {self}")));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    /// Integer centre, rounded down.
    pub fn center(&self) -> (usize, usize) {
        ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.x_max <= width && self.y_max <= height
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

impl TryFrom<[usize; 4]> for BBox {
    type Error = String;

    fn try_from(v: [usize; 4]) -> std::result::Result<Self, String> {
        BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// Tight box around pixels whose class is in `object_classes`.
pub fn compute_bbox(mask: &SegmentationMap, object_classes: &[u8]) -> Result<BBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if object_classes.contains(&mask.get(x, y)) {
                let b = bounds.get_or_insert((x, y, x, y));
                b.0 = b.0.min(x);
                b.1 = b.1.min(y);
                b.2 = b.2.max(x);
                b.3 = b.3.max(y);
            }
        }
    }
    let (x0, y0, x1, y1) = bounds.ok_or(Error::EmptyObject)?;
    BBox::new(x0, y0, x1 + 1, y1 + 1)
}

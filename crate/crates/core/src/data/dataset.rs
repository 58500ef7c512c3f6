use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::io::{image_to_tensor, read_mask, read_rgb};
use super::manifest::{DatasetManifest, Normalization};
use super::transform::{plan_crop, apply_crop, CropWindow};
use super::{compute_bbox, RgbImage};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::types::{SegmentationMap, OBJECT_CLASSES};

/// A cropped image/annotation pair ready for augmentation or inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: SegmentationMap,
    pub window: CropWindow,
}

/// Loads record `index` and applies the object-centred crop. The box is
/// taken from the record, or derived from the annotation when absent.
pub fn load_sample(manifest: &DatasetManifest, index: usize, window: usize) -> Result<Sample> {
    let record = manifest
        .records
        .get(index)
        .ok_or_else(|| Error::Argument(format!("record {index} out of range")))?;
    let image = read_rgb(&manifest.resolve(&record.image_path))?;
    let mask = read_mask(&manifest.resolve(&record.mask_path))?;
    if (image.width() as usize, image.height() as usize) != (mask.width(), mask.height()) {
        return Err(shape_err!(
            "{}: image is {}x{} but its mask is {}x{}",
            record.image_path.display(),
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        ));
    }
    let bbox = match record.bbox {
        Some(b) => b,
        None => compute_bbox(&mask, &OBJECT_CLASSES)?,
    };
    if !bbox.fits_within(mask.width(), mask.height()) {
        return Err(Error::Manifest(format!(
            "record {index}: bounding box {bbox} exceeds the {}x{} image",
            mask.width(),
            mask.height()
        )));
    }
    let w = plan_crop(mask.width(), mask.height(), bbox, window)?;
    let (image, mask) = apply_crop(&image, &mask, &w)?;
    Ok(Sample { image, mask, window: w })
}

pub fn load_samples(manifest: &DatasetManifest, window: usize) -> Result<Vec<Sample>> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "manifest rooted at {} has no records",
            manifest.root.display()
        )));
    }
    (0..manifest.len()).map(|i| load_sample(manifest, i, window)).collect()
}

/// Random stream for one sample in one epoch, independent of the order in
/// which samples are processed.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Normalized images stacked into `[B, 3, H, W]` with their annotations.
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub masks: Vec<SegmentationMap>,
}

pub fn collate<T: Scalar>(pairs: Vec<(RgbImage, SegmentationMap)>, norm: &Normalization) -> Result<Batch<T>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("cannot collate an empty batch".into()));
    }
    let images: Vec<Tensor<T>> = pairs.iter().map(|(img, _)| image_to_tensor(img, norm)).collect();
    Ok(Batch {
        images: Tensor::stack(&images)?,
        masks: pairs.into_iter().map(|(_, m)| m).collect(),
    })
}

/// Normalized `[B, 3, H, W]` tensor of equally sized images.
pub fn stack_images<T: Scalar>(images: &[&RgbImage], norm: &Normalization) -> Result<Tensor<T>> {
    let tensors: Vec<Tensor<T>> = images.iter().map(|img| image_to_tensor(img, norm)).collect();
    Tensor::stack(&tensors)
}

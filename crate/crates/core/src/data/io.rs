//! PNG images and annotation masks.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use super::manifest::Normalization;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::types::{SegmentationMap, NUM_CLASSES};

/// Decodes an 8-bit single-channel PNG holding raw class ids.
pub fn encode_mask(bytes: &[u8]) -> Result<SegmentationMap> {
    let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Encoding(format!("cannot decode mask: {e}")))?;
    let gray = match decoded {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Encoding(format!(
                "mask must be 8-bit single-channel, got {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let map = SegmentationMap::new(w, h, gray.into_raw())?;
    map.validate(NUM_CLASSES)?;
    Ok(map)
}

pub fn read_mask(path: &Path) -> Result<SegmentationMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
    encode_mask(&bytes).map_err(|e| match e {
        Error::Encoding(msg) => Error::Encoding(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn mask_to_png(map: &SegmentationMap) -> Vec<u8> {
    let img = GrayImage::from_raw(map.width() as u32, map.height() as u32, map.values().to_vec())
        .expect("map dimensions match its buffer");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

pub fn write_mask(map: &SegmentationMap, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, mask_to_png(map)).map_err(|e| Error::io(path, e))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn write_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// `[1, 3, H, W]` tensor of `(v / 255 - mean) / std` per channel.
pub fn image_to_tensor<T: Scalar>(img: &RgbImage, norm: &Normalization) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = (f64::from(px.0[c]) / 255.0 - norm.mean[c]) / norm.std[c];
            t.set(0, c, y as usize, x as usize, T::lit(v));
        }
    }
    t
}

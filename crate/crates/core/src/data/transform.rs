//! Geometric transforms shared by images and masks.
//!
//! Every transform maps an output pixel centre back to a continuous source
//! coordinate. Masks take the label of the source pixel containing that
//! point; images are sampled bilinearly. Output pixels therefore always
//! come from inside the source image.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BBox;
use crate::error::{shape_err, Error, Result};
use crate::types::SegmentationMap;

/// Source rectangle of a crop and the square output size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    /// Output side length.
    pub size: usize,
    /// The source rectangle is resampled to `size x size`.
    pub resize_applied: bool,
}

impl CropWindow {
    pub fn x_range(&self) -> std::ops::Range<usize> {
        self.x0..self.x0 + self.width
    }

    pub fn y_range(&self) -> std::ops::Range<usize> {
        self.y0..self.y0 + self.height
    }
}

/// Start of a `side`-long span centred on `center`, shifted inside `[0, n)`.
fn centered_start(center: usize, side: usize, n: usize) -> usize {
    center.saturating_sub(side / 2).min(n - side)
}

/// Chooses the crop for an object box.
///
/// * box fits the window, window fits the image: a `window`-sided square
///   centred on the box, shifted inward at the borders;
/// * box larger than the window: the square spanned by the box's longer
///   side (clipped to the image), centred and shifted the same way, then
///   resized;
/// * window larger than the image on both axes: the whole image, resized;
/// * window larger than the image on one axis: the largest centred square
///   that fits, resized.
pub fn plan_crop(image_width: usize, image_height: usize, bbox: BBox, window: usize) -> Result<CropWindow> {
    if window == 0 {
        return Err(Error::Argument("crop window must be positive".into()));
    }
    bbox.validate()?;
    if !bbox.fits_within(image_width, image_height) {
        return Err(Error::Argument(format!(
            "bounding box {bbox} exceeds the {image_width}x{image_height} image"
        )));
    }
    let (cx, cy) = bbox.center();
    let square = |side_w: usize, side_h: usize, resize_applied: bool| CropWindow {
        x0: centered_start(cx, side_w, image_width),
        y0: centered_start(cy, side_h, image_height),
        width: side_w,
        height: side_h,
        size: window,
        resize_applied,
    };
    let long = bbox.width().max(bbox.height());
    Ok(if long > window {
        square(long.min(image_width), long.min(image_height), true)
    } else if window > image_width && window > image_height {
        CropWindow {
            x0: 0,
            y0: 0,
            width: image_width,
            height: image_height,
            size: window,
            resize_applied: true,
        }
    } else if window > image_width || window > image_height {
        let side = image_width.min(image_height);
        square(side, side, true)
    } else {
        square(window, window, false)
    })
}

/// Continuous source coordinate of output pixel centres along one axis.
#[derive(Clone, Copy, Debug)]
struct AxisMap {
    offset: f64,
    step: f64,
    len: usize,
}

impl AxisMap {
    /// `out` pixels spanning source interval `[start, start + extent)`.
    fn span(start: f64, extent: f64, out: usize, len: usize) -> Self {
        AxisMap {
            offset: start,
            step: extent / out as f64,
            len,
        }
    }

    fn source(&self, i: usize) -> f64 {
        self.offset + (i as f64 + 0.5) * self.step
    }

    fn nearest(&self, i: usize) -> usize {
        (self.source(i).floor().max(0.0) as usize).min(self.len - 1)
    }

    /// Neighbouring source indices and the weight of the upper one.
    fn linear(&self, i: usize) -> (usize, usize, f64) {
        let s = (self.source(i) - 0.5).clamp(0.0, (self.len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(self.len - 1);
        (lo, hi, s - lo as f64)
    }
}

fn resample_mask(mask: &SegmentationMap, xs: AxisMap, ys: AxisMap, out_w: usize, out_h: usize) -> SegmentationMap {
    let cols: Vec<usize> = (0..out_w).map(|x| xs.nearest(x)).collect();
    let mut out = SegmentationMap::filled(out_w, out_h, 0);
    for y in 0..out_h {
        let sy = ys.nearest(y);
        for (x, &sx) in cols.iter().enumerate() {
            out.set(x, y, mask.get(sx, sy));
        }
    }
    out
}

fn resample_image(image: &RgbImage, xs: AxisMap, ys: AxisMap, out_w: usize, out_h: usize) -> RgbImage {
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|x| xs.linear(x)).collect();
    let mut out = RgbImage::new(out_w as u32, out_h as u32);
    for y in 0..out_h {
        let (y0, y1, fy) = ys.linear(y);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let p = |xx: usize, yy: usize| image.get_pixel(xx as u32, yy as u32).0;
            let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
            let mut px = [0u8; 3];
            for k in 0..3 {
                let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
                let bottom = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
                px[k] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out
}

fn check_same_size(image: &RgbImage, mask: &SegmentationMap) -> Result<()> {
    if (image.width() as usize, image.height() as usize) != (mask.width(), mask.height()) {
        return Err(shape_err!(
            "image is {}x{}, mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        ));
    }
    Ok(())
}

/// Applies a planned crop to an image/mask pair.
pub fn apply_crop(image: &RgbImage, mask: &SegmentationMap, w: &CropWindow) -> Result<(RgbImage, SegmentationMap)> {
    check_same_size(image, mask)?;
    if w.x0 + w.width > mask.width() || w.y0 + w.height > mask.height() {
        return Err(Error::Argument(format!("crop {w:?} exceeds the image")));
    }
    if !w.resize_applied {
        let img = image::imageops::crop_imm(image, w.x0 as u32, w.y0 as u32, w.width as u32, w.height as u32)
            .to_image();
        let mut m = SegmentationMap::filled(w.width, w.height, 0);
        for y in 0..w.height {
            for x in 0..w.width {
                m.set(x, y, mask.get(w.x0 + x, w.y0 + y));
            }
        }
        return Ok((img, m));
    }
    let xs = AxisMap::span(w.x0 as f64, w.width as f64, w.size, mask.width());
    let ys = AxisMap::span(w.y0 as f64, w.height as f64, w.size, mask.height());
    Ok((
        resample_image(image, xs, ys, w.size, w.size),
        resample_mask(mask, xs, ys, w.size, w.size),
    ))
}

/// Object-centred crop of an image/mask pair; returns the window used.
pub fn crop_object_centered(
    image: &RgbImage,
    mask: &SegmentationMap,
    bbox: BBox,
    window: usize,
) -> Result<(RgbImage, SegmentationMap, CropWindow)> {
    check_same_size(image, mask)?;
    let w = plan_crop(mask.width(), mask.height(), bbox, window)?;
    let (img, m) = apply_crop(image, mask, &w)?;
    Ok((img, m, w))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub hflip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            scale_min: 1.0,
            scale_max: 1.5,
            hflip_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Scale fixed at 1 and no flips.
    pub fn identity() -> Self {
        AugmentationConfig {
            scale_min: 1.0,
            scale_max: 1.0,
            hflip_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min >= 1.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::Config(format!(
                "augmentation scales must satisfy 1 <= min <= max, got [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!(
                "flip probability must lie in [0, 1], got {}",
                self.hflip_prob
            )));
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentDraw {
        let scale = if self.scale_max > self.scale_min {
            rng.gen_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        AugmentDraw {
            scale,
            flip: rng.gen_bool(self.hflip_prob),
        }
    }
}

/// One realisation of the random augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    pub flip: bool,
}

/// Scales by `draw.scale` about the centre, crops back to the input size
/// and optionally mirrors horizontally.
pub fn apply_augmentation(
    image: &RgbImage,
    mask: &SegmentationMap,
    draw: AugmentDraw,
) -> Result<(RgbImage, SegmentationMap)> {
    check_same_size(image, mask)?;
    if !(draw.scale.is_finite() && draw.scale > 0.0) {
        return Err(Error::Argument(format!("invalid scale {}", draw.scale)));
    }
    let (w, h) = (mask.width(), mask.height());
    let (ew, eh) = (w as f64 / draw.scale, h as f64 / draw.scale);
    let xs = AxisMap::span((w as f64 - ew) / 2.0, ew, w, w);
    let ys = AxisMap::span((h as f64 - eh) / 2.0, eh, h, h);
    let (mut img, mut m) = if draw.scale == 1.0 {
        (image.clone(), mask.clone())
    } else {
        (resample_image(image, xs, ys, w, h), resample_mask(mask, xs, ys, w, h))
    };
    if draw.flip {
        image::imageops::flip_horizontal_in_place(&mut img);
        for row in m.values_mut().chunks_mut(w) {
            row.reverse();
        }
    }
    Ok((img, m))
}

/// Draws from `rng` and applies the augmentation.
pub fn augment<R: Rng + ?Sized>(
    image: &RgbImage,
    mask: &SegmentationMap,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(RgbImage, SegmentationMap)> {
    apply_augmentation(image, mask, cfg.draw(rng))
}

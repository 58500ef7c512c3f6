use acanet::data::RgbImage;
use acanet::types::{ARM, BACKGROUND, CONTAIN, GRASPABLE};
use acanet::SegmentationMap;
use image::{Rgba, RgbaImage};

/// Overlay colour of a class; `None` for background.
pub fn class_color(class: u8) -> Option<[u8; 3]> {
    match class {
        GRASPABLE => Some([0, 255, 0]),
        CONTAIN => Some([255, 0, 0]),
        ARM => Some([0, 0, 255]),
        _ => None,
    }
}

/// Opaque class colours on a fully transparent background.
pub fn overlay_layer(map: &SegmentationMap) -> RgbaImage {
    RgbaImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        match class_color(map.get(x as usize, y as usize)) {
            Some([r, g, b]) => Rgba([r, g, b, 255]),
            None => Rgba([0, 0, 0, 0]),
        }
    })
}

/// Half-transparent blend of the class colours over `image`.
pub fn composite(image: &RgbImage, map: &SegmentationMap) -> RgbImage {
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let class = map.get(x as usize, y as usize);
        if class == BACKGROUND {
            continue;
        }
        if let Some(c) = class_color(class) {
            for (v, c) in px.0.iter_mut().zip(c) {
                *v = ((u16::from(*v) + u16::from(c)) / 2) as u8;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_exact() {
        let map = SegmentationMap::new(4, 1, vec![0, 1, 2, 3]).unwrap();
        let o = overlay_layer(&map);
        assert_eq!(o.get_pixel(0, 0).0, [0, 0, 0, 0]);
        assert_eq!(o.get_pixel(1, 0).0, [0, 255, 0, 255]);
        assert_eq!(o.get_pixel(2, 0).0, [255, 0, 0, 255]);
        assert_eq!(o.get_pixel(3, 0).0, [0, 0, 255, 255]);
    }

    #[test]
    fn composite_keeps_background() {
        let img = RgbImage::from_pixel(2, 1, image::Rgb([100, 100, 100]));
        let map = SegmentationMap::new(2, 1, vec![0, 3]).unwrap();
        let c = composite(&img, &map);
        assert_eq!(c.get_pixel(0, 0).0, [100, 100, 100]);
        assert_eq!(c.get_pixel(1, 0).0, [50, 50, 177]);
    }
}

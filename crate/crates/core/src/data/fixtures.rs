//! Synthetic desk scenes: a container on a plain background, its opening
//! labelled contain, and an arm stripe reaching in from outside the frame.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{write_mask, write_rgb};
use super::manifest::{DatasetManifest, SampleRecord, Split};
use super::compute_bbox;
use crate::error::{Error, Result};
use crate::model::OUTPUT_STRIDE;
use crate::types::{SegmentationMap, ARM, BACKGROUND, CONTAIN, GRASPABLE, NUM_CLASSES, OBJECT_CLASSES};

/// Fraction of the container's extent occupied by its opening.
const OPENING_SCALE: f64 = 0.7;
const NOISE: i32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerShape {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Container {
    pub shape: ContainerShape,
    pub cx: f64,
    pub cy: f64,
    pub half_width: f64,
    pub half_height: f64,
}

impl Container {
    fn inside_scaled(&self, x: f64, y: f64, k: f64) -> bool {
        let u = (x - self.cx) / (self.half_width * k);
        let v = (y - self.cy) / (self.half_height * k);
        match self.shape {
            ContainerShape::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            ContainerShape::Ellipse => u * u + v * v <= 1.0,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.inside_scaled(x, y, 1.0)
    }

    /// Upper half of the shrunken interior.
    pub fn opening_contains(&self, x: f64, y: f64) -> bool {
        y < self.cy && self.inside_scaled(x, y, OPENING_SCALE)
    }
}

/// Capsule around the segment `start -> end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmStripe {
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub half_width: f64,
}

impl ArmStripe {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (self.end.0 - self.start.0, self.end.1 - self.start.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((x - self.start.0) * dx + (y - self.start.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (px, py) = (self.start.0 + t * dx - x, self.start.1 + t * dy - y);
        px * px + py * py <= self.half_width * self.half_width
    }
}

/// Geometry and colours of one fixture; shapes are evaluated at pixel
/// centres `(x + 0.5, y + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub size: usize,
    pub background: [u8; 3],
    pub body: [u8; 3],
    pub opening: [u8; 3],
    pub arm_color: [u8; 3],
    pub container: Container,
    pub arm: ArmStripe,
}

impl Scene {
    /// Label with arm over opening over body over background.
    pub fn label_at(&self, x: usize, y: usize) -> u8 {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        if self.arm.contains(px, py) {
            ARM
        } else if self.container.opening_contains(px, py) {
            CONTAIN
        } else if self.container.contains(px, py) {
            GRASPABLE
        } else {
            BACKGROUND
        }
    }

    pub fn color_of(&self, class: u8) -> [u8; 3] {
        match class {
            ARM => self.arm_color,
            CONTAIN => self.opening,
            GRASPABLE => self.body,
            _ => self.background,
        }
    }

    pub fn mask(&self) -> SegmentationMap {
        let mut m = SegmentationMap::filled(self.size, self.size, BACKGROUND);
        for y in 0..self.size {
            for x in 0..self.size {
                m.set(x, y, self.label_at(x, y));
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub image: RgbImage,
    pub mask: SegmentationMap,
    pub scene: Scene,
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> i32 {
    a.iter().zip(&b).map(|(&x, &y)| (x as i32 - y as i32).abs()).sum()
}

fn random_color(rng: &mut ChaCha8Rng, avoid: &[[u8; 3]], min_distance: i32) -> [u8; 3] {
    loop {
        let c = [rng.gen(), rng.gen(), rng.gen()];
        if avoid.iter().all(|&a| color_distance(a, c) >= min_distance) {
            return c;
        }
    }
}

fn sample_scene(size: usize, rng: &mut ChaCha8Rng) -> Scene {
    let s = size as f64;
    let shape = if rng.gen_bool(0.5) {
        ContainerShape::Rectangle
    } else {
        ContainerShape::Ellipse
    };
    let container = Container {
        shape,
        cx: rng.gen_range(0.38..0.62) * s,
        cy: rng.gen_range(0.42..0.58) * s,
        half_width: rng.gen_range(0.2..0.28) * s,
        half_height: rng.gen_range(0.22..0.3) * s,
    };
    let end = (
        container.cx + rng.gen_range(-0.4..0.4) * container.half_width,
        container.cy + 0.45 * container.half_height,
    );
    let angle: f64 = rng.gen_range(-1.0..1.0);
    let start = (end.0 + angle.sin() * 1.5 * s, end.1 + angle.cos() * 1.5 * s);
    let arm = ArmStripe {
        start,
        end,
        half_width: rng.gen_range(0.05..0.08) * s,
    };
    let background = random_color(rng, &[], 0);
    let body = random_color(rng, &[background], 150);
    let opening = body.map(|c| (c as f64 * 0.45) as u8);
    let arm_color = loop {
        let c = [
            rng.gen_range(170..=240),
            rng.gen_range(110..=170),
            rng.gen_range(80..=140),
        ];
        if [background, body, opening].iter().all(|&a| color_distance(a, c) >= 90) {
            break c;
        }
    };
    Scene {
        size,
        background,
        body,
        opening,
        arm_color,
        container,
        arm,
    }
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || !size.is_multiple_of(OUTPUT_STRIDE) {
        return Err(Error::Argument(format!(
            "fixture size must be a positive multiple of {OUTPUT_STRIDE}, got {size}"
        )));
    }
    Ok(())
}

/// Renders fixture `index` of the set generated with `seed`.
pub fn render_fixture(size: usize, seed: u64, index: usize) -> Result<Fixture> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (scene, mask) = loop {
        let scene = sample_scene(size, &mut rng);
        let mask = scene.mask();
        if mask.class_set().len() == NUM_CLASSES {
            break (scene, mask);
        }
    };
    let mut image = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let base = scene.color_of(mask.get(x, y));
            let px = base.map(|c| (c as i32 + rng.gen_range(-NOISE..=NOISE)).clamp(0, 255) as u8);
            image.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(Fixture { image, mask, scene })
}

/// Split by index: the first 70% train, the next 15% val, the rest test.
pub fn split_for(index: usize, n: usize) -> Split {
    let train = (n as f64 * 0.7).round() as usize;
    let val = (n as f64 * 0.15).round() as usize;
    if index < train {
        Split::Train
    } else if index < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Writes `n` fixtures under `out_dir` (`images/`, `masks/`), the full
/// manifest and one manifest per split (`train.toml`, `val.toml`,
/// `test.toml`). Returns the full manifest.
pub fn generate_synthetic_fixture(out_dir: &Path, n: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Argument("fixture count must be at least 1".into()));
    }
    check_size(size)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let f = render_fixture(size, seed, i)?;
        let image_path = format!("images/{i:04}.png");
        let mask_path = format!("masks/{i:04}.png");
        write_rgb(&f.image, &out_dir.join(&image_path))?;
        write_mask(&f.mask, &out_dir.join(&mask_path))?;
        records.push(SampleRecord {
            image_path: image_path.into(),
            mask_path: mask_path.into(),
            bbox: Some(compute_bbox(&f.mask, &OBJECT_CLASSES)?),
            split: split_for(i, n),
            object_category: Some(
                match f.scene.container.shape {
                    ContainerShape::Rectangle => "box",
                    ContainerShape::Ellipse => "bowl",
                }
                .into(),
            ),
        });
    }
    let manifest = DatasetManifest::new(out_dir, records);
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    for split in Split::ALL {
        manifest
            .filter_split(split)
            .write(&out_dir.join(format!("{split}.toml")))?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_fixture_has_all_classes() {
        for i in 0..12 {
            let f = render_fixture(64, 11, i).unwrap();
            assert_eq!(f.mask.class_set(), vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(render_fixture(64, 5, 3).unwrap(), render_fixture(64, 5, 3).unwrap());
        assert_ne!(render_fixture(64, 5, 3).unwrap().mask, render_fixture(64, 6, 3).unwrap().mask);
    }

    /// Paints layers back to front; later layers overwrite earlier ones.
    fn painter(scene: &Scene) -> SegmentationMap {
        let mut m = SegmentationMap::filled(scene.size, scene.size, BACKGROUND);
        let layers: [(u8, &dyn Fn(f64, f64) -> bool); 3] = [
            (GRASPABLE, &|x, y| scene.container.contains(x, y)),
            (CONTAIN, &|x, y| scene.container.opening_contains(x, y)),
            (ARM, &|x, y| scene.arm.contains(x, y)),
        ];
        for (class, inside) in layers {
            for y in 0..scene.size {
                for x in 0..scene.size {
                    if inside(x as f64 + 0.5, y as f64 + 0.5) {
                        m.set(x, y, class);
                    }
                }
            }
        }
        m
    }

    #[test]
    fn arm_overrides_object_like_a_painter() {
        let mut overlaps = 0;
        for i in 0..8 {
            let f = render_fixture(96, 2, i).unwrap();
            assert_eq!(f.mask, painter(&f.scene));
            overlaps += (0..96)
                .flat_map(|y| (0..96).map(move |x| (x, y)))
                .filter(|&(x, y)| {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    f.scene.arm.contains(px, py) && f.scene.container.contains(px, py)
                })
                .inspect(|&(x, y)| assert_eq!(f.mask.get(x, y), ARM))
                .count();
        }
        assert!(overlaps > 0);
    }

    #[test]
    fn splits_follow_ratio() {
        let counts = Split::ALL.map(|s| (0..20).filter(|&i| split_for(i, 20) == s).count());
        assert_eq!(counts, [14, 3, 3]);
        assert_eq!(split_for(0, 1), Split::Train);
    }

    #[test]
    fn invalid_arguments() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate_synthetic_fixture(dir.path(), 0, 64, 1), Err(Error::Argument(_))));
        assert!(matches!(generate_synthetic_fixture(dir.path(), 1, 50, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn written_fixtures_are_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic_fixture(a.path(), 2, 64, 9).unwrap();
        generate_synthetic_fixture(b.path(), 2, 64, 9).unwrap();
        for f in ["images/0000.png", "masks/0001.png", "manifest.toml", "train.toml", "test.toml"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        let m = DatasetManifest::read(&a.path().join("manifest.toml")).unwrap();
        assert_eq!(m.len(), 2);
    }
}

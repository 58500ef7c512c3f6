//! Per-image segmentation data shared by the model, data pipeline and
//! metrics.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BACKGROUND: u8 = 0;
pub const GRASPABLE: u8 = 1;
pub const CONTAIN: u8 = 2;
pub const ARM: u8 = 3;

/// Number of classes in the arm/container label set.
pub const NUM_CLASSES: usize = 4;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "graspable", "contain", "arm"];

/// Classes whose union forms the visible object.
pub const OBJECT_CLASSES: [u8; 2] = [GRASPABLE, CONTAIN];

pub fn class_name(id: usize) -> String {
    CLASS_NAMES
        .get(id)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class_{id}"))
}

/// Per-pixel class map, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationMap {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(shape_err!(
                "{} labels cannot fill a {width}x{height} map",
                values.len()
            ));
        }
        Ok(SegmentationMap {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        SegmentationMap {
            width,
            height,
            values: vec![class; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<u8> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.values[y * self.width + x] = class;
    }

    /// Checks every label is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.values.iter().find(|&&v| v as usize >= num_classes) {
            Some(v) => Err(Error::Encoding(format!(
                "class id {v} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Sorted set of labels present in the map.
    pub fn class_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.values {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }

    /// Binary mask of pixels whose label is in `classes`.
    pub fn binary_mask(&self, classes: &[u8]) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| u8::from(classes.contains(v)))
            .collect()
    }
}

/// Per-pixel probability of arm or object presence, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMask<T = f32> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Scalar> ProbabilityMask<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != width * height {
            return Err(shape_err!(
                "{} probabilities cannot fill a {width}x{height} mask",
                values.len()
            ));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::Argument(format!("probability {v} outside [0, 1]")));
        }
        Ok(ProbabilityMask {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec([1, 1, self.height, self.width], self.values.clone())
            .expect("mask dimensions are consistent")
    }

    pub(crate) fn from_tensor_unchecked(t: &Tensor<T>, item: usize) -> Self {
        ProbabilityMask {
            width: t.width(),
            height: t.height(),
            values: t.channel_plane(item, 0).to_vec(),
        }
    }
}

/// Per-pixel class distribution, `[class][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffordanceProbabilities<T = f32> {
    num_classes: usize,
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Scalar> AffordanceProbabilities<T> {
    /// Wraps channel-major probabilities, checking range and per-pixel
    /// normalization.
    pub fn new(num_classes: usize, width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != num_classes * width * height {
            return Err(shape_err!(
                "{} values cannot fill {num_classes}x{height}x{width}",
                values.len()
            ));
        }
        let plane = width * height;
        let tol = T::lit(1e-5);
        for p in 0..plane {
            let mut sum = T::zero();
            for c in 0..num_classes {
                let v = values[c * plane + p];
                if !(v >= T::zero() && v <= T::one()) {
                    return Err(Error::Argument(format!("probability {v} outside [0, 1]")));
                }
                sum += v;
            }
            if (sum - T::one()).abs() > tol {
                return Err(Error::Argument(format!(
                    "pixel {p} probabilities sum to {sum}"
                )));
            }
        }
        Ok(AffordanceProbabilities {
            num_classes,
            width,
            height,
            values,
        })
    }

    pub(crate) fn from_tensor_unchecked(t: &Tensor<T>, item: usize) -> Self {
        AffordanceProbabilities {
            num_classes: t.channels(),
            width: t.width(),
            height: t.height(),
            values: t.item(item).to_vec(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, class: usize, x: usize, y: usize) -> T {
        self.values[(class * self.height + y) * self.width + x]
    }
}

/// Per-pixel argmax over classes; ties go to the lowest class id.
pub fn predict_segmentation<T: Scalar>(probs: &AffordanceProbabilities<T>) -> SegmentationMap {
    let plane = probs.width * probs.height;
    let values = (0..plane)
        .map(|p| {
            let mut best = 0usize;
            let mut best_v = probs.values[p];
            for c in 1..probs.num_classes {
                let v = probs.values[c * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    SegmentationMap {
        width: probs.width,
        height: probs.height,
        values,
    }
}

/// Bilinear down-sampling of a probability mask.
pub fn downsample_mask<T: Scalar>(
    mask: &ProbabilityMask<T>,
    target_w: usize,
    target_h: usize,
) -> Result<ProbabilityMask<T>> {
    let t = crate::nn::ops::resize_bilinear(&mask.to_tensor(), target_h, target_w)?;
    let values = t
        .into_vec()
        .into_iter()
        .map(|v| v.max(T::zero()).min(T::one()))
        .collect();
    Ok(ProbabilityMask {
        width: target_w,
        height: target_h,
        values,
    })
}

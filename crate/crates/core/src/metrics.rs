//! Pooled per-class precision, recall and Jaccard index.
//!
//! Counts are summed over all images before dividing; a ratio with a zero
//! denominator is `None`, never 0.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::types::{class_name, SegmentationMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    classes: Vec<ClassCounts>,
    num_images: usize,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            classes: vec![ClassCounts::default(); num_classes],
            num_images: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn class(&self, c: usize) -> ClassCounts {
        self.classes[c]
    }

    pub fn classes(&self) -> &[ClassCounts] {
        &self.classes
    }

    /// Adds one prediction/annotation pair.
    pub fn update(&mut self, pred: &SegmentationMap, gt: &SegmentationMap) -> Result<()> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(shape_err!(
                "prediction is {}x{}, annotation is {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            ));
        }
        pred.validate(self.classes.len())?;
        gt.validate(self.classes.len())?;
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            if p == g {
                self.classes[p as usize].tp += 1;
            } else {
                self.classes[p as usize].fp += 1;
                self.classes[g as usize].fn_ += 1;
            }
        }
        self.num_images += 1;
        Ok(())
    }

    /// Elementwise sum.
    pub fn merge(&self, other: &ConfusionCounts) -> Result<ConfusionCounts> {
        if self.classes.len() != other.classes.len() {
            return Err(Error::Argument(format!(
                "cannot merge counts over {} and {} classes",
                self.classes.len(),
                other.classes.len()
            )));
        }
        Ok(ConfusionCounts {
            classes: self
                .classes
                .iter()
                .zip(&other.classes)
                .map(|(a, b)| ClassCounts {
                    tp: a.tp + b.tp,
                    fp: a.fp + b.fp,
                    fn_: a.fn_ + b.fn_,
                })
                .collect(),
            num_images: self.num_images + other.num_images,
        })
    }
}

/// Functional form of [`ConfusionCounts::update`].
pub fn update_counts(counts: &ConfusionCounts, pred: &SegmentationMap, gt: &SegmentationMap) -> Result<ConfusionCounts> {
    let mut next = counts.clone();
    next.update(pred, gt)?;
    Ok(next)
}

pub fn merge_counts(a: &ConfusionCounts, b: &ConfusionCounts) -> Result<ConfusionCounts> {
    a.merge(b)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub jaccard: Option<f64>,
}

impl ClassMetrics {
    pub fn from_counts(c: ClassCounts) -> Self {
        ClassMetrics {
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            jaccard: ratio(c.tp, c.tp + c.fp + c.fn_),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    /// Mean Jaccard over every class where it is defined.
    pub mean_iou: Option<f64>,
    pub num_images: usize,
}

pub fn compute_report(counts: &ConfusionCounts) -> MetricsReport {
    let classes: Vec<ClassMetrics> = counts.classes.iter().map(|&c| ClassMetrics::from_counts(c)).collect();
    let ids: Vec<usize> = (0..classes.len()).collect();
    MetricsReport {
        mean_iou: mean_jaccard(&classes, &ids),
        classes,
        num_images: counts.num_images,
    }
}

fn mean_jaccard(classes: &[ClassMetrics], ids: &[usize]) -> Option<f64> {
    let defined: Vec<f64> = ids.iter().filter_map(|&c| classes.get(c)?.jaccard).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

impl MetricsReport {
    /// Mean Jaccard over the given classes, skipping undefined ones.
    pub fn mean_iou_over(&self, ids: &[usize]) -> Option<f64> {
        mean_jaccard(&self.classes, ids)
    }

    /// Mean Jaccard over the non-background classes.
    pub fn foreground_miou(&self) -> Option<f64> {
        let ids: Vec<usize> = (1..self.classes.len()).collect();
        self.mean_iou_over(&ids)
    }

    /// `class,P,R,J` rows for the non-background classes, as percentages
    /// with two decimals; undefined values print as `nan`.
    pub fn to_csv(&self) -> String {
        self.format_rows(1..self.classes.len())
    }

    /// Same as [`Self::to_csv`] with the background row first.
    pub fn to_csv_with_background(&self) -> String {
        self.format_rows(0..self.classes.len())
    }

    fn format_rows(&self, ids: std::ops::Range<usize>) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{:.2}", v * 100.0));
        let mut out = String::from("class,P,R,J\n");
        for c in ids {
            let m = &self.classes[c];
            let _ = writeln!(
                out,
                "{},{},{},{}",
                class_name(c),
                cell(m.precision),
                cell(m.recall),
                cell(m.jaccard)
            );
        }
        out
    }
}

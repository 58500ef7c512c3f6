use crate::data::{load_samples, stack_images, DatasetManifest, Normalization, Sample};
use crate::error::{Error, Result};
use crate::metrics::{compute_report, ConfusionCounts, MetricsReport};
use crate::model::Model;
use crate::tensor::Scalar;
use crate::types::SegmentationMap;

const EVAL_BATCH: usize = 4;

/// Anything that labels cropped samples.
pub trait Segmenter {
    fn num_classes(&self) -> usize;

    fn segment(&self, samples: &[&Sample], norm: &Normalization) -> Result<Vec<SegmentationMap>>;
}

impl<T: Scalar> Segmenter for Model<T> {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn segment(&self, samples: &[&Sample], norm: &Normalization) -> Result<Vec<SegmentationMap>> {
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let pred = self.forward(&stack_images::<T>(&images, norm)?)?;
        Ok((0..pred.len()).map(|i| pred.segmentation(i)).collect())
    }
}

/// Pools confusion counts over `samples` and reports per-class metrics.
pub fn evaluate_samples<S: Segmenter + ?Sized>(
    segmenter: &S,
    samples: &[Sample],
    norm: &Normalization,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let mut counts = ConfusionCounts::new(segmenter.num_classes());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let preds = segmenter.segment(&refs, norm)?;
        for (p, s) in preds.iter().zip(chunk) {
            counts.update(p, &s.mask)?;
        }
    }
    Ok(compute_report(&counts))
}

/// Crops every record at the model's input size, without augmentation,
/// and evaluates.
pub fn evaluate<T: Scalar>(model: &Model<T>, manifest: &DatasetManifest) -> Result<MetricsReport> {
    let samples = load_samples(manifest, model.config().input_size)?;
    evaluate_samples(model, &samples, &manifest.normalization)
}

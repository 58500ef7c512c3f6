//! The arm/container affordance network.
//!
//! A residual encoder feeds three decoders. The arm and object decoders
//! predict full-resolution probability masks; the affordance decoder runs
//! two blocks up to stride 8, fuses its features with the down-sampled
//! masks, concatenates the stride-8 encoder map, and finishes with three
//! skip-free blocks and a per-pixel softmax over classes. The single-branch
//! baseline keeps only the affordance decoder with ordinary encoder skips.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod fusion;

pub use config::{ModelConfig, Variant, FUSION_STRIDE, OUTPUT_STRIDE};
pub use encoder::{EncoderFeatures, Stage};
pub use fusion::{fuse_features, FusionBlock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use self::decoder::{Branch, Decoder, FusionMasks};
use self::encoder::{Encoder, EncoderGrads};
use crate::checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::nn::{ops, join, Entry, EntryMut, Mode, Module};
use crate::tensor::{Scalar, Tensor};
use crate::types::{predict_segmentation, AffordanceProbabilities, ProbabilityMask, SegmentationMap};

/// Network outputs for a batch.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    /// Class probabilities, `[B, C, H, W]`.
    pub affordance: Tensor<T>,
    /// Arm probabilities, `[B, 1, H, W]`; absent for the baseline.
    pub arm: Option<Tensor<T>>,
    /// Visible-object probabilities, `[B, 1, H, W]`; absent for the baseline.
    pub object: Option<Tensor<T>>,
}

impl<T: Scalar> Prediction<T> {
    pub fn len(&self) -> usize {
        self.affordance.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn affordance_probabilities(&self, item: usize) -> AffordanceProbabilities<T> {
        AffordanceProbabilities::from_tensor_unchecked(&self.affordance, item)
    }

    pub fn arm_mask(&self, item: usize) -> Option<ProbabilityMask<T>> {
        self.arm
            .as_ref()
            .map(|t| ProbabilityMask::from_tensor_unchecked(t, item))
    }

    pub fn object_mask(&self, item: usize) -> Option<ProbabilityMask<T>> {
        self.object
            .as_ref()
            .map(|t| ProbabilityMask::from_tensor_unchecked(t, item))
    }

    pub fn segmentation(&self, item: usize) -> SegmentationMap {
        predict_segmentation(&self.affordance_probabilities(item))
    }
}

/// Loss gradients with respect to the network outputs.
#[derive(Clone, Debug)]
pub struct OutputGrads<T> {
    pub affordance: Tensor<T>,
    pub arm: Option<Tensor<T>>,
    pub object: Option<Tensor<T>>,
}

struct TrainCache<T> {
    feature_shapes: [[usize; 4]; 4],
    affordance: Tensor<T>,
    arm: Option<Tensor<T>>,
    object: Option<Tensor<T>>,
}

pub struct Model<T> {
    config: ModelConfig,
    encoder: Encoder<T>,
    affordance: Decoder<T>,
    arm: Option<Decoder<T>>,
    object: Option<Decoder<T>>,
    cache: Option<TrainCache<T>>,
}

impl<T: Clone> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            affordance: self.affordance.clone(),
            arm: self.arm.clone(),
            object: self.object.clone(),
            cache: None,
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.count_parameters())
            .finish()
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a randomly initialized network, then loads encoder weights
    /// when the configuration names a pretrained file.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc_ch = config.encoder_channels();
        let widths = config.decoder_channels();
        let encoder = Encoder::new(config.encoder_width, &mut rng);
        let (affordance, arm, object) = match config.variant {
            Variant::Acanet => {
                let arm = Decoder::new(Branch::Mask, enc_ch, widths, 1, &mut rng);
                let object = Decoder::new(Branch::Mask, enc_ch, widths, 1, &mut rng);
                let aff = Decoder::new(
                    Branch::FusedAffordance,
                    enc_ch,
                    widths,
                    config.num_classes,
                    &mut rng,
                );
                (aff, Some(arm), Some(object))
            }
            Variant::Rn18uBaseline => (
                Decoder::new(
                    Branch::BaselineAffordance,
                    enc_ch,
                    widths,
                    config.num_classes,
                    &mut rng,
                ),
                None,
                None,
            ),
        };
        let mut model = Model {
            config,
            encoder,
            affordance,
            arm,
            object,
            cache: None,
        };
        if let Some(path) = model.config.pretrained_encoder_path.clone() {
            checkpoint::load_encoder_weights(&mut model, &path)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Total number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.num_parameters()
    }

    pub fn fusion_block(&self) -> Option<&FusionBlock<T>> {
        self.affordance.fusion.as_ref()
    }

    pub fn fusion_block_mut(&mut self) -> Option<&mut FusionBlock<T>> {
        self.affordance.fusion.as_mut()
    }

    /// Makes the fusion block produce a wrong backward pass. Exists only so
    /// gradient-check tests can confirm the checker catches broken
    /// derivatives.
    #[doc(hidden)]
    pub fn set_fusion_backward_fault(&mut self, enabled: bool) {
        if let Some(f) = self.affordance.fusion.as_mut() {
            f.corrupt_backward = enabled;
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        let [n, c, h, w] = x.shape();
        if n == 0 || c != 3 || h != s || w != s {
            return Err(shape_err!(
                "expected images of shape [B>=1, 3, {s}, {s}], got {:?}",
                x.shape()
            ));
        }
        Ok(())
    }

    fn mask_decoder<'a>(&self, which: &'a Option<Decoder<T>>, name: &str) -> Result<&'a Decoder<T>> {
        which.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "the {} variant has no {name} decoder",
                self.config.variant
            ))
        })
    }

    /// Encoder feature maps at strides 4, 8, 16 and 32.
    pub fn encode(&self, images: &Tensor<T>) -> Result<EncoderFeatures<T>> {
        self.check_input(images)?;
        self.encoder.infer(images)
    }

    /// Full-resolution arm probability masks, `[B, 1, H, W]`.
    pub fn decode_arm(&self, features: &EncoderFeatures<T>) -> Result<Tensor<T>> {
        let dec = self.mask_decoder(&self.arm, "arm")?;
        Ok(ops::sigmoid(&dec.infer(features, None)?))
    }

    /// Full-resolution visible-object probability masks, `[B, 1, H, W]`.
    pub fn decode_object(&self, features: &EncoderFeatures<T>) -> Result<Tensor<T>> {
        let dec = self.mask_decoder(&self.object, "object")?;
        Ok(ops::sigmoid(&dec.infer(features, None)?))
    }

    /// Affordance-branch features after its first two blocks (stride 8).
    pub fn affordance_features(&self, features: &EncoderFeatures<T>) -> Result<Tensor<T>> {
        self.affordance.infer_pre_fusion(features)
    }

    /// Down-samples full-resolution masks to the feature grid and applies
    /// the fusion block.
    pub fn fuse(&self, phi_a: &Tensor<T>, arm: &Tensor<T>, object: &Tensor<T>) -> Result<Tensor<T>> {
        let fusion = self
            .affordance
            .fusion
            .as_ref()
            .ok_or_else(|| Error::Config("the baseline variant has no fusion block".into()))?;
        let (h, w) = (phi_a.height(), phi_a.width());
        let arm = ops::resize_bilinear(arm, h, w)?;
        let object = ops::resize_bilinear(object, h, w)?;
        fusion.infer(phi_a, &arm, &object)
    }

    /// Runs the blocks after fusion and returns per-pixel class
    /// probabilities, `[B, C, H, W]`.
    pub fn decode_affordance(&self, features: &EncoderFeatures<T>, fused: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::softmax_channels(
            &self.affordance.infer_post_fusion(fused, features)?,
        ))
    }

    /// Inference pass. Batch norm uses running statistics and nothing is
    /// cached, so a shared model can serve concurrent callers.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Prediction<T>> {
        let features = self.encode(images)?;
        match self.config.variant {
            Variant::Acanet => {
                let arm = self.decode_arm(&features)?;
                let object = self.decode_object(&features)?;
                let phi_a = self.affordance_features(&features)?;
                let fused = self.fuse(&phi_a, &arm, &object)?;
                let affordance = self.decode_affordance(&features, &fused)?;
                Ok(Prediction {
                    affordance,
                    arm: Some(arm),
                    object: Some(object),
                })
            }
            Variant::Rn18uBaseline => Ok(Prediction {
                affordance: ops::softmax_channels(&self.affordance.infer(&features, None)?),
                arm: None,
                object: None,
            }),
        }
    }

    /// Differentiable pass that records what [`backward`](Self::backward)
    /// needs. `Mode::Train` normalizes with batch statistics and updates the
    /// running estimates.
    pub fn forward_train(&mut self, images: &Tensor<T>, mode: Mode) -> Result<Prediction<T>> {
        self.check_input(images)?;
        let features = self.encoder.forward(images, mode)?;
        let feature_shapes = features.as_list().map(|t| t.shape());
        let (arm, object) = match (&mut self.arm, &mut self.object) {
            (Some(arm_dec), Some(obj_dec)) => {
                let arm = ops::sigmoid(&arm_dec.forward(&features, None, mode)?);
                let object = ops::sigmoid(&obj_dec.forward(&features, None, mode)?);
                (Some(arm), Some(object))
            }
            _ => (None, None),
        };
        let logits = match (&arm, &object) {
            (Some(arm), Some(object)) => {
                let s = self.config.fusion_size();
                let arm_ds = ops::resize_bilinear(arm, s, s)?;
                let obj_ds = ops::resize_bilinear(object, s, s)?;
                let masks = FusionMasks {
                    arm: &arm_ds,
                    object: &obj_ds,
                };
                self.affordance.forward(&features, Some(masks), mode)?
            }
            _ => self.affordance.forward(&features, None, mode)?,
        };
        let affordance = ops::softmax_channels(&logits);
        self.cache = Some(TrainCache {
            feature_shapes,
            affordance: affordance.clone(),
            arm: arm.clone(),
            object: object.clone(),
        });
        Ok(Prediction {
            affordance,
            arm,
            object,
        })
    }

    /// Accumulates parameter gradients for the last
    /// [`forward_train`](Self::forward_train).
    pub fn backward(&mut self, grads: &OutputGrads<T>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| shape_err!("backward called without a preceding forward_train"))?;
        let [s4, s8, s16, s32] = cache.feature_shapes;
        let mut enc = EncoderGrads {
            stride4: Tensor::zeros(s4),
            stride8: Tensor::zeros(s8),
            stride16: Tensor::zeros(s16),
            stride32: Tensor::zeros(s32),
        };
        let dlogits = ops::softmax_channels_backward(&cache.affordance, &grads.affordance)?;
        let dec = self.affordance.backward(&dlogits, &mut enc)?;
        if let (Some(arm_dec), Some(obj_dec), Some(arm), Some(object)) = (
            self.arm.as_mut(),
            self.object.as_mut(),
            cache.arm.as_ref(),
            cache.object.as_ref(),
        ) {
            let size = self.config.input_size;
            for (decoder, probs, out_grad, fused_grad) in [
                (arm_dec, arm, grads.arm.as_ref(), dec.arm_mask),
                (obj_dec, object, grads.object.as_ref(), dec.object_mask),
            ] {
                let mut d = match out_grad {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(probs.shape()),
                };
                if let Some(fg) = fused_grad {
                    d.add_assign(&ops::resize_bilinear_backward(&fg, size, size)?)?;
                }
                let dlogits = ops::sigmoid_backward(probs, &d)?;
                decoder.backward(&dlogits, &mut enc)?;
            }
        }
        self.encoder.backward(enc)
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        if let Some(arm) = &self.arm {
            arm.visit(&join(prefix, "arm"), f);
        }
        if let Some(object) = &self.object {
            object.visit(&join(prefix, "object"), f);
        }
        self.affordance.visit(&join(prefix, "affordance"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        if let Some(arm) = &mut self.arm {
            arm.visit_mut(&join(prefix, "arm"), f);
        }
        if let Some(object) = &mut self.object {
            object.visit_mut(&join(prefix, "object"), f);
        }
        self.affordance.visit_mut(&join(prefix, "affordance"), f);
    }
}

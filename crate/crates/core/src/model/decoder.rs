//! UNet decoder blocks: nearest-neighbour up-sampling, optional encoder
//! skip, then 3x3 convolution / batch-norm / ReLU stacks.

use rand_chacha::ChaCha8Rng;

use super::encoder::{EncoderFeatures, EncoderGrads, Stage};
use super::fusion::FusionBlock;
use crate::error::Result;
use crate::nn::conv::Init;
use crate::nn::ops;
use crate::nn::{join, BatchNorm2d, Conv2d, Entry, EntryMut, Mode, Module};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone)]
pub(crate) struct ConvBnRelu<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    output: Option<Tensor<T>>,
}

impl<T: Scalar> ConvBnRelu<T> {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(cin, cout, 3, 1, 1, false, Init::KaimingFanOut, rng),
            bn: BatchNorm2d::new(cout),
            output: None,
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::relu(&self.bn.infer(&self.conv.infer(x)?)?))
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = ops::relu(&self.bn.forward(&self.conv.forward(x)?, mode)?);
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.take().expect("forward before backward");
        let d = ops::relu_backward(&y, dy)?;
        self.conv.backward(&self.bn.backward(&d)?)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Where an encoder map joins a decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Skip {
    None,
    /// Concatenated after up-sampling, at the block's output resolution.
    AfterUpsample(Stage),
    /// Concatenated with the block input, before up-sampling.
    BeforeUpsample(Stage),
}

#[cfg(test)]
impl Skip {
    fn stage(self) -> Option<Stage> {
        match self {
            Skip::None => None,
            Skip::AfterUpsample(s) | Skip::BeforeUpsample(s) => Some(s),
        }
    }
}

#[derive(Clone)]
pub(crate) struct DecoderBlock<T> {
    skip: Skip,
    convs: Vec<ConvBnRelu<T>>,
    input_channels: usize,
    skip_channels: usize,
}

impl<T: Scalar> DecoderBlock<T> {
    /// `widths` lists the output channels of each convolution in order.
    fn new(
        input_channels: usize,
        skip: Skip,
        skip_channels: usize,
        widths: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let skip_channels = if skip == Skip::None { 0 } else { skip_channels };
        let mut cin = input_channels + skip_channels;
        let convs = widths
            .iter()
            .map(|&w| {
                let layer = ConvBnRelu::new(cin, w, rng);
                cin = w;
                layer
            })
            .collect();
        DecoderBlock {
            skip,
            convs,
            input_channels,
            skip_channels,
        }
    }

    fn prepare(&self, x: &Tensor<T>, enc: &EncoderFeatures<T>) -> Result<Tensor<T>> {
        Ok(match self.skip {
            Skip::None => ops::upsample_nearest2x(x),
            Skip::AfterUpsample(s) => {
                ops::concat_channels(&[&ops::upsample_nearest2x(x), enc.get(s)])?
            }
            Skip::BeforeUpsample(s) => {
                ops::upsample_nearest2x(&ops::concat_channels(&[x, enc.get(s)])?)
            }
        })
    }

    fn infer(&self, x: &Tensor<T>, enc: &EncoderFeatures<T>) -> Result<Tensor<T>> {
        let mut h = self.prepare(x, enc)?;
        for conv in &self.convs {
            h = conv.infer(&h)?;
        }
        Ok(h)
    }

    fn forward(&mut self, x: &Tensor<T>, enc: &EncoderFeatures<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = self.prepare(x, enc)?;
        for conv in &mut self.convs {
            h = conv.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Returns the input gradient and adds the skip gradient into `enc`.
    fn backward(&mut self, dy: &Tensor<T>, enc: &mut EncoderGrads<T>) -> Result<Tensor<T>> {
        let mut d = dy.clone();
        for conv in self.convs.iter_mut().rev() {
            d = conv.backward(&d)?;
        }
        let sizes = [self.input_channels, self.skip_channels];
        match self.skip {
            Skip::None => ops::upsample_nearest2x_backward(&d),
            Skip::AfterUpsample(s) => {
                let mut parts = ops::split_channels(&d, &sizes)?.into_iter();
                let dx = parts.next().unwrap();
                enc.get_mut(s).add_assign(&parts.next().unwrap())?;
                ops::upsample_nearest2x_backward(&dx)
            }
            Skip::BeforeUpsample(s) => {
                let d = ops::upsample_nearest2x_backward(&d)?;
                let mut parts = ops::split_channels(&d, &sizes)?.into_iter();
                let dx = parts.next().unwrap();
                enc.get_mut(s).add_assign(&parts.next().unwrap())?;
                Ok(dx)
            }
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("convs.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("convs.{i}")), f);
        }
    }
}

/// Which network branch a decoder serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Branch {
    /// Affordance decoder of the multi-branch network (with fusion).
    FusedAffordance,
    /// Affordance decoder of the single-branch baseline.
    BaselineAffordance,
    /// Arm or object mask decoder.
    Mask,
}

/// Five up-sampling blocks from stride 32 to full resolution followed by a
/// 3x3 output convolution.
#[derive(Clone)]
pub(crate) struct Decoder<T> {
    blocks: Vec<DecoderBlock<T>>,
    pub(crate) fusion: Option<FusionBlock<T>>,
    head: Conv2d<T>,
}

/// Mask-fusion inputs for the affordance decoder, already at stride 8.
pub(crate) struct FusionMasks<'a, T> {
    pub arm: &'a Tensor<T>,
    pub object: &'a Tensor<T>,
}

/// Gradients produced by [`Decoder::backward`].
pub(crate) struct DecoderGrads<T> {
    pub arm_mask: Option<Tensor<T>>,
    pub object_mask: Option<Tensor<T>>,
}

/// Index of the block whose output feeds the fusion block.
const FUSION_AFTER_BLOCK: usize = 1;

impl<T: Scalar> Decoder<T> {
    pub fn new(
        branch: Branch,
        encoder_channels: [usize; 4],
        widths: [usize; 5],
        out_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let [e4, e8, e16, e32] = encoder_channels;
        let [w0, w1, w2, w3, w4] = widths;
        let mut blocks = vec![
            DecoderBlock::new(e32, Skip::AfterUpsample(Stage::Stride16), e16, &[w0, w0], rng),
            DecoderBlock::new(w0, Skip::AfterUpsample(Stage::Stride8), e8, &[w1, w1], rng),
        ];
        let mut fusion = None;
        match branch {
            Branch::FusedAffordance => {
                fusion = Some(FusionBlock::new(w1, rng));
                // Widened first convolution plus an extra channel-reducing one.
                blocks.push(DecoderBlock::new(
                    w1,
                    Skip::BeforeUpsample(Stage::Stride8),
                    e8,
                    &[2 * w2, w2, w2],
                    rng,
                ));
            }
            Branch::BaselineAffordance => blocks.push(DecoderBlock::new(
                w1,
                Skip::AfterUpsample(Stage::Stride4),
                e4,
                &[w2, w2],
                rng,
            )),
            Branch::Mask => blocks.push(DecoderBlock::new(w1, Skip::None, 0, &[w2, w2], rng)),
        }
        blocks.push(DecoderBlock::new(w2, Skip::None, 0, &[w3, w3], rng));
        blocks.push(DecoderBlock::new(w3, Skip::None, 0, &[w4, w4], rng));
        let head = Conv2d::new(w4, out_channels, 3, 1, 1, true, Init::UniformFanIn, rng);
        Decoder {
            blocks,
            fusion,
            head,
        }
    }

    /// Feature maps entering the fusion block (stride 8).
    pub fn infer_pre_fusion(&self, enc: &EncoderFeatures<T>) -> Result<Tensor<T>> {
        let mut h = enc.stride32.clone();
        for block in &self.blocks[..=FUSION_AFTER_BLOCK] {
            h = block.infer(&h, enc)?;
        }
        Ok(h)
    }

    /// Remaining blocks and the output convolution, returning logits.
    pub fn infer_post_fusion(&self, fused: &Tensor<T>, enc: &EncoderFeatures<T>) -> Result<Tensor<T>> {
        let mut h = fused.clone();
        for block in &self.blocks[FUSION_AFTER_BLOCK + 1..] {
            h = block.infer(&h, enc)?;
        }
        self.head.infer(&h)
    }

    pub fn infer(&self, enc: &EncoderFeatures<T>, masks: Option<FusionMasks<'_, T>>) -> Result<Tensor<T>> {
        let mut h = self.infer_pre_fusion(enc)?;
        if let (Some(fusion), Some(m)) = (&self.fusion, masks) {
            h = fusion.infer(&h, m.arm, m.object)?;
        }
        self.infer_post_fusion(&h, enc)
    }

    pub fn forward(
        &mut self,
        enc: &EncoderFeatures<T>,
        masks: Option<FusionMasks<'_, T>>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let mut h = enc.stride32.clone();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            h = block.forward(&h, enc, mode)?;
            if i == FUSION_AFTER_BLOCK {
                if let (Some(fusion), Some(m)) = (&mut self.fusion, &masks) {
                    h = fusion.forward(&h, m.arm, m.object)?;
                }
            }
        }
        self.head.forward(&h)
    }

    /// Back-propagates logit gradients, accumulating into `enc`.
    pub fn backward(&mut self, dlogits: &Tensor<T>, enc: &mut EncoderGrads<T>) -> Result<DecoderGrads<T>> {
        let mut d = self.head.backward(dlogits)?;
        let mut grads = DecoderGrads {
            arm_mask: None,
            object_mask: None,
        };
        for i in (0..self.blocks.len()).rev() {
            if i == FUSION_AFTER_BLOCK {
                if let Some(fusion) = &mut self.fusion {
                    let g = fusion.backward(&d)?;
                    d = g.features;
                    grads.arm_mask = Some(g.arm_mask);
                    grads.object_mask = Some(g.object_mask);
                }
            }
            d = self.blocks[i].backward(&d, enc)?;
        }
        enc.stride32.add_assign(&d)?;
        Ok(grads)
    }

    #[cfg(test)]
    pub(crate) fn skip_stages(&self) -> Vec<Option<Stage>> {
        self.blocks.iter().map(|b| b.skip.stage()).collect()
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        if let Some(fusion) = &self.fusion {
            fusion.visit(&join(prefix, "fusion"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        if let Some(fusion) = &mut self.fusion {
            fusion.visit_mut(&join(prefix, "fusion"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn skip_policy_per_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = [4, 8, 16, 32];
        let widths = [16, 8, 4, 2, 1];
        let fused = Decoder::<f32>::new(Branch::FusedAffordance, enc, widths, 4, &mut rng);
        assert_eq!(
            fused.skip_stages(),
            vec![
                Some(Stage::Stride16),
                Some(Stage::Stride8),
                Some(Stage::Stride8),
                None,
                None
            ]
        );
        assert!(matches!(fused.blocks[2].skip, Skip::BeforeUpsample(Stage::Stride8)));
        assert_eq!(fused.blocks[2].convs.len(), 3);
        let base = Decoder::<f32>::new(Branch::BaselineAffordance, enc, widths, 4, &mut rng);
        assert_eq!(base.skip_stages()[2], Some(Stage::Stride4));
        assert!(base.fusion.is_none());
        let mask = Decoder::<f32>::new(Branch::Mask, enc, widths, 1, &mut rng);
        assert_eq!(mask.skip_stages()[2..], [None, None, None]);
    }

    #[test]
    fn default_widths_parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = [64, 128, 256, 512];
        let widths = [256, 128, 64, 32, 16];
        let mask = Decoder::<f32>::new(Branch::Mask, enc, widths, 1, &mut rng);
        // Hand-summed conv + batch-norm parameters of the five blocks + head.
        assert_eq!(mask.num_parameters(), 3_096_401);
    }
}

//! ResNet-18 style residual encoder.
//!
//! A 7x7 stride-2 stem and one max-pool bring the input to stride 4; the
//! three deeper stages each halve resolution with a stride-2 convolution in
//! their first residual block.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::conv::Init;
use crate::nn::ops::{self, MaxPool2d};
use crate::nn::{join, BatchNorm2d, Conv2d, Entry, EntryMut, Mode, Module};
use crate::tensor::{Scalar, Tensor};

/// Encoder feature maps at output strides 4, 8, 16 and 32.
#[derive(Clone, Debug)]
pub struct EncoderFeatures<T> {
    pub stride4: Tensor<T>,
    pub stride8: Tensor<T>,
    pub stride16: Tensor<T>,
    pub stride32: Tensor<T>,
}

impl<T: Scalar> EncoderFeatures<T> {
    pub fn get(&self, stage: Stage) -> &Tensor<T> {
        match stage {
            Stage::Stride4 => &self.stride4,
            Stage::Stride8 => &self.stride8,
            Stage::Stride16 => &self.stride16,
            Stage::Stride32 => &self.stride32,
        }
    }

    pub fn as_list(&self) -> [&Tensor<T>; 4] {
        [&self.stride4, &self.stride8, &self.stride16, &self.stride32]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Stride4,
    Stride8,
    Stride16,
    Stride32,
}

/// Gradients flowing back into the encoder outputs.
#[derive(Clone, Debug)]
pub struct EncoderGrads<T> {
    pub stride4: Tensor<T>,
    pub stride8: Tensor<T>,
    pub stride16: Tensor<T>,
    pub stride32: Tensor<T>,
}

impl<T: Scalar> EncoderGrads<T> {
    pub fn zeros_like(f: &EncoderFeatures<T>) -> Self {
        EncoderGrads {
            stride4: Tensor::zeros(f.stride4.shape()),
            stride8: Tensor::zeros(f.stride8.shape()),
            stride16: Tensor::zeros(f.stride16.shape()),
            stride32: Tensor::zeros(f.stride32.shape()),
        }
    }

    pub fn get_mut(&mut self, stage: Stage) -> &mut Tensor<T> {
        match stage {
            Stage::Stride4 => &mut self.stride4,
            Stage::Stride8 => &mut self.stride8,
            Stage::Stride16 => &mut self.stride16,
            Stage::Stride32 => &mut self.stride32,
        }
    }

    pub fn accumulate(&mut self, other: &EncoderGrads<T>) -> Result<()> {
        self.stride4.add_assign(&other.stride4)?;
        self.stride8.add_assign(&other.stride8)?;
        self.stride16.add_assign(&other.stride16)?;
        self.stride32.add_assign(&other.stride32)
    }
}

#[derive(Clone)]
struct BasicBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    downsample: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    hidden: Option<Tensor<T>>,
    output: Option<Tensor<T>>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let downsample = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(cin, cout, 1, stride, 0, false, Init::KaimingFanOut, rng),
                BatchNorm2d::new(cout),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, false, Init::KaimingFanOut, rng),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, false, Init::KaimingFanOut, rng),
            bn2: BatchNorm2d::new(cout),
            downsample,
            hidden: None,
            output: None,
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = ops::relu(&self.bn1.infer(&self.conv1.infer(x)?)?);
        let mut y = self.bn2.infer(&self.conv2.infer(&h)?)?;
        match &self.downsample {
            Some((conv, bn)) => y.add_assign(&bn.infer(&conv.infer(x)?)?)?,
            None => y.add_assign(x)?,
        }
        Ok(ops::relu(&y))
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = ops::relu(&self.bn1.forward(&self.conv1.forward(x)?, mode)?);
        let mut y = self.bn2.forward(&self.conv2.forward(&h)?, mode)?;
        match &mut self.downsample {
            Some((conv, bn)) => y.add_assign(&bn.forward(&conv.forward(x)?, mode)?)?,
            None => y.add_assign(x)?,
        }
        let y = ops::relu(&y);
        self.hidden = Some(h);
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.take().expect("forward before backward");
        let h = self.hidden.take().expect("forward before backward");
        let dsum = ops::relu_backward(&y, dy)?;
        let dh = self.conv2.backward(&self.bn2.backward(&dsum)?)?;
        let dh = ops::relu_backward(&h, &dh)?;
        let mut dx = self.conv1.backward(&self.bn1.backward(&dh)?)?;
        match &mut self.downsample {
            Some((conv, bn)) => dx.add_assign(&conv.backward(&bn.backward(&dsum)?)?)?,
            None => dx.add_assign(&dsum)?,
        }
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &self.downsample {
            conv.visit(&join(prefix, "downsample.0"), f);
            bn.visit(&join(prefix, "downsample.1"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &mut self.downsample {
            conv.visit_mut(&join(prefix, "downsample.0"), f);
            bn.visit_mut(&join(prefix, "downsample.1"), f);
        }
    }
}

#[derive(Clone)]
pub struct Encoder<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    pool: MaxPool2d,
    layers: [Vec<BasicBlock<T>>; 4],
    stem: Option<Tensor<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(width: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv2d::new(3, width, 7, 2, 3, false, Init::KaimingFanOut, rng);
        let bn1 = BatchNorm2d::new(width);
        let mut cin = width;
        let layers = [1, 2, 4, 8].map(|mult| {
            let cout = width * mult;
            let stride = if mult == 1 { 1 } else { 2 };
            let first = BasicBlock::new(cin, cout, stride, rng);
            let second = BasicBlock::new(cout, cout, 1, rng);
            cin = cout;
            vec![first, second]
        });
        Encoder {
            conv1,
            bn1,
            pool: MaxPool2d::default(),
            layers,
            stem: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<EncoderFeatures<T>> {
        let stem = ops::relu(&self.bn1.infer(&self.conv1.infer(x)?)?);
        let mut h = self.pool.infer(&stem)?;
        let mut outs = Vec::with_capacity(4);
        for layer in &self.layers {
            for block in layer {
                h = block.infer(&h)?;
            }
            outs.push(h.clone());
        }
        Ok(features_from(outs))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<EncoderFeatures<T>> {
        let stem = ops::relu(&self.bn1.forward(&self.conv1.forward(x)?, mode)?);
        let mut h = self.pool.forward(&stem)?;
        self.stem = Some(stem);
        let mut outs = Vec::with_capacity(4);
        for layer in &mut self.layers {
            for block in layer.iter_mut() {
                h = block.forward(&h, mode)?;
            }
            outs.push(h.clone());
        }
        Ok(features_from(outs))
    }

    /// Back-propagates into the encoder parameters. The gradient with
    /// respect to the image is not formed.
    pub fn backward(&mut self, grads: EncoderGrads<T>) -> Result<()> {
        let EncoderGrads {
            stride4,
            stride8,
            stride16,
            stride32,
        } = grads;
        let mut d = stride32;
        for (i, extra) in [Some(stride16), Some(stride8), Some(stride4), None]
            .into_iter()
            .enumerate()
        {
            let layer = &mut self.layers[3 - i];
            for block in layer.iter_mut().rev() {
                d = block.backward(&d)?;
            }
            if let Some(extra) = extra {
                d.add_assign(&extra)?;
            }
        }
        let d = self.pool.backward(&d)?;
        let stem = self.stem.take().expect("forward before backward");
        let d = ops::relu_backward(&stem, &d)?;
        let d = self.bn1.backward(&d)?;
        self.conv1.backward_params(&d)
    }
}

fn features_from<T: Scalar>(outs: Vec<Tensor<T>>) -> EncoderFeatures<T> {
    let mut it = outs.into_iter();
    EncoderFeatures {
        stride4: it.next().unwrap(),
        stride8: it.next().unwrap(),
        stride16: it.next().unwrap(),
        stride32: it.next().unwrap(),
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        for (i, layer) in self.layers.iter().enumerate() {
            for (j, block) in layer.iter().enumerate() {
                block.visit(&join(prefix, &format!("layer{}.{j}", i + 1)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (j, block) in layer.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("layer{}.{j}", i + 1)), f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn resnet18_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::<f32>::new(64, &mut rng);
        // torchvision resnet18 without the classifier head.
        assert_eq!(enc.num_parameters(), 11_176_512);
    }

    #[test]
    fn parameter_names_follow_torchvision_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::<f32>::new(4, &mut rng);
        let mut names = Vec::new();
        enc.visit("encoder", &mut |n, _| names.push(n.to_string()));
        assert!(names.contains(&"encoder.conv1.weight".to_string()));
        assert!(names.contains(&"encoder.layer2.0.downsample.0.weight".to_string()));
        assert!(names.contains(&"encoder.layer4.1.bn2.running_var".to_string()));
        assert!(!names.iter().any(|n| n.starts_with("encoder.layer1.0.downsample")));
    }
}

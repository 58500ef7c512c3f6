use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Total down-sampling factor of the residual encoder.
pub const OUTPUT_STRIDE: usize = 32;

/// Down-sampling factor of the feature maps that enter the fusion block.
pub const FUSION_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Arm, object and affordance decoders joined by mask-weighted fusion.
    #[default]
    Acanet,
    /// Single affordance decoder with encoder skips at every stage.
    Rn18uBaseline,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acanet" => Ok(Variant::Acanet),
            "rn18u_baseline" | "rn18u" => Ok(Variant::Rn18uBaseline),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Acanet => "acanet",
            Variant::Rn18uBaseline => "rn18u_baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    /// Side of the square network input, in pixels.
    pub input_size: usize,
    /// Number of residual stages; only the four-stage ResNet-18 layout is
    /// supported.
    pub encoder_depth: usize,
    /// Channels of the first residual stage (64 for ResNet-18); later stages
    /// double it.
    pub encoder_width: usize,
    /// Output channels of the first post-fusion decoder block; the other
    /// blocks scale from it.
    pub decoder_base_channels: usize,
    /// Channels of the stride-8 feature maps that are fused with the masks.
    pub fusion_channels: usize,
    pub pretrained_encoder_path: Option<PathBuf>,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Acanet,
            num_classes: 4,
            input_size: 480,
            encoder_depth: 4,
            encoder_width: 64,
            decoder_base_channels: 64,
            fusion_channels: 128,
            pretrained_encoder_path: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            ..Self::default()
        }
    }

    /// Narrow network for desk-scale experiments and gradient checks.
    pub fn miniature(variant: Variant, input_size: usize) -> Self {
        ModelConfig {
            variant,
            input_size,
            encoder_width: 8,
            decoder_base_channels: 8,
            fusion_channels: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 || self.num_classes > 256 {
            return fail(format!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            ));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(OUTPUT_STRIDE) {
            return fail(format!(
                "input_size must be a positive multiple of {OUTPUT_STRIDE}, got {}",
                self.input_size
            ));
        }
        if self.encoder_depth != 4 {
            return fail(format!(
                "encoder_depth must be 4 (output stride {OUTPUT_STRIDE}), got {}",
                self.encoder_depth
            ));
        }
        if self.encoder_width == 0 || self.decoder_base_channels == 0 || self.fusion_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        Ok(())
    }

    /// Encoder channels at strides 4, 8, 16 and 32.
    pub fn encoder_channels(&self) -> [usize; 4] {
        let w = self.encoder_width;
        [w, 2 * w, 4 * w, 8 * w]
    }

    /// Output channels of the five decoder blocks, from stride 16 up to full
    /// resolution.
    pub fn decoder_channels(&self) -> [usize; 5] {
        let b = self.decoder_base_channels;
        [
            4 * b,
            self.fusion_channels,
            b,
            (b / 2).max(1),
            (b / 4).max(1),
        ]
    }

    pub fn fusion_size(&self) -> usize {
        self.input_size / FUSION_STRIDE
    }
}

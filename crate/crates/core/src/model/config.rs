use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Each stage (the stem and every block) halves the length twice: a
/// stride-2 convolution followed by a 2/2 max-pool.
pub const STAGE_DOWNSAMPLE: usize = 4;
pub const CONV_STRIDE: usize = 2;
pub const POOL_SIZE: usize = 2;

/// Architecture hyperparameters of [`super::EcgNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EcgNetConfig {
    pub in_channels: usize,
    pub input_length: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub num_blocks: usize,
    pub total_downsample: usize,
    pub kernel_size: usize,
    pub gn_groups: usize,
    pub gn_eps: f64,
    /// Zero padded positions of the input and between stages and restrict
    /// group-norm statistics to valid positions. The logits then ignore the
    /// padding entirely and are invariant to grid-aligned re-placement of the
    /// valid span.
    pub mask_features: bool,
}

impl Default for EcgNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 8,
            input_length: 33792,
            num_classes: 9,
            stem_channels: 32,
            num_blocks: 4,
            total_downsample: 1024,
            kernel_size: 7,
            gn_groups: 8,
            gn_eps: 1e-5,
            mask_features: true,
        }
    }
}

impl EcgNetConfig {
    /// Scaled-down network for 8 x 2048 inputs (downsampling 64, 16 features).
    pub fn desk(num_classes: usize) -> Self {
        Self {
            input_length: 2048,
            num_classes,
            stem_channels: 4,
            num_blocks: 2,
            total_downsample: 64,
            gn_groups: 2,
            ..Self::default()
        }
    }

    /// Width of the pooled feature vector fed to the classifier.
    pub fn feature_dim(&self) -> usize {
        self.stem_channels << self.num_blocks
    }

    pub fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    /// Channels leaving stage `i` (0 is the stem).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.stem_channels << stage
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("input_length", self.input_length),
            ("num_classes", self.num_classes),
            ("stem_channels", self.stem_channels),
            ("total_downsample", self.total_downsample),
            ("kernel_size", self.kernel_size),
            ("gn_groups", self.gn_groups),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(format!("{name} must be positive")));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::param(format!(
                "kernel_size must be odd to keep lengths exact, got {}",
                self.kernel_size
            )));
        }
        let expected = STAGE_DOWNSAMPLE
            .checked_pow(self.num_blocks as u32 + 1)
            .ok_or_else(|| Error::param("num_blocks too large"))?;
        if self.total_downsample != expected {
            return Err(Error::param(format!(
                "total_downsample {} does not match {} blocks (expected {expected})",
                self.total_downsample, self.num_blocks
            )));
        }
        if self.input_length % self.total_downsample != 0 {
            return Err(Error::param(format!(
                "input_length {} is not divisible by total_downsample {}",
                self.input_length, self.total_downsample
            )));
        }
        if self.stem_channels % self.gn_groups != 0 {
            return Err(Error::param(format!(
                "stem_channels {} not divisible by gn_groups {}",
                self.stem_channels, self.gn_groups
            )));
        }
        if !(self.gn_eps > 0.0) {
            return Err(Error::param("gn_eps must be positive"));
        }
        Ok(())
    }
}

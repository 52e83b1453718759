use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch_mask::{PatchGrid, CHANNELS};

/// One masked convolution stage, finest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    /// Residual 3x3 conv blocks at this resolution.
    pub blocks: usize,
    pub dim: usize,
    /// Stride of the patch-merging conv that leaves this stage.
    pub downsample: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    #[default]
    Random,
    Blockwise,
    Focused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub mlp_ratio: usize,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    /// Empty for a plain patch-embedding encoder.
    pub conv_stages: Vec<ConvStage>,
    /// 1-based encoder layers whose visible tokens are summed into `E_v`.
    pub fusion_layers: Vec<usize>,
    pub teacher_dim: usize,
    pub visible_ratio: f64,
    pub masking_mode: MaskingMode,
    pub per_patch_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 128,
            encoder_depth: 6,
            encoder_heads: 4,
            mlp_ratio: 4,
            decoder_depth: 8,
            decoder_dim: 64,
            decoder_heads: 4,
            conv_stages: Vec::new(),
            fusion_layers: vec![3, 6],
            teacher_dim: 64,
            visible_ratio: 0.25,
            masking_mode: MaskingMode::Random,
            per_patch_norm: true,
        }
    }
}

impl ModelConfig {
    /// Two conv stages at 32x32 and 16x16 feeding the 8x8 token grid of the
    /// default 32x32 / p=4 layout (1x1-pixel stem).
    pub fn desk_conv_stages() -> Vec<ConvStage> {
        vec![
            ConvStage {
                blocks: 1,
                dim: 32,
                downsample: 2,
            },
            ConvStage {
                blocks: 1,
                dim: 64,
                downsample: 2,
            },
        ]
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::square(self.image_size, self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn stage_factors(&self) -> Vec<usize> {
        self.conv_stages.iter().map(|s| s.downsample).collect()
    }

    /// Side of the stem's square kernel when conv stages are present.
    pub fn stem_kernel(&self) -> usize {
        self.patch_size / self.stage_factors().iter().product::<usize>().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.grid()?;
        if self.encoder_depth == 0 || self.decoder_depth == 0 {
            return fail("encoder and decoder need at least one block".into());
        }
        for (dim, heads, what) in [
            (self.embed_dim, self.encoder_heads, "encoder"),
            (self.decoder_dim, self.decoder_heads, "decoder"),
        ] {
            if heads == 0 || dim % heads != 0 {
                return fail(format!("{what} width {dim} is not divisible by {heads} heads"));
            }
            if dim % 4 != 0 {
                return fail(format!("{what} width {dim} must be divisible by 4"));
            }
        }
        if self.mlp_ratio == 0 || self.teacher_dim == 0 {
            return fail("mlp_ratio and teacher_dim must be positive".into());
        }
        if !self.fusion_layers.contains(&self.encoder_depth)
            || self
                .fusion_layers
                .iter()
                .any(|&l| l == 0 || l > self.encoder_depth)
        {
            return fail(format!(
                "fusion layers {:?} must lie in 1..={} and include {}",
                self.fusion_layers, self.encoder_depth, self.encoder_depth
            ));
        }
        let mut sorted = self.fusion_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.fusion_layers.len() {
            return fail(format!("fusion layers {:?} repeat", self.fusion_layers));
        }
        if !(self.visible_ratio > 0.0 && self.visible_ratio < 1.0) {
            return fail(format!("visible ratio {} outside (0, 1)", self.visible_ratio));
        }
        if !self.conv_stages.is_empty() {
            let product: usize = self.stage_factors().iter().product();
            if self.conv_stages.iter().any(|s| s.dim == 0 || s.downsample == 0)
                || product == 0
                || !self.patch_size.is_multiple_of(product)
            {
                return fail(format!(
                    "conv stage factors {:?} must be positive and divide the patch size {}",
                    self.stage_factors(),
                    self.patch_size
                ));
            }
        }
        Ok(())
    }
}

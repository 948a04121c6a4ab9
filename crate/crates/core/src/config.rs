use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Toy,
    Paper,
    Custom,
}

/// How the CNN stream is merged into the ViT stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Gated dynamic fusion.
    Dfm,
    /// Static element-wise sum `F_ViT + F'_Res`.
    Sum,
    /// Static channel concatenation; doubles the head width.
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DfmMode {
    /// `α1·(ω⊙F_ViT) + α2·((1−ω)⊙F'_Res)`.
    PaperText,
    /// `α1·(ω⊙F_ViT) + α2·((1−ω)⊙F_ViT)`, the recombination equation as printed.
    VerbatimEq5,
}

/// Which optional components are wired into the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub fsa: bool,
    pub cnn_stream: bool,
    pub fusion: Fusion,
    pub dfm_mode: DfmMode,
}

impl Default for Architecture {
    fn default() -> Self {
        Self::full()
    }
}

impl Architecture {
    pub fn full() -> Self {
        Self {
            fsa: true,
            cnn_stream: true,
            fusion: Fusion::Dfm,
            dfm_mode: DfmMode::PaperText,
        }
    }

    /// Frozen ViT only.
    pub fn baseline() -> Self {
        Self {
            fsa: false,
            cnn_stream: false,
            ..Self::full()
        }
    }

    pub fn fsa_only() -> Self {
        Self {
            cnn_stream: false,
            ..Self::full()
        }
    }

    /// CNN stream merged by plain concatenation.
    pub fn cnn_stream_only() -> Self {
        Self {
            fsa: false,
            fusion: Fusion::Concat,
            ..Self::full()
        }
    }

    pub fn dfm_only() -> Self {
        Self {
            fsa: false,
            ..Self::full()
        }
    }

    pub fn uses_dfm(&self) -> bool {
        self.cnn_stream && self.fusion == Fusion::Dfm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_ratio: usize,
    /// Output channels of the three stride-2 CNN stages; the last is `C_res`.
    pub cnn_channels: [usize; 3],
    /// Spatial side of `F_Res`.
    pub cnn_grid: usize,
    /// Intermediate bilinear side inside the alignment upsampler.
    pub align_mid: usize,
    pub adapter_ratio: f64,
    pub adapter_scale_init: f64,
    pub gem_p: f64,
    pub arch: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            preset: Preset::Toy,
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            heads: 4,
            depth: 4,
            ffn_ratio: 4,
            cnn_channels: [24, 48, 96],
            cnn_grid: 4,
            align_mid: 6,
            adapter_ratio: 0.25,
            adapter_scale_init: 0.1,
            gem_p: 3.0,
            arch: Architecture::full(),
        }
    }

    /// ViT-B/14-sized graph at 224 px, for shape checks only.
    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            image_size: 224,
            patch_size: 14,
            embed_dim: 768,
            heads: 12,
            depth: 12,
            ffn_ratio: 4,
            cnn_channels: [256, 512, 1024],
            cnn_grid: 7,
            align_mid: 14,
            adapter_ratio: 0.5,
            adapter_scale_init: 0.1,
            gem_p: 3.0,
            arch: Architecture::full(),
        }
    }

    /// Very small graph used by the gradient-check suite.
    pub fn micro() -> Self {
        Self {
            preset: Preset::Custom,
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            heads: 2,
            depth: 2,
            ffn_ratio: 2,
            cnn_channels: [3, 4, 6],
            cnn_grid: 2,
            align_mid: 3,
            adapter_ratio: 0.5,
            adapter_scale_init: 0.1,
            gem_p: 3.0,
            arch: Architecture::full(),
        }
    }

    pub fn with_arch(mut self, arch: Architecture) -> Self {
        self.arch = arch;
        self
    }

    /// Patch-grid side `G`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn adapter_dim(&self) -> usize {
        (self.adapter_ratio * self.embed_dim as f64).ceil() as usize
    }

    pub fn gate_dim(&self) -> usize {
        self.embed_dim.div_ceil(4)
    }

    pub fn cnn_res_channels(&self) -> usize {
        self.cnn_channels[2]
    }

    /// Average-pool window after the three stride-2 stages.
    pub fn cnn_pool(&self) -> usize {
        (self.image_size / 8) / self.cnn_grid
    }

    /// Channel width of the fused map and the descriptor head.
    pub fn fused_dim(&self) -> usize {
        if self.arch.cnn_stream && self.arch.fusion == Fusion::Concat {
            2 * self.embed_dim
        } else {
            self.embed_dim
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        crate::head::REGIONS * self.fused_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 || self.ffn_ratio == 0 {
            return bad("depth and ffn ratio must be positive".into());
        }
        if !self.grid().is_multiple_of(2) {
            return bad(format!("patch grid {} must be even", self.grid()));
        }
        if !self.image_size.is_multiple_of(8) || self.cnn_grid == 0 || !(self.image_size / 8).is_multiple_of(self.cnn_grid) {
            return bad(format!(
                "CNN stages reduce {} px to {}, which does not pool to {}",
                self.image_size,
                self.image_size / 8,
                self.cnn_grid
            ));
        }
        if self.cnn_channels.contains(&0) {
            return bad("CNN channel counts must be positive".into());
        }
        if self.align_mid < self.cnn_grid || self.align_mid > self.grid() {
            return bad(format!(
                "alignment intermediate side {} must lie between {} and {}",
                self.align_mid,
                self.cnn_grid,
                self.grid()
            ));
        }
        if !(self.adapter_ratio > 0.0 && self.adapter_ratio <= 1.0) {
            return bad(format!("adapter ratio {} outside (0, 1]", self.adapter_ratio));
        }
        if !(self.gem_p >= 1.0) {
            return bad(format!("GeM power {} must be ≥ 1", self.gem_p));
        }
        if !self.fused_dim().is_multiple_of(self.heads) {
            return bad("fused width must be divisible by the head count".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
    }

    #[test]
    fn toy_dimensions() {
        let c = ModelConfig::toy();
        assert_eq!(c.grid(), 8);
        assert_eq!(c.tokens(), 65);
        assert_eq!(c.head_dim(), 16);
        assert_eq!(c.descriptor_dim(), 256);
        assert_eq!(c.cnn_pool(), 2);
    }

    #[test]
    fn paper_dimensions() {
        let c = ModelConfig::paper();
        assert_eq!(c.grid(), 16);
        assert_eq!(c.tokens(), 257);
        assert_eq!(c.gate_dim(), 192);
        assert_eq!(c.cnn_pool(), 4);
    }

    #[test]
    fn inconsistent_configs_rejected() {
        let mut c = ModelConfig::toy();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.align_mid = 9;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.patch_size = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(ModelConfig::toy()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }

    #[test]
    fn concat_doubles_head_width() {
        let c = ModelConfig::toy().with_arch(Architecture::cnn_stream_only());
        assert_eq!(c.fused_dim(), 128);
        assert_eq!(c.descriptor_dim(), 512);
    }
}

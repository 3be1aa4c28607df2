use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VlpError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    Vision,
    Text,
    Fusion,
}

impl Encoder {
    pub const ALL: [Encoder; 3] = [Encoder::Vision, Encoder::Text, Encoder::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Encoder::Vision => "vision",
            Encoder::Text => "text",
            Encoder::Fusion => "fusion",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Encoder::Vision => 0,
            Encoder::Text => 1,
            Encoder::Fusion => 2,
        }
    }
}

impl fmt::Display for Encoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Encoder {
    type Err = VlpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vision" => Ok(Encoder::Vision),
            "text" => Ok(Encoder::Text),
            "fusion" => Ok(Encoder::Fusion),
            other => Err(VlpError::InvalidArgument(format!(
                "unknown encoder {other:?}"
            ))),
        }
    }
}

/// Per-layer widths that differ from the encoder defaults after structural removal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub heads: usize,
    pub cross_heads: usize,
    pub ffn: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub is_cross_modal: bool,
    /// Empty for an unpruned encoder; otherwise one entry per layer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layer_shapes: Vec<LayerShape>,
}

impl EncoderConfig {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        model_dim: usize,
        ffn_dim: usize,
        is_cross_modal: bool,
    ) -> Self {
        Self {
            num_layers,
            num_heads,
            model_dim,
            ffn_dim,
            is_cross_modal,
            layer_shapes: Vec::new(),
        }
    }

    /// d_k, the per-head width. Structural removal keeps it fixed.
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn layer_shape(&self, layer: usize) -> LayerShape {
        self.layer_shapes.get(layer).copied().unwrap_or(LayerShape {
            heads: self.num_heads,
            cross_heads: if self.is_cross_modal {
                self.num_heads
            } else {
                0
            },
            ffn: self.ffn_dim,
        })
    }

    pub fn is_pruned(&self) -> bool {
        !self.layer_shapes.is_empty()
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(VlpError::Config(format!(
                "{name}: model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !self.layer_shapes.is_empty() && self.layer_shapes.len() != self.num_layers {
            return Err(VlpError::Config(format!(
                "{name}: {} layer shapes for {} layers",
                self.layer_shapes.len(),
                self.num_layers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmConfig {
    pub vision: EncoderConfig,
    pub text: EncoderConfig,
    pub fusion: EncoderConfig,
    /// Image patches per side.
    pub patch_grid: usize,
    /// Pixels per patch side.
    pub patch_size: usize,
    pub image_channels: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Width of the contrastive projection space.
    pub embed_dim: usize,
    pub num_classes: usize,
    pub pad_token: usize,
}

/// Named model sizes. Every preset has a teacher with twice the student's depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Width 8, two heads; teacher 4/2/2 layers, student 2/1/1.
    Tiny,
    /// Width 32, four heads; teacher 4/2/2, student 2/1/1.
    Mini,
    /// Width 32, four heads; teacher 12/6/6, student 6/3/3.
    Small,
    /// Width 64, four heads; teacher 12/6/6, student 6/3/3.
    Desk,
}

impl FromStr for Preset {
    type Err = VlpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "mini" => Ok(Preset::Mini),
            "small" => Ok(Preset::Small),
            "desk" => Ok(Preset::Desk),
            other => Err(VlpError::InvalidArgument(format!(
                "unknown preset {other:?}"
            ))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Mini => "mini",
            Preset::Small => "small",
            Preset::Desk => "desk",
        }
    }

    fn dims(self) -> (usize, usize, usize, [usize; 3]) {
        // (model_dim, heads, ffn, teacher depths)
        match self {
            Preset::Tiny => (8, 2, 16, [4, 2, 2]),
            Preset::Mini => (32, 4, 64, [4, 2, 2]),
            Preset::Small => (32, 4, 64, [12, 6, 6]),
            Preset::Desk => (64, 4, 128, [12, 6, 6]),
        }
    }

    pub fn teacher(self) -> VlmConfig {
        let (d, h, f, depth) = self.dims();
        VlmConfig::with_depths(d, h, f, depth)
    }

    pub fn student(self) -> VlmConfig {
        let (d, h, f, depth) = self.dims();
        VlmConfig::with_depths(d, h, f, depth.map(|l| l / 2))
    }
}

impl VlmConfig {
    /// Shared layout (16×16 RGB images in 4×4 patches, 64-token vocabulary, 8-token texts)
    /// with the given width and per-encoder depths.
    pub fn with_depths(model_dim: usize, heads: usize, ffn: usize, depths: [usize; 3]) -> Self {
        Self {
            vision: EncoderConfig::new(depths[0], heads, model_dim, ffn, false),
            text: EncoderConfig::new(depths[1], heads, model_dim, ffn, false),
            fusion: EncoderConfig::new(depths[2], heads, model_dim, ffn, true),
            patch_grid: 4,
            patch_size: 4,
            image_channels: 3,
            vocab_size: 64,
            max_text_len: 8,
            embed_dim: (model_dim / 2).max(4),
            num_classes: 12,
            pad_token: 0,
        }
    }

    pub fn encoder(&self, e: Encoder) -> &EncoderConfig {
        match e {
            Encoder::Vision => &self.vision,
            Encoder::Text => &self.text,
            Encoder::Fusion => &self.fusion,
        }
    }

    pub fn encoder_mut(&mut self, e: Encoder) -> &mut EncoderConfig {
        match e {
            Encoder::Vision => &mut self.vision,
            Encoder::Text => &mut self.text,
            Encoder::Fusion => &mut self.fusion,
        }
    }

    pub fn layer_counts(&self) -> [usize; 3] {
        [
            self.vision.num_layers,
            self.text.num_layers,
            self.fusion.num_layers,
        ]
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }

    pub fn model_dim(&self) -> usize {
        self.vision.model_dim
    }

    pub fn validate(&self) -> Result<()> {
        for e in Encoder::ALL {
            self.encoder(e).validate(e.name())?;
        }
        let d = self.vision.model_dim;
        if self.text.model_dim != d || self.fusion.model_dim != d {
            return Err(VlpError::Config("all encoders must share model_dim".into()));
        }
        if self.vision.is_cross_modal || self.text.is_cross_modal || !self.fusion.is_cross_modal {
            return Err(VlpError::Config(
                "only the fusion encoder is cross-modal".into(),
            ));
        }
        if self.pad_token >= self.vocab_size || self.max_text_len == 0 || self.patch_grid == 0 {
            return Err(VlpError::Config("degenerate text or image layout".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_halve_depth_and_keep_width() {
        for p in [Preset::Tiny, Preset::Mini, Preset::Small, Preset::Desk] {
            let t = p.teacher();
            let s = p.student();
            t.validate().unwrap();
            s.validate().unwrap();
            assert_eq!(t.model_dim(), s.model_dim());
            for (a, b) in t.layer_counts().iter().zip(s.layer_counts()) {
                assert_eq!(*a, 2 * b);
            }
        }
        assert_eq!(Preset::Desk.teacher().layer_counts(), [12, 6, 6]);
        assert_eq!(Preset::Desk.student().layer_counts(), [6, 3, 3]);
    }

    #[test]
    fn head_dim_divides() {
        let mut c = Preset::Tiny.student();
        c.text.num_heads = 3;
        assert!(c.validate().is_err());
    }
}

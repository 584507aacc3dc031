use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::DType;
use crate::raster::RasterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Gru,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinateMode {
    #[default]
    Absolute,
    Offset,
}

/// Residual stride-2 blocks; `widths[i]` is the channel count of block `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEncoderConfig {
    pub widths: Vec<usize>,
    #[serde(default)]
    pub pooling: Pooling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqDecoderConfig {
    #[serde(default)]
    pub cell: CellKind,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum SeqEncoderConfig {
    Rnn {
        cell: CellKind,
        layers: usize,
        hidden: usize,
    },
    Transformer {
        layers: usize,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
    },
}

impl SeqEncoderConfig {
    pub fn output_dim(&self) -> usize {
        match self {
            SeqEncoderConfig::Rnn { hidden, .. } => *hidden,
            SeqEncoderConfig::Transformer { dim, .. } => *dim,
        }
    }

    pub fn layers(&self) -> usize {
        match self {
            SeqEncoderConfig::Rnn { layers, .. } | SeqEncoderConfig::Transformer { layers, .. } => *layers,
        }
    }
}

/// Fully connected projection to `channels[0] x start x start`, then one
/// ×2 transposed convolution per entry of `channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvDecoderConfig {
    pub start_resolution: usize,
    pub channels: Vec<usize>,
}

impl ConvDecoderConfig {
    pub fn output_resolution(&self) -> usize {
        self.start_resolution << self.channels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub image_encoder: ImageEncoderConfig,
    pub seq_decoder: SeqDecoderConfig,
    pub seq_encoder: SeqEncoderConfig,
    pub conv_decoder: ConvDecoderConfig,
    #[serde(default)]
    pub coordinate_mode: CoordinateMode,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
}

fn default_dtype() -> DType {
    DType::F32
}

impl Default for ModelConfig {
    /// Desk-scale defaults for a 64×64 canvas.
    fn default() -> Self {
        Self {
            latent_dim: 128,
            image_encoder: ImageEncoderConfig {
                widths: vec![16, 32, 64, 128],
                pooling: Pooling::Max,
            },
            seq_decoder: SeqDecoderConfig {
                cell: CellKind::Gru,
                hidden: 128,
            },
            seq_encoder: SeqEncoderConfig::Transformer {
                layers: 2,
                dim: 128,
                heads: 4,
                mlp_dim: 256,
            },
            conv_decoder: ConvDecoderConfig {
                start_resolution: 4,
                channels: vec![64, 32, 16, 8],
            },
            coordinate_mode: CoordinateMode::Absolute,
            dtype: DType::F32,
        }
    }
}

impl ModelConfig {
    /// Small enough for CPU overfitting runs on a 32×32 canvas.
    pub fn tiny() -> Self {
        Self {
            latent_dim: 32,
            image_encoder: ImageEncoderConfig {
                widths: vec![8, 16, 32],
                pooling: Pooling::Max,
            },
            seq_decoder: SeqDecoderConfig {
                cell: CellKind::Gru,
                hidden: 64,
            },
            seq_encoder: SeqEncoderConfig::Rnn {
                cell: CellKind::Lstm,
                layers: 1,
                hidden: 32,
            },
            conv_decoder: ConvDecoderConfig {
                start_resolution: 4,
                channels: vec![16, 8, 8],
            },
            coordinate_mode: CoordinateMode::Absolute,
            dtype: DType::F32,
        }
    }

    /// Backbone sizes reported for full-scale training (ResNet-50-width
    /// stages, GRU 512, 8-layer Transformer 768/2048/12 heads).
    pub fn paper_scale() -> Self {
        Self {
            latent_dim: 2048,
            image_encoder: ImageEncoderConfig {
                widths: vec![256, 512, 1024, 2048],
                pooling: Pooling::Max,
            },
            seq_decoder: SeqDecoderConfig {
                cell: CellKind::Gru,
                hidden: 512,
            },
            seq_encoder: SeqEncoderConfig::Transformer {
                layers: 8,
                dim: 768,
                heads: 12,
                mlp_dim: 2048,
            },
            conv_decoder: ConvDecoderConfig {
                start_resolution: 4,
                channels: vec![512, 256, 128, 64, 32, 16],
            },
            coordinate_mode: CoordinateMode::Absolute,
            dtype: DType::F32,
        }
    }

    pub fn validate_vectorization(&self, raster: &RasterConfig) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModelConfig(m));
        let widths = &self.image_encoder.widths;
        if widths.is_empty() || widths.contains(&0) {
            return bad("image encoder needs at least one block with positive width".into());
        }
        if *widths.last().unwrap() != self.latent_dim {
            return bad(format!(
                "image encoder output width {} differs from latent_dim {}",
                widths.last().unwrap(),
                self.latent_dim
            ));
        }
        if self.seq_decoder.hidden == 0 {
            return bad("decoder hidden size must be positive".into());
        }
        let stride = 1usize << widths.len();
        if raster.height < stride || raster.width < stride {
            return bad(format!(
                "canvas {}x{} too small for {} stride-2 blocks",
                raster.height,
                raster.width,
                widths.len()
            ));
        }
        Ok(())
    }

    pub fn validate_rasterization(&self, raster: &RasterConfig) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModelConfig(m));
        if self.seq_encoder.output_dim() != self.latent_dim {
            return bad(format!(
                "sequence encoder width {} differs from latent_dim {}",
                self.seq_encoder.output_dim(),
                self.latent_dim
            ));
        }
        if self.seq_encoder.layers() == 0 {
            return bad("sequence encoder needs at least one layer".into());
        }
        if let SeqEncoderConfig::Transformer { dim, heads, .. } = &self.seq_encoder {
            if *heads == 0 || dim % heads != 0 {
                return bad(format!("model dim {dim} not divisible by {heads} heads"));
            }
        }
        let res = self.conv_decoder.output_resolution();
        if res != raster.height || res != raster.width {
            return bad(format!(
                "conv decoder produces {res}x{res}, canvas is {}x{}",
                raster.height, raster.width
            ));
        }
        Ok(())
    }
}

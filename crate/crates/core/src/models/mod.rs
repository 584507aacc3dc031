//! The four trainable components and the two pretext pairings built from
//! them. Closed-form parameter counts are documented on each layer type in
//! [`layers`] and on [`seq_encoder`].

pub mod config;
pub mod conv_decoder;
pub mod image_encoder;
pub mod layers;
pub mod seq_decoder;
pub mod seq_encoder;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    CellKind, ConvDecoderConfig, CoordinateMode, ImageEncoderConfig, ModelConfig, Pooling, SeqDecoderConfig,
    SeqEncoderConfig,
};
pub use conv_decoder::ConvDecoder;
pub use image_encoder::{ImageEncoder, ImageEncoding};
pub use seq_decoder::{DecodeMode, SeqDecoder, START_TOKEN};
pub use seq_encoder::{SeqEncoder, SeqEncoding};

use crate::error::Result;
use crate::nn::{DType, Init, ParameterStore};
use crate::raster::RasterConfig;

pub const IMAGE_ENCODER: &str = "image_encoder";
pub const SEQ_DECODER: &str = "seq_decoder";
pub const SEQ_ENCODER: &str = "seq_encoder";
pub const CONV_DECODER: &str = "conv_decoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Vector,
}

/// Channel-major activations of the last encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub values: Vec<f64>,
    pub source: Modality,
}

/// Image encoder + sequence decoder (image → strokes).
#[derive(Debug, Clone)]
pub struct VectorizationModel {
    pub encoder: ImageEncoder,
    pub decoder: SeqDecoder,
}

impl VectorizationModel {
    pub fn new(cfg: &ModelConfig, raster: &RasterConfig) -> Result<Self> {
        cfg.validate_vectorization(raster)?;
        Ok(Self {
            encoder: ImageEncoder::new(IMAGE_ENCODER, &cfg.image_encoder, raster.channels, raster.height, raster.width),
            decoder: SeqDecoder::new(SEQ_DECODER, &cfg.seq_decoder, cfg.latent_dim),
        })
    }

    pub fn init_params(&self, seed: u64, dtype: DType) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng, dtype);
        let mut store = ParameterStore::new();
        self.encoder.init(&mut store, &mut init)?;
        self.decoder.init(&mut store, &mut init)?;
        Ok(store)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }
}

/// Sequence encoder + convolutional decoder (strokes → image).
#[derive(Debug, Clone)]
pub struct RasterizationModel {
    pub encoder: SeqEncoder,
    pub decoder: ConvDecoder,
}

impl RasterizationModel {
    pub fn new(cfg: &ModelConfig, raster: &RasterConfig, t_max: usize) -> Result<Self> {
        cfg.validate_rasterization(raster)?;
        Ok(Self {
            encoder: SeqEncoder::new(SEQ_ENCODER, &cfg.seq_encoder, t_max),
            decoder: ConvDecoder::new(CONV_DECODER, &cfg.conv_decoder, cfg.latent_dim, raster.channels),
        })
    }

    pub fn init_params(&self, seed: u64, dtype: DType) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng, dtype);
        let mut store = ParameterStore::new();
        self.encoder.init(&mut store, &mut init)?;
        self.decoder.init(&mut store, &mut init)?;
        Ok(store)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }
}

#[cfg(test)]
mod tests;

use rand::Rng;

use super::config::{ImageEncoderConfig, Pooling};
use super::layers::Conv2d;
use super::{FeatureMap, LatentVector, Modality};
use crate::error::{Error, Result};
use crate::nn::{Init, ParameterStore, Tape, Tensor, Var};
use crate::raster::RasterImage;

/// One residual stage: `relu(conv3x3(relu(conv3x3/2(x))) + conv1x1/2(x))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub skip: Conv2d,
}

impl ResBlock {
    pub(crate) fn new(name: &str, cin: usize, cout: usize) -> Self {
        let conv = |suffix: &str, cin, kernel, stride, pad| Conv2d {
            name: format!("{name}.{suffix}"),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad,
        };
        Self {
            conv_a: conv("conv_a", cin, 3, 2, 1),
            conv_b: conv("conv_b", cout, 3, 1, 1),
            skip: conv("skip", cin, 1, 2, 0),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv_a.param_count() + self.conv_b.param_count() + self.skip.param_count()
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Var {
        let a = self.conv_a.forward(tape, store, x);
        let a = tape.relu(a);
        let a = self.conv_b.forward(tape, store, a);
        let s = self.skip.forward(tape, store, x);
        let y = tape.add(a, s);
        tape.relu(y)
    }
}

/// Stacked stride-2 residual blocks followed by global pooling.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub prefix: String,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub blocks: Vec<ResBlock>,
    pub pooling: Pooling,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    /// Output of every block, shallowest first; the last is the feature map.
    pub blocks: Vec<Var>,
    pub feature_map: Var,
    /// `[B, d]` pooled latent.
    pub latent: Var,
}

impl ImageEncoder {
    pub fn new(prefix: &str, cfg: &ImageEncoderConfig, in_channels: usize, height: usize, width: usize) -> Self {
        let mut cin = in_channels;
        let blocks = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let b = ResBlock::new(&format!("{prefix}.block{i}"), cin, w);
                cin = w;
                b
            })
            .collect();
        Self {
            prefix: prefix.to_string(),
            in_channels,
            height,
            width,
            blocks,
            pooling: cfg.pooling,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.conv_b.out_channels)
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Channel count of block `i` (0-based) output.
    pub fn block_width(&self, i: usize) -> usize {
        self.blocks[i].conv_b.out_channels
    }

    /// Name prefixes of the first `depth` blocks (clamped to the block count).
    pub fn frozen_prefixes(&self, depth: usize) -> Vec<String> {
        (0..depth.min(self.blocks.len()))
            .map(|i| format!("{}.block{i}.", self.prefix))
            .collect()
    }

    /// Spatial side of the feature map after `blocks` stride-2 stages.
    pub fn feature_size(&self) -> (usize, usize) {
        let shrink = |mut n: usize| {
            for _ in &self.blocks {
                n = (n - 1) / 2 + 1;
            }
            n
        };
        (shrink(self.height), shrink(self.width))
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        for b in &self.blocks {
            b.conv_a.init(store, init)?;
            b.conv_b.init(store, init)?;
            b.skip.init(store, init)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ResBlock::param_count).sum()
    }

    pub fn pool(&self, tape: &mut Tape, x: Var) -> Var {
        match self.pooling {
            Pooling::Max => tape.global_max_pool(x),
            Pooling::Avg => tape.global_avg_pool(x),
        }
    }

    /// Stacks images into a `[B, C, H, W]` tensor after checking dimensions.
    pub fn batch_tensor(&self, images: &[&RasterImage]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.in_channels * self.height * self.width);
        for img in images {
            if (img.channels, img.height, img.width) != (self.in_channels, self.height, self.width) {
                return Err(Error::ShapeMismatch(format!(
                    "image {}x{}x{} but encoder expects {}x{}x{}",
                    img.height, img.width, img.channels, self.height, self.width, self.in_channels
                )));
            }
            data.extend(img.to_chw());
        }
        Ok(Tensor::new(
            vec![images.len(), self.in_channels, self.height, self.width],
            data,
        ))
    }

    /// `x` is `[B, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<ImageEncoding> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != [self.in_channels, self.height, self.width] {
            return Err(Error::ShapeMismatch(format!(
                "encoder input {shape:?}, expected [B, {}, {}, {}]",
                self.in_channels, self.height, self.width
            )));
        }
        let mut h = x;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = b.forward(tape, store, h);
            outs.push(h);
        }
        let latent = self.pool(tape, h);
        Ok(ImageEncoding {
            blocks: outs,
            feature_map: h,
            latent,
        })
    }

    /// Inference on one image.
    pub fn encode(&self, store: &ParameterStore, image: &RasterImage) -> Result<(FeatureMap, LatentVector)> {
        let mut tape = Tape::new();
        let x = tape.constant(self.batch_tensor(&[image])?);
        let enc = self.forward(&mut tape, store, x)?;
        let fm = tape.value(enc.feature_map);
        let feature_map = FeatureMap {
            channels: fm.shape[1],
            height: fm.shape[2],
            width: fm.shape[3],
            data: fm.data.clone(),
        };
        let latent = LatentVector {
            values: tape.value(enc.latent).data.clone(),
            source: Modality::Image,
        };
        Ok((feature_map, latent))
    }
}

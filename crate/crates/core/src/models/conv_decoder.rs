use rand::Rng;

use super::config::ConvDecoderConfig;
use super::layers::{ConvTranspose2d, Linear};
use crate::error::{Error, Result};
use crate::nn::{Init, ParameterStore, Tape, Tensor, Var};

/// `fc -> relu -> reshape [c0, s, s] -> (convT x2 -> relu)* -> convT x2 -> sigmoid`.
#[derive(Debug, Clone)]
pub struct ConvDecoder {
    pub prefix: String,
    pub latent_dim: usize,
    pub start_resolution: usize,
    pub out_channels: usize,
    pub fc: Linear,
    pub stages: Vec<ConvTranspose2d>,
}

impl ConvDecoder {
    pub fn new(prefix: &str, cfg: &ConvDecoderConfig, latent_dim: usize, out_channels: usize) -> Self {
        let s = cfg.start_resolution;
        let c0 = cfg.channels.first().copied().unwrap_or(out_channels);
        let stages = (0..cfg.channels.len())
            .map(|i| ConvTranspose2d {
                name: format!("{prefix}.up{i}"),
                in_channels: cfg.channels[i],
                out_channels: cfg.channels.get(i + 1).copied().unwrap_or(out_channels),
            })
            .collect();
        Self {
            prefix: prefix.to_string(),
            latent_dim,
            start_resolution: s,
            out_channels,
            fc: Linear::new(format!("{prefix}.fc"), latent_dim, c0 * s * s),
            stages,
        }
    }

    pub fn output_resolution(&self) -> usize {
        self.start_resolution << self.stages.len()
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        self.fc.init(store, init)?;
        self.stages.iter().try_for_each(|s| s.init(store, init))
    }

    pub fn param_count(&self) -> usize {
        self.fc.param_count() + self.stages.iter().map(ConvTranspose2d::param_count).sum::<usize>()
    }

    /// `[B, d] -> [B, C, H, W]` with values in (0, 1).
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, latent: Var) -> Result<Var> {
        let shape = tape.shape(latent).to_vec();
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "conv decoder latent {shape:?}, expected [B, {}]",
                self.latent_dim
            )));
        }
        let s = self.start_resolution;
        let c0 = self.fc.outputs / (s * s);
        let h = self.fc.forward(tape, store, latent);
        let h = tape.relu(h);
        let mut h = tape.reshape(h, &[shape[0], c0, s, s]);
        for (i, st) in self.stages.iter().enumerate() {
            h = st.forward(tape, store, h);
            if i + 1 < self.stages.len() {
                h = tape.relu(h);
            }
        }
        Ok(tape.sigmoid(h))
    }

    pub fn decode(&self, store: &ParameterStore, latent: &Tensor) -> Result<Tensor> {
        if !latent.is_finite() {
            return Err(Error::ShapeMismatch("conv decoder latent has non-finite values".into()));
        }
        let mut tape = Tape::new();
        let l = tape.constant(latent.clone());
        let out = self.forward(&mut tape, store, l)?;
        Ok(tape.value(out).clone())
    }
}

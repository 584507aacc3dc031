//! Word recognition on synthetic glyph words: an offline (image) or online
//! (stroke) bidirectional-LSTM encoder feeding an attentional GRU character
//! decoder, the image-encoder vectorization pretext, and Word Recognition
//! Accuracy with optional lexicon correction.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::losses::{vectorization_loss_with_grad, CoordPenalty, PointPrediction};
use crate::models::image_encoder::ResBlock;
use crate::models::layers::{BiRnn, Linear, RnnCell};
use crate::models::{CellKind, CoordinateMode, SeqDecoder, SeqDecoderConfig};
use crate::nn::{adam_step, AdamConfig, DType, Init, ParameterStore, Tape, Tensor, Var};
use crate::pretrain::sequence_rows;
use crate::raster::{RasterConfig, RasterImage};

pub const HW_IMAGE_ENCODER: &str = "hw_image_encoder";
pub const HW_ONLINE_ENCODER: &str = "hw_online_encoder";
pub const HW_DECODER: &str = "hw_decoder";
pub const HW_SEQ_DECODER: &str = "hw_seq_decoder";

const MASKED: f64 = -1e9;

// ---- vocabulary --------------------------------------------------------

/// Characters plus the three specials. Token ids: `<pad>` 0, `<start>` 1,
/// `<end>` 2, then the characters in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    chars: Vec<char>,
}

impl CharVocab {
    pub const PAD: usize = 0;
    pub const START: usize = 1;
    pub const END: usize = 2;
    const SPECIALS: usize = 3;

    pub fn new(chars: &str) -> Result<Self> {
        let chars: Vec<char> = chars.chars().collect();
        if chars.is_empty() {
            return Err(Error::EmptyAlphabet);
        }
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::InvalidSpec(format!("duplicate character {c:?} in vocabulary")));
            }
            if c.is_whitespace() || c.is_control() {
                return Err(Error::InvalidSpec(format!("character {c:?} cannot be a vocabulary entry")));
            }
        }
        Ok(Self { chars })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Total token count including specials.
    pub fn len(&self) -> usize {
        self.chars.len() + Self::SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + Self::SPECIALS)
    }

    /// Character ids of `text` (no specials).
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.token(c)
                    .ok_or_else(|| Error::InvalidSpec(format!("character {c:?} of {text:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Characters up to the first `<end>`; other specials are skipped.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != Self::END)
            .filter(|&&t| t >= Self::SPECIALS)
            .filter_map(|&t| self.chars.get(t - Self::SPECIALS))
            .collect()
    }
}

// ---- configuration -----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandwritingConfig {
    /// Channel widths of the stride-2 residual stages.
    pub conv_widths: Vec<usize>,
    /// Hidden size per direction of the 2-layer image-feature BLSTM and of
    /// the decoder's BLSTM.
    pub rnn_hidden: usize,
    pub online_layers: usize,
    pub online_hidden: usize,
    pub decoder_hidden: usize,
    pub attention_dim: usize,
    pub embed_dim: usize,
    /// Greedy decoding stops after this many characters.
    pub max_len: usize,
    /// Padded stroke length for the online encoder and the pretext decoder.
    pub t_max: usize,
    pub dtype: DType,
}

impl Default for HandwritingConfig {
    fn default() -> Self {
        Self {
            conv_widths: vec![16, 32, 32],
            rnn_hidden: 32,
            online_layers: 4,
            online_hidden: 32,
            decoder_hidden: 64,
            attention_dim: 32,
            embed_dim: 16,
            max_len: 8,
            t_max: 64,
            dtype: DType::F64,
        }
    }
}

impl HandwritingConfig {
    pub fn tiny() -> Self {
        Self {
            conv_widths: vec![8, 8, 8],
            rnn_hidden: 8,
            online_layers: 2,
            online_hidden: 8,
            decoder_hidden: 16,
            attention_dim: 8,
            embed_dim: 8,
            max_len: 6,
            t_max: 48,
            dtype: DType::F64,
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.conv_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("rnn_hidden", self.rnn_hidden),
            ("online_layers", self.online_layers),
            ("online_hidden", self.online_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("attention_dim", self.attention_dim),
            ("embed_dim", self.embed_dim),
            ("max_len", self.max_len),
            ("t_max", self.t_max),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::InvalidModelConfig(format!("{name} must be positive")));
            }
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(Error::InvalidModelConfig("conv_widths must be nonempty and positive".into()));
        }
        Ok(())
    }
}

// ---- encoders ----------------------------------------------------------

/// Graph nodes of an encoded batch.
#[derive(Debug, Clone)]
pub struct HwEncoding {
    /// One `[B, D]` node per position, left to right.
    pub features: Vec<Var>,
    /// Per position, per row: 1 for valid, 0 for padding.
    pub masks: Vec<Vec<f64>>,
    /// `[B, D]`: last forward state concatenated with the last backward state.
    pub latent: Var,
}

fn run_stack(
    layers: &[BiRnn],
    tape: &mut Tape,
    store: &ParameterStore,
    mut inputs: Vec<Var>,
    masks: Vec<Vec<f64>>,
) -> HwEncoding {
    let mut latent = inputs[0];
    for layer in layers {
        let (outs, last) = layer.run(tape, store, &inputs, &masks);
        inputs = outs;
        latent = last;
    }
    HwEncoding {
        features: inputs,
        masks,
        latent,
    }
}

/// Residual conv stages, mean over the height axis, then a 2-layer BLSTM
/// over the resulting columns.
#[derive(Debug, Clone)]
pub struct HandwritingImageEncoder {
    pub prefix: String,
    pub channels: usize,
    pub height: usize,
    pub blocks: Vec<ResBlock>,
    pub rnn: Vec<BiRnn>,
}

impl HandwritingImageEncoder {
    pub fn new(prefix: &str, cfg: &HandwritingConfig, channels: usize, height: usize) -> Self {
        let mut cin = channels;
        let blocks = cfg
            .conv_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let b = ResBlock::new(&format!("{prefix}.block{i}"), cin, w);
                cin = w;
                b
            })
            .collect();
        let rnn = (0..2)
            .map(|i| {
                let inputs = if i == 0 { cin } else { 2 * cfg.rnn_hidden };
                BiRnn::new(&format!("{prefix}.blstm{i}"), CellKind::Lstm, inputs, cfg.rnn_hidden)
            })
            .collect();
        Self {
            prefix: prefix.to_string(),
            channels,
            height,
            blocks,
            rnn,
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.blocks.len()
    }

    pub fn output_dim(&self) -> usize {
        self.rnn[1].output_dim()
    }

    /// Length of the feature sequence for an image of this width.
    pub fn sequence_len(&self, width: usize) -> usize {
        width / self.stride()
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        for b in &self.blocks {
            b.conv_a.init(store, init)?;
            b.conv_b.init(store, init)?;
            b.skip.init(store, init)?;
        }
        self.rnn.iter().try_for_each(|r| r.init(store, init))
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ResBlock::param_count).sum::<usize>()
            + self.rnn.iter().map(BiRnn::param_count).sum::<usize>()
    }

    fn batch_tensor(&self, images: &[&RasterImage]) -> Result<Tensor> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        let width = first.width;
        for img in images {
            if img.height != self.height {
                return Err(Error::BadAspect {
                    found: img.height,
                    expected: self.height,
                });
            }
            if img.channels != self.channels {
                return Err(Error::ShapeMismatch(format!(
                    "image has {} channels, encoder expects {}",
                    img.channels, self.channels
                )));
            }
            if img.width != width || width % self.stride() != 0 || width == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "batch widths must agree and be positive multiples of {} (got {} and {width})",
                    self.stride(),
                    img.width
                )));
            }
        }
        let data = images.iter().flat_map(|img| img.to_chw()).collect();
        Ok(Tensor::new(vec![images.len(), self.channels, self.height, width], data))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, images: &[&RasterImage]) -> Result<HwEncoding> {
        let x = tape.constant(self.batch_tensor(images)?);
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, store, h);
        }
        let w = tape.shape(h)[3];
        let columns: Vec<Var> = (0..w).map(|c| tape.column_mean(h, c)).collect();
        let masks = vec![vec![1.0; images.len()]; w];
        Ok(run_stack(&self.rnn, tape, store, columns, masks))
    }
}

/// Stacked BLSTM over padded five-element stroke rows.
#[derive(Debug, Clone)]
pub struct OnlineEncoder {
    pub prefix: String,
    pub layers: Vec<BiRnn>,
}

impl OnlineEncoder {
    pub fn new(prefix: &str, cfg: &HandwritingConfig) -> Self {
        let layers = (0..cfg.online_layers)
            .map(|i| {
                let inputs = if i == 0 { 5 } else { 2 * cfg.online_hidden };
                BiRnn::new(&format!("{prefix}.blstm{i}"), CellKind::Lstm, inputs, cfg.online_hidden)
            })
            .collect();
        Self {
            prefix: prefix.to_string(),
            layers,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(5, BiRnn::output_dim)
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        self.layers.iter().try_for_each(|r| r.init(store, init))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(BiRnn::param_count).sum()
    }

    /// `rows[b]` and `masks[b]` share one length across the batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        rows: &[Vec<[f64; 5]>],
        masks: &[Vec<bool>],
    ) -> Result<HwEncoding> {
        let t = rows.first().ok_or(Error::EmptyDataset)?.len();
        if rows.iter().any(|r| r.len() != t) || masks.len() != rows.len() || masks.iter().any(|m| m.len() != t) {
            return Err(Error::LengthMismatch("online batch rows and masks must share one length".into()));
        }
        if t == 0 || masks.iter().any(|m| !m.contains(&true)) {
            return Err(Error::EmptyMask);
        }
        let inputs = (0..t)
            .map(|i| {
                let step: Vec<[f64; 5]> = rows.iter().map(|r| r[i]).collect();
                tape.constant(Tensor::from_rows(&step))
            })
            .collect();
        let step_masks = (0..t)
            .map(|i| masks.iter().map(|m| if m[i] { 1.0 } else { 0.0 }).collect())
            .collect();
        Ok(run_stack(&self.layers, tape, store, inputs, step_masks))
    }
}

// ---- attentional decoder -----------------------------------------------

/// BLSTM over the encoder features, then a GRU that reads the previous
/// character and an additive-attention context each step.
///
/// `score_j = v · tanh(W_q s_{t-1} + W_k a_j)`, `α = softmax(score)`,
/// `c = Σ α_j a_j`, `s_t = GRU([E y_{t-1}, c], s_{t-1})`,
/// `logits = W_o [s_t, c]`.
#[derive(Debug, Clone)]
pub struct AttentionDecoder {
    pub prefix: String,
    pub vocab_size: usize,
    pub blstm: BiRnn,
    pub init_state: Linear,
    pub embed: Linear,
    pub query: Linear,
    pub key: Linear,
    pub score: Linear,
    pub gru: RnnCell,
    pub out: Linear,
}

/// Decoder state after attending over a batch's features.
pub struct Attending {
    annotations: Vec<Var>,
    keys: Vec<Var>,
    bias: Option<Tensor>,
    state: Var,
    batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// Attention weights per emitted step.
    pub attention: Vec<Vec<f64>>,
}

impl AttentionDecoder {
    pub fn new(prefix: &str, cfg: &HandwritingConfig, feature_dim: usize, vocab_size: usize) -> Self {
        let ann = 2 * cfg.rnn_hidden;
        Self {
            prefix: prefix.to_string(),
            vocab_size,
            blstm: BiRnn::new(&format!("{prefix}.blstm"), CellKind::Lstm, feature_dim, cfg.rnn_hidden),
            init_state: Linear::new(format!("{prefix}.init"), ann, cfg.decoder_hidden),
            embed: Linear::new(format!("{prefix}.embed"), vocab_size, cfg.embed_dim),
            query: Linear::new(format!("{prefix}.query"), cfg.decoder_hidden, cfg.attention_dim),
            key: Linear::new(format!("{prefix}.key"), ann, cfg.attention_dim),
            score: Linear::new(format!("{prefix}.score"), cfg.attention_dim, 1),
            gru: RnnCell::new(format!("{prefix}.gru"), CellKind::Gru, cfg.embed_dim + ann, cfg.decoder_hidden),
            out: Linear::new(format!("{prefix}.out"), cfg.decoder_hidden + ann, vocab_size),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        self.blstm.init(store, init)?;
        for l in [&self.init_state, &self.embed, &self.query, &self.key, &self.score, &self.out] {
            l.init(store, init)?;
        }
        self.gru.init(store, init)
    }

    pub fn param_count(&self) -> usize {
        self.blstm.param_count()
            + [&self.init_state, &self.embed, &self.query, &self.key, &self.score, &self.out]
                .iter()
                .map(|l| l.param_count())
                .sum::<usize>()
            + self.gru.param_count()
    }

    /// Runs the BLSTM and precomputes attention keys.
    pub fn attend(&self, tape: &mut Tape, store: &ParameterStore, enc: &HwEncoding) -> Result<Attending> {
        if enc.features.is_empty() {
            return Err(Error::EmptyFeatures);
        }
        let batch = tape.shape(enc.features[0])[0];
        let (annotations, last) = self.blstm.run(tape, store, &enc.features, &enc.masks);
        let keys = annotations.iter().map(|&a| self.key.forward(tape, store, a)).collect();
        let n = annotations.len();
        let bias = if enc.masks.iter().all(|m| m.iter().all(|&v| v == 1.0)) {
            None
        } else {
            let mut data = vec![0.0; batch * n];
            for (j, m) in enc.masks.iter().enumerate() {
                for (b, &v) in m.iter().enumerate() {
                    if v == 0.0 {
                        data[b * n + j] = MASKED;
                    }
                }
            }
            Some(Tensor::new(vec![batch, n], data))
        };
        let s0 = self.init_state.forward(tape, store, last);
        let state = tape.tanh(s0);
        Ok(Attending {
            annotations,
            keys,
            bias,
            state,
            batch,
        })
    }

    /// One decode step from the previous tokens; returns `[B, V]` logits and
    /// the `[B, N]` attention weights.
    pub fn step(&self, tape: &mut Tape, store: &ParameterStore, att: &mut Attending, prev: &[usize]) -> (Var, Var) {
        let q = self.query.forward(tape, store, att.state);
        let scores: Vec<Var> = att
            .keys
            .iter()
            .map(|&k| {
                let e = tape.add(q, k);
                let e = tape.tanh(e);
                self.score.forward(tape, store, e)
            })
            .collect();
        let mut scores = tape.concat_cols(&scores);
        if let Some(bias) = &att.bias {
            scores = tape.add_const(scores, bias);
        }
        let alpha = tape.softmax_rows(scores);
        let mut context = None;
        for (j, &a) in att.annotations.iter().enumerate() {
            let w = tape.slice_cols(alpha, j, j + 1);
            let term = tape.mul_rows(a, w);
            context = Some(match context {
                None => term,
                Some(c) => tape.add(c, term),
            });
        }
        let context = context.expect("nonempty annotations");
        let mut onehot = vec![0.0; att.batch * self.vocab_size];
        for (b, &t) in prev.iter().enumerate() {
            onehot[b * self.vocab_size + t] = 1.0;
        }
        let y = tape.constant(Tensor::new(vec![att.batch, self.vocab_size], onehot));
        let e = self.embed.forward(tape, store, y);
        let x = tape.concat_cols(&[e, context]);
        let prev_state = self.gru.state_from_h(tape, att.state);
        let s = self.gru.step(tape, store, x, prev_state).h();
        att.state = s;
        let sc = tape.concat_cols(&[s, context]);
        (self.out.forward(tape, store, sc), alpha)
    }

    /// Teacher-forced unroll: step `i` consumes `<start>` then `targets[b][i-1]`.
    /// Returns one `[B, V]` logits node per step.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        enc: &HwEncoding,
        inputs: &[Vec<usize>],
        steps: usize,
    ) -> Result<Vec<Var>> {
        let mut att = self.attend(tape, store, enc)?;
        if inputs.len() != att.batch || inputs.iter().any(|s| s.len() < steps) {
            return Err(Error::MissingTargets(format!(
                "teacher forcing over {steps} steps needs {} input sequences",
                att.batch
            )));
        }
        let mut outs = Vec::with_capacity(steps);
        for i in 0..steps {
            let prev: Vec<usize> = inputs.iter().map(|s| s[i]).collect();
            outs.push(self.step(tape, store, &mut att, &prev).0);
        }
        Ok(outs)
    }

    /// Argmax decoding; a row stops at its first `<end>` (not included) or
    /// after `max_len` tokens.
    pub fn greedy(&self, tape: &mut Tape, store: &ParameterStore, enc: &HwEncoding, max_len: usize) -> Result<Vec<Decoded>> {
        let mut att = self.attend(tape, store, enc)?;
        let batch = att.batch;
        let mut prev = vec![CharVocab::START; batch];
        let mut out = vec![
            Decoded {
                tokens: Vec::new(),
                attention: Vec::new(),
            };
            batch
        ];
        let mut done = vec![false; batch];
        for _ in 0..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let (logits, alpha) = self.step(tape, store, &mut att, &prev);
            let (l, a) = (tape.value(logits).clone(), tape.value(alpha).clone());
            for b in 0..batch {
                let tok = argmax(l.row(b));
                prev[b] = tok;
                if done[b] {
                    continue;
                }
                out[b].attention.push(a.row(b).to_vec());
                if tok == CharVocab::END {
                    done[b] = true;
                } else {
                    out[b].tokens.push(tok);
                }
            }
        }
        Ok(out)
    }
}

/// First index of the maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---- recognizer --------------------------------------------------------

#[derive(Debug, Clone)]
pub enum HwEncoder {
    Offline(HandwritingImageEncoder),
    Online(OnlineEncoder),
}

#[derive(Debug, Clone)]
pub struct Recognizer {
    pub vocab: CharVocab,
    pub config: HandwritingConfig,
    pub encoder: HwEncoder,
    pub decoder: AttentionDecoder,
}

/// Teacher-forced decoder inputs and targets (characters then `<end>`,
/// padded with `<pad>` and a zero weight).
fn targets(vocab: &CharVocab, texts: &[&str]) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>, usize)> {
    let encoded: Vec<Vec<usize>> = texts.iter().map(|t| vocab.encode(t)).collect::<Result<_>>()?;
    let steps = encoded.iter().map(|e| e.len() + 1).max().unwrap_or(1);
    let mut inputs = Vec::with_capacity(encoded.len());
    let mut outputs = Vec::with_capacity(encoded.len());
    for e in &encoded {
        let mut i = vec![CharVocab::START];
        i.extend(e);
        i.resize(steps, CharVocab::PAD);
        let mut o = e.clone();
        o.push(CharVocab::END);
        o.resize(steps, CharVocab::PAD);
        inputs.push(i);
        outputs.push(o);
    }
    Ok((inputs, outputs, steps))
}

fn sample_text(s: &LabeledSample) -> Result<&str> {
    s.text
        .as_deref()
        .ok_or_else(|| Error::MissingTargets(format!("sample {} has no transcription", s.id)))
}

/// Outcome of one teacher-forced batch.
pub struct RecognitionBatch {
    pub loss: f64,
    pub hits: usize,
    pub tokens: usize,
    pub grads: Option<BTreeMap<String, Tensor>>,
}

impl Recognizer {
    pub fn offline(vocab: CharVocab, cfg: &HandwritingConfig, raster: &RasterConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = HandwritingImageEncoder::new(HW_IMAGE_ENCODER, cfg, raster.channels, raster.height);
        let decoder = AttentionDecoder::new(HW_DECODER, cfg, encoder.output_dim(), vocab.len());
        Ok(Self {
            vocab,
            config: cfg.clone(),
            encoder: HwEncoder::Offline(encoder),
            decoder,
        })
    }

    pub fn online(vocab: CharVocab, cfg: &HandwritingConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = OnlineEncoder::new(HW_ONLINE_ENCODER, cfg);
        let decoder = AttentionDecoder::new(HW_DECODER, cfg, encoder.output_dim(), vocab.len());
        Ok(Self {
            vocab,
            config: cfg.clone(),
            encoder: HwEncoder::Online(encoder),
            decoder,
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng, self.config.dtype);
        let mut store = ParameterStore::new();
        match &self.encoder {
            HwEncoder::Offline(e) => e.init(&mut store, &mut init)?,
            HwEncoder::Online(e) => e.init(&mut store, &mut init)?,
        }
        self.decoder.init(&mut store, &mut init)?;
        Ok(store)
    }

    pub fn param_count(&self) -> usize {
        let enc = match &self.encoder {
            HwEncoder::Offline(e) => e.param_count(),
            HwEncoder::Online(e) => e.param_count(),
        };
        enc + self.decoder.param_count()
    }

    /// Copies the image-encoder weights of a handwriting pretext store.
    pub fn load_pretrained_encoder(&self, store: &mut ParameterStore, pretext: &ParameterStore) -> Result<usize> {
        if !matches!(self.encoder, HwEncoder::Offline(_)) {
            return Err(Error::ModalityMismatch(
                "pretext weights initialize the offline (image) encoder only".into(),
            ));
        }
        let prefix = format!("{HW_IMAGE_ENCODER}.");
        let n = store.copy_prefix(pretext, &prefix, &prefix)?;
        if n == 0 {
            return Err(Error::ModalityMismatch("pretext store holds no image-encoder weights".into()));
        }
        Ok(n)
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, samples: &[&LabeledSample]) -> Result<HwEncoding> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        match &self.encoder {
            HwEncoder::Offline(e) => {
                let images: Vec<&RasterImage> = samples.iter().map(|s| &s.raster).collect();
                e.forward(tape, store, &images)
            }
            HwEncoder::Online(e) => {
                let (rows, masks): (Vec<_>, Vec<_>) = samples
                    .iter()
                    .map(|s| sequence_rows(&s.vector, self.config.t_max, CoordinateMode::Absolute))
                    .unzip();
                // drop the all-padding tail shared by the batch
                let t = masks.iter().map(|m| m.iter().filter(|&&v| v).count()).max().unwrap_or(0);
                let rows: Vec<_> = rows.iter().map(|r| r[..t].to_vec()).collect();
                let masks: Vec<_> = masks.iter().map(|m| m[..t].to_vec()).collect();
                e.forward(tape, store, &rows, &masks)
            }
        }
    }

    /// Mean next-character cross-entropy over non-padding targets, with
    /// gradients when `train`.
    pub fn batch(&self, store: &ParameterStore, samples: &[&LabeledSample], train: bool) -> Result<RecognitionBatch> {
        let texts: Vec<&str> = samples.iter().map(|s| sample_text(s)).collect::<Result<_>>()?;
        let (inputs, outputs, steps) = targets(&self.vocab, &texts)?;
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, store, samples)?;
        let outs = self.decoder.teacher_forced(&mut tape, store, &enc, &inputs, steps)?;
        let all = tape.concat_rows(&outs);
        let logits = tape.value(all).clone();
        let (b, v) = (samples.len(), self.vocab.len());
        let valid = outputs.iter().flatten().filter(|&&t| t != CharVocab::PAD).count();
        let mut loss = 0.0;
        let mut hits = 0;
        let mut grad = vec![0.0; steps * b * v];
        for i in 0..steps {
            for s in 0..b {
                let target = outputs[s][i];
                if target == CharVocab::PAD {
                    continue;
                }
                let r = i * b + s;
                let row = logits.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += (lse - row[target]) / valid as f64;
                if argmax(row) == target {
                    hits += 1;
                }
                for k in 0..v {
                    let p = (row[k] - lse).exp();
                    grad[r * v + k] = (p - if k == target { 1.0 } else { 0.0 }) / valid as f64;
                }
            }
        }
        let grads = if train && loss.is_finite() {
            let root = tape.custom_scalar(all, loss, Tensor::new(vec![steps * b, v], grad));
            tape.backward(root);
            Some(tape.param_grads())
        } else {
            None
        };
        Ok(RecognitionBatch {
            loss,
            hits,
            tokens: valid,
            grads,
        })
    }

    /// Greedy transcriptions.
    pub fn recognize(&self, store: &ParameterStore, samples: &[&LabeledSample]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(32) {
            let mut tape = Tape::new();
            let enc = self.encode(&mut tape, store, chunk)?;
            for d in self.decoder.greedy(&mut tape, store, &enc, self.config.max_len)? {
                out.push(self.vocab.decode(&d.tokens));
            }
        }
        Ok(out)
    }

    /// Fraction of teacher-forced next-token argmaxes (including `<end>`)
    /// that match the target.
    pub fn teacher_forced_accuracy(&self, store: &ParameterStore, samples: &[&LabeledSample]) -> Result<f64> {
        let (mut hits, mut total) = (0, 0);
        for chunk in samples.chunks(32) {
            let r = self.batch(store, chunk, false)?;
            hits += r.hits;
            total += r.tokens;
        }
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(hits as f64 / total as f64)
    }
}

// ---- training loops ----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HwTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for HwTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
            clip_norm: Some(5.0),
        }
    }
}

impl HwTrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::InvalidConfig("lr must be positive and batch_size nonzero".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            clip_norm: self.clip_norm,
            ..AdamConfig::with_lr(self.lr)
        }
    }
}

/// Shuffled minibatch Adam; `step` returns a batch's loss and gradients.
/// Returns the mean loss of every epoch.
fn fit<F>(store: &mut ParameterStore, n: usize, cfg: &HwTrainConfig, stream: u64, mut step: F) -> Result<Vec<f64>>
where
    F: FnMut(&ParameterStore, &[usize]) -> Result<(f64, Option<BTreeMap<String, Tensor>>)>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let adam = cfg.adam();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut global = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (loss, grads) = step(store, idx)?;
            global += 1;
            let grads = match grads {
                Some(g) if loss.is_finite() && g.values().all(Tensor::is_finite) => g,
                _ => {
                    return Err(Error::DivergedLoss {
                        epoch,
                        step: global,
                        last_checkpoint: None,
                    })
                }
            };
            adam_step(store, &grads, &adam);
            total += loss * idx.len() as f64;
        }
        curve.push(total / n as f64);
    }
    Ok(curve)
}

/// Trains the recognizer on transcribed samples; returns the loss curve.
pub fn train_recognizer(
    rec: &Recognizer,
    store: &mut ParameterStore,
    samples: &[&LabeledSample],
    cfg: &HwTrainConfig,
) -> Result<Vec<f64>> {
    fit(store, samples.len(), cfg, 3, |st, idx| {
        let batch: Vec<&LabeledSample> = idx.iter().map(|&i| samples[i]).collect();
        let r = rec.batch(st, &batch, true)?;
        Ok((r.loss, r.grads))
    })
}

/// Image encoder (as in the recognizer) whose final latent drives a stroke
/// sequence decoder: the vectorization pretext on word images.
#[derive(Debug, Clone)]
pub struct HandwritingPretext {
    pub config: HandwritingConfig,
    pub encoder: HandwritingImageEncoder,
    pub decoder: SeqDecoder,
}

impl HandwritingPretext {
    pub fn new(cfg: &HandwritingConfig, raster: &RasterConfig, decoder: &SeqDecoderConfig) -> Result<Self> {
        cfg.validate()?;
        if decoder.hidden == 0 {
            return Err(Error::InvalidModelConfig("seq_decoder.hidden must be positive".into()));
        }
        let encoder = HandwritingImageEncoder::new(HW_IMAGE_ENCODER, cfg, raster.channels, raster.height);
        let decoder = SeqDecoder::new(HW_SEQ_DECODER, decoder, encoder.output_dim());
        Ok(Self {
            config: cfg.clone(),
            encoder,
            decoder,
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng, self.config.dtype);
        let mut store = ParameterStore::new();
        self.encoder.init(&mut store, &mut init)?;
        self.decoder.init(&mut store, &mut init)?;
        Ok(store)
    }

    /// Teacher-forced vectorization loss of a batch, averaged over samples.
    pub fn batch(&self, store: &ParameterStore, samples: &[&LabeledSample], train: bool) -> Result<(f64, Option<BTreeMap<String, Tensor>>)> {
        let (rows, masks): (Vec<_>, Vec<_>) = samples
            .iter()
            .map(|s| sequence_rows(&s.vector, self.config.t_max, CoordinateMode::Absolute))
            .unzip();
        let t = masks.iter().map(|m| m.iter().filter(|&&v| v).count()).max().unwrap_or(1).max(1);
        let b = samples.len();
        let mut tape = Tape::new();
        let images: Vec<&RasterImage> = samples.iter().map(|s| &s.raster).collect();
        let enc = self.encoder.forward(&mut tape, store, &images)?;
        let outs = self.decoder.teacher_forced(&mut tape, store, enc.latent, &rows, t)?;
        let all = tape.concat_rows(&outs);
        let vals = tape.value(all).clone();
        let mut loss = 0.0;
        let mut grad = vec![0.0; t * b * 5];
        for s in 0..b {
            let preds: Vec<PointPrediction> = (0..t).map(|i| PointPrediction::from_row(vals.row(i * b + s))).collect();
            let (br, g) = vectorization_loss_with_grad(&preds, &rows[s][..t], &masks[s][..t], CoordPenalty::Squared)?;
            loss += br.total / b as f64;
            for i in 0..t {
                for k in 0..5 {
                    grad[(i * b + s) * 5 + k] = g[i][k] / b as f64;
                }
            }
        }
        if !train || !loss.is_finite() {
            return Ok((loss, None));
        }
        let root = tape.custom_scalar(all, loss, Tensor::new(vec![t * b, 5], grad));
        tape.backward(root);
        Ok((loss, Some(tape.param_grads())))
    }
}

/// Pretext training on unlabeled word images; returns the store and the
/// loss curve.
pub fn pretrain_handwriting(
    model: &HandwritingPretext,
    samples: &[&LabeledSample],
    cfg: &HwTrainConfig,
) -> Result<(ParameterStore, Vec<f64>)> {
    let mut store = model.init_params(cfg.seed)?;
    let curve = fit(&mut store, samples.len(), cfg, 1, |st, idx| {
        let batch: Vec<&LabeledSample> = idx.iter().map(|&i| samples[i]).collect();
        model.batch(st, &batch, true)
    })?;
    Ok((store, curve))
}

// ---- metrics -----------------------------------------------------------

/// Character-level edit distance (unit insert, delete, substitute).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.chars().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Lexicon word nearest to `prediction`; ties go to the lexicographically
/// smallest word.
pub fn lexicon_correct<'a>(prediction: &str, lexicon: &'a [String]) -> Result<&'a str> {
    lexicon
        .iter()
        .map(|w| (levenshtein(prediction, w), w.as_str()))
        .min()
        .map(|(_, w)| w)
        .ok_or(Error::EmptyLexicon)
}

/// Word Recognition Accuracy: exact-match fraction, after lexicon
/// correction when a lexicon is given.
pub fn evaluate_wra(predictions: &[String], references: &[String], lexicon: Option<&[String]>) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0;
    for (p, r) in predictions.iter().zip(references) {
        let p = match lexicon {
            Some(lex) => lexicon_correct(p, lex)?,
            None => p.as_str(),
        };
        hits += usize::from(p == r);
    }
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionRecord {
    pub id: String,
    pub reference: String,
    pub prediction: String,
    pub corrected: Option<String>,
    /// Edit distance from the raw prediction to the reference.
    pub edit_distance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionReport {
    pub n: usize,
    pub wra_no_lexicon: f64,
    pub wra_lexicon: Option<f64>,
    pub lexicon_size: Option<usize>,
    pub samples: Vec<RecognitionRecord>,
}

/// Recognizes `samples` and scores them with and (if given) without lexicon.
pub fn recognition_report(
    rec: &Recognizer,
    store: &ParameterStore,
    samples: &[&LabeledSample],
    lexicon: Option<&[String]>,
) -> Result<RecognitionReport> {
    if lexicon.is_some_and(|l| l.is_empty()) {
        return Err(Error::EmptyLexicon);
    }
    let refs: Vec<String> = samples.iter().map(|s| sample_text(s).map(str::to_string)).collect::<Result<_>>()?;
    let preds = rec.recognize(store, samples)?;
    let mut records = Vec::with_capacity(samples.len());
    for ((s, p), r) in samples.iter().zip(&preds).zip(&refs) {
        records.push(RecognitionRecord {
            id: s.id.clone(),
            reference: r.clone(),
            prediction: p.clone(),
            corrected: lexicon.map(|l| lexicon_correct(p, l).map(str::to_string)).transpose()?,
            edit_distance: levenshtein(p, r),
        });
    }
    Ok(RecognitionReport {
        n: samples.len(),
        wra_no_lexicon: evaluate_wra(&preds, &refs, None)?,
        wra_lexicon: lexicon.map(|l| evaluate_wra(&preds, &refs, Some(l))).transpose()?,
        lexicon_size: lexicon.map(<[String]>::len),
        samples: records,
    })
}

#[cfg(test)]
mod tests;

//! Sequence encoders over padded stroke rows.
//!
//! Transformer parameter count with model dim `D`, MLP dim `M`, `L` layers
//! and `P = t_max + 1` positions:
//! `6D` (input) `+ D` (class token) `+ P*D + L*(3D^2+3D + D^2+D + 2DM+M+D + 4D) + 2D`.

use rand::Rng;

use super::config::{CellKind, SeqEncoderConfig};
use super::layers::{Linear, RnnCell};
use crate::error::{Error, Result};
use crate::nn::{Init, ParameterStore, Tape, Tensor, Var};

/// Additive attention bias for padded keys; `exp` underflows to exactly 0.
const MASKED: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct SeqEncoding {
    /// `[B, D]` summary after every layer, shallowest first.
    pub layers: Vec<Var>,
    pub latent: Var,
}

#[derive(Debug, Clone)]
pub enum SeqEncoder {
    Rnn(RnnSeqEncoder),
    Transformer(TransformerSeqEncoder),
}

impl SeqEncoder {
    pub fn new(prefix: &str, cfg: &SeqEncoderConfig, t_max: usize) -> Self {
        match *cfg {
            SeqEncoderConfig::Rnn { cell, layers, hidden } => {
                SeqEncoder::Rnn(RnnSeqEncoder::new(prefix, cell, layers, hidden))
            }
            SeqEncoderConfig::Transformer {
                layers,
                dim,
                heads,
                mlp_dim,
            } => SeqEncoder::Transformer(TransformerSeqEncoder::new(prefix, layers, dim, heads, mlp_dim, t_max)),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        match self {
            SeqEncoder::Rnn(e) => e.init(store, init),
            SeqEncoder::Transformer(e) => e.init(store, init),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            SeqEncoder::Rnn(e) => e.param_count(),
            SeqEncoder::Transformer(e) => e.param_count(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            SeqEncoder::Rnn(e) => e.cells.last().map_or(0, |c| c.hidden),
            SeqEncoder::Transformer(e) => e.dim,
        }
    }

    /// Name prefixes covering the input side and the first `depth` layers;
    /// at full depth every parameter is covered.
    pub fn frozen_prefixes(&self, depth: usize) -> Vec<String> {
        match self {
            SeqEncoder::Rnn(e) => (0..depth.min(e.cells.len())).map(|i| format!("{}.", e.cells[i].name)).collect(),
            SeqEncoder::Transformer(e) => {
                if depth == 0 {
                    return Vec::new();
                }
                let p = &e.prefix;
                let mut v = vec![format!("{p}.input."), format!("{p}.cls"), format!("{p}.pos")];
                v.extend((0..depth.min(e.layers)).map(|i| format!("{p}.layer{i}.")));
                if depth >= e.layers {
                    v.push(format!("{p}.norm."));
                }
                v
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            SeqEncoder::Rnn(e) => e.cells.len(),
            SeqEncoder::Transformer(e) => e.layers,
        }
    }

    /// `rows[b]` and `masks[b]` share one padded length across the batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        rows: &[Vec<[f64; 5]>],
        masks: &[Vec<bool>],
    ) -> Result<SeqEncoding> {
        check_batch(rows, masks)?;
        match self {
            SeqEncoder::Rnn(e) => Ok(e.forward(tape, store, rows, masks)),
            SeqEncoder::Transformer(e) => e.forward(tape, store, rows, masks),
        }
    }

    /// Inference convenience returning `[B, D]` latent values.
    pub fn encode(&self, store: &ParameterStore, rows: &[Vec<[f64; 5]>], masks: &[Vec<bool>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let enc = self.forward(&mut tape, store, rows, masks)?;
        Ok(tape.value(enc.latent).clone())
    }
}

fn check_batch(rows: &[Vec<[f64; 5]>], masks: &[Vec<bool>]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("empty sequence batch".into()));
    }
    let t = rows[0].len();
    if masks.len() != rows.len() {
        return Err(Error::LengthMismatch(format!("{} sequences, {} masks", rows.len(), masks.len())));
    }
    for (i, (r, m)) in rows.iter().zip(masks).enumerate() {
        if r.len() != t || m.len() != t {
            return Err(Error::LengthMismatch(format!(
                "sample {i}: {} rows and {} mask entries, batch length {t}",
                r.len(),
                m.len()
            )));
        }
        if !m.iter().any(|&v| v) {
            return Err(Error::EmptyMask);
        }
    }
    Ok(())
}

/// Stacked unidirectional RNN; the summary of each layer is its state after
/// the last valid step.
#[derive(Debug, Clone)]
pub struct RnnSeqEncoder {
    pub cells: Vec<RnnCell>,
}

impl RnnSeqEncoder {
    pub fn new(prefix: &str, kind: CellKind, layers: usize, hidden: usize) -> Self {
        let cells = (0..layers)
            .map(|i| {
                let inputs = if i == 0 { 5 } else { hidden };
                RnnCell::new(format!("{prefix}.rnn{i}"), kind, inputs, hidden)
            })
            .collect();
        Self { cells }
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        self.cells.iter().try_for_each(|c| c.init(store, init))
    }

    pub fn param_count(&self) -> usize {
        self.cells.iter().map(RnnCell::param_count).sum()
    }

    fn forward(&self, tape: &mut Tape, store: &ParameterStore, rows: &[Vec<[f64; 5]>], masks: &[Vec<bool>]) -> SeqEncoding {
        let t = rows[0].len();
        let mut inputs: Vec<Var> = (0..t)
            .map(|i| {
                let step: Vec<[f64; 5]> = rows.iter().map(|r| r[i]).collect();
                tape.constant(Tensor::from_rows(&step))
            })
            .collect();
        let step_masks: Vec<Vec<f64>> = (0..t)
            .map(|i| masks.iter().map(|m| if m[i] { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut layers = Vec::with_capacity(self.cells.len());
        for cell in &self.cells {
            let (outs, last) = cell.run(tape, store, &inputs, &step_masks, false);
            layers.push(last.h());
            inputs = outs;
        }
        let latent = *layers.last().expect("at least one layer");
        SeqEncoding { layers, latent }
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    name: String,
    dim: usize,
}

impl LayerNorm {
    fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        init.constant(store, &format!("{}.gamma", self.name), &[self.dim], 1.0)?;
        init.constant(store, &format!("{}.beta", self.name), &[self.dim], 0.0)
    }

    fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Var {
        let g = tape.param(store, &format!("{}.gamma", self.name));
        let b = tape.param(store, &format!("{}.beta", self.name));
        let n = tape.layer_norm_rows(x, LN_EPS);
        let n = tape.mul_row(n, g);
        tape.add_row(n, b)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Pre-norm Transformer with a prepended learnable class token whose final
/// state is the latent. Padded keys are masked out of every attention row.
#[derive(Debug, Clone)]
pub struct TransformerSeqEncoder {
    pub prefix: String,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub max_positions: usize,
    input: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl TransformerSeqEncoder {
    pub fn new(prefix: &str, layers: usize, dim: usize, heads: usize, mlp_dim: usize, t_max: usize) -> Self {
        let ln = |n: String| LayerNorm { name: n, dim };
        let blocks = (0..layers)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                Block {
                    ln1: ln(format!("{p}.ln1")),
                    qkv: Linear::new(format!("{p}.qkv"), dim, 3 * dim),
                    proj: Linear::new(format!("{p}.proj"), dim, dim),
                    ln2: ln(format!("{p}.ln2")),
                    fc1: Linear::new(format!("{p}.fc1"), dim, mlp_dim),
                    fc2: Linear::new(format!("{p}.fc2"), mlp_dim, dim),
                }
            })
            .collect();
        Self {
            prefix: prefix.to_string(),
            layers,
            dim,
            heads,
            mlp_dim,
            max_positions: t_max + 1,
            input: Linear::new(format!("{prefix}.input"), 5, dim),
            blocks,
            norm: ln(format!("{prefix}.norm")),
        }
    }

    fn cls_name(&self) -> String {
        format!("{}.cls", self.prefix)
    }

    fn pos_name(&self) -> String {
        format!("{}.pos", self.prefix)
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        self.input.init(store, init)?;
        init.uniform(store, &self.cls_name(), &[1, self.dim], 0.02)?;
        init.uniform(store, &self.pos_name(), &[self.max_positions, self.dim], 0.02)?;
        for b in &self.blocks {
            b.ln1.init(store, init)?;
            b.qkv.init(store, init)?;
            b.proj.init(store, init)?;
            b.ln2.init(store, init)?;
            b.fc1.init(store, init)?;
            b.fc2.init(store, init)?;
        }
        self.norm.init(store, init)
    }

    pub fn param_count(&self) -> usize {
        let (d, m) = (self.dim, self.mlp_dim);
        let block = (3 * d * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d) + 4 * d;
        6 * d + d + self.max_positions * d + self.layers * block + 2 * d
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        rows: &[Vec<[f64; 5]>],
        masks: &[Vec<bool>],
    ) -> Result<SeqEncoding> {
        let t = rows[0].len();
        if t + 1 > self.max_positions {
            return Err(Error::SequenceTooLong {
                len: t,
                max: self.max_positions - 1,
            });
        }
        let cls = tape.param(store, &self.cls_name());
        let pos_all = tape.param(store, &self.pos_name());
        let pos = tape.slice_rows(pos_all, 0, t + 1);
        // per layer, per sample class-token rows
        let mut per_layer: Vec<Vec<Var>> = vec![Vec::with_capacity(rows.len()); self.layers];
        let mut finals = Vec::with_capacity(rows.len());
        for (r, m) in rows.iter().zip(masks) {
            let x = tape.constant(Tensor::from_rows(r));
            let x = self.input.forward(tape, store, x);
            let x = tape.concat_rows(&[cls, x]);
            let mut x = tape.add(x, pos);
            let bias = key_bias(m);
            for (l, b) in self.blocks.iter().enumerate() {
                x = self.block(tape, store, b, x, &bias);
                per_layer[l].push(tape.slice_rows(x, 0, 1));
            }
            let c = tape.slice_rows(x, 0, 1);
            finals.push(self.norm.forward(tape, store, c));
        }
        let layers: Vec<Var> = per_layer.iter().map(|v| tape.concat_rows(v)).collect();
        let latent = tape.concat_rows(&finals);
        Ok(SeqEncoding { layers, latent })
    }

    fn block(&self, tape: &mut Tape, store: &ParameterStore, b: &Block, x: Var, bias: &Tensor) -> Var {
        let d = self.dim;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let h = b.ln1.forward(tape, store, x);
        let qkv = b.qkv.forward(tape, store, h);
        let heads: Vec<Var> = (0..self.heads)
            .map(|i| {
                let q = tape.slice_cols(qkv, i * dh, (i + 1) * dh);
                let k = tape.slice_cols(qkv, d + i * dh, d + (i + 1) * dh);
                let v = tape.slice_cols(qkv, 2 * d + i * dh, 2 * d + (i + 1) * dh);
                let kt = tape.transpose(k);
                let s = tape.matmul(q, kt);
                let s = tape.scale(s, scale);
                let s = tape.add_const(s, bias);
                let a = tape.softmax_rows(s);
                tape.matmul(a, v)
            })
            .collect();
        let att = tape.concat_cols(&heads);
        let att = b.proj.forward(tape, store, att);
        let x = tape.add(x, att);
        let h = b.ln2.forward(tape, store, x);
        let h = b.fc1.forward(tape, store, h);
        let h = tape.relu(h);
        let h = b.fc2.forward(tape, store, h);
        tape.add(x, h)
    }
}

/// `[T+1, T+1]` bias: column `j` (token `j`, class token first) is masked
/// when the underlying point is padding.
fn key_bias(mask: &[bool]) -> Tensor {
    let n = mask.len() + 1;
    let row: Vec<f64> = std::iter::once(0.0)
        .chain(mask.iter().map(|&m| if m { 0.0 } else { MASKED }))
        .collect();
    Tensor::new(vec![n, n], row.iter().copied().cycle().take(n * n).collect())
}

use rand::Rng;

use super::config::SeqDecoderConfig;
use super::layers::{Linear, RnnCell, RnnState};
use crate::error::{Error, Result};
use crate::losses::PointPrediction;
use crate::nn::{Init, ParameterStore, Tape, Tensor, Var};
use crate::stroke::PenState;

/// Input fed at step 0: pen down at the origin.
pub const START_TOKEN: [f64; 5] = [0.0, 0.0, 1.0, 0.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    #[default]
    TeacherForcing,
    Autoregressive,
}

/// Recurrent decoder: `h0 = W_h l + b_h`, each step consumes `[l, P_prev]`
/// and emits `(x, y, 3 pen logits)` through an affine readout.
#[derive(Debug, Clone)]
pub struct SeqDecoder {
    pub prefix: String,
    pub latent_dim: usize,
    pub init_state: Linear,
    pub cell: RnnCell,
    pub readout: Linear,
}

impl SeqDecoder {
    pub fn new(prefix: &str, cfg: &SeqDecoderConfig, latent_dim: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            latent_dim,
            init_state: Linear::new(format!("{prefix}.init"), latent_dim, cfg.hidden),
            cell: RnnCell::new(format!("{prefix}.cell"), cfg.cell, latent_dim + 5, cfg.hidden),
            readout: Linear::new(format!("{prefix}.readout"), cfg.hidden, 5),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        self.init_state.init(store, init)?;
        self.cell.init(store, init)?;
        self.readout.init(store, init)
    }

    pub fn param_count(&self) -> usize {
        self.init_state.param_count() + self.cell.param_count() + self.readout.param_count()
    }

    fn check_latent(&self, tape: &Tape, latent: Var) -> Result<()> {
        let s = tape.shape(latent);
        if s.len() != 2 || s[1] != self.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "decoder latent {s:?}, expected [B, {}]",
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// `h0` for a `[B, d]` latent (LSTM cell state starts at zero).
    pub fn initial_state(&self, tape: &mut Tape, store: &ParameterStore, latent: Var) -> Result<RnnState> {
        self.check_latent(tape, latent)?;
        let h = self.init_state.forward(tape, store, latent);
        Ok(self.cell.state_from_h(tape, h))
    }

    /// One recurrent update; `prev` is `[B, 5]`. Returns the new state and
    /// the `[B, 5]` prediction.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        state: RnnState,
        latent: Var,
        prev: Var,
    ) -> Result<(RnnState, Var)> {
        self.check_latent(tape, latent)?;
        let (ps, hs) = (tape.shape(prev).to_vec(), tape.shape(state.h()).to_vec());
        let batch = tape.shape(latent)[0];
        if ps != [batch, 5] || hs != [batch, self.cell.hidden] {
            return Err(Error::ShapeMismatch(format!(
                "decoder step: prev {ps:?}, hidden {hs:?}, batch {batch}"
            )));
        }
        let x = tape.concat_cols(&[latent, prev]);
        let state = self.cell.step(tape, store, x, state);
        let out = self.readout.forward(tape, store, state.h());
        Ok((state, out))
    }

    /// Teacher-forced unroll over `t` steps: step `i` consumes `targets[b][i-1]`
    /// (the start token at step 0). Returns one `[B, 5]` node per step.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        latent: Var,
        targets: &[Vec<[f64; 5]>],
        t: usize,
    ) -> Result<Vec<Var>> {
        let batch = tape.shape(latent)[0];
        if targets.len() != batch || targets.iter().any(|s| s.len() + 1 < t) {
            return Err(Error::MissingTargets(format!(
                "teacher forcing over {t} steps needs {batch} target sequences of length >= {}",
                t.saturating_sub(1)
            )));
        }
        let mut state = self.initial_state(tape, store, latent)?;
        let mut outs = Vec::with_capacity(t);
        for i in 0..t {
            let rows: Vec<[f64; 5]> = targets
                .iter()
                .map(|s| if i == 0 { START_TOKEN } else { s[i - 1] })
                .collect();
            let prev = tape.constant(Tensor::from_rows(&rows));
            let (s, out) = self.step(tape, store, state, latent, prev)?;
            state = s;
            outs.push(out);
        }
        Ok(outs)
    }

    /// Free-running unroll over exactly `t` steps, feeding back each
    /// prediction (pen hardened to one-hot, detached from the graph).
    pub fn free_running(&self, tape: &mut Tape, store: &ParameterStore, latent: Var, t: usize) -> Result<Vec<Var>> {
        let batch = tape.shape(latent)[0];
        let mut state = self.initial_state(tape, store, latent)?;
        let mut prev_rows = vec![START_TOKEN; batch];
        let mut outs = Vec::with_capacity(t);
        for _ in 0..t {
            let prev = tape.constant(Tensor::from_rows(&prev_rows));
            let (s, out) = self.step(tape, store, state, latent, prev)?;
            state = s;
            let vals = tape.value(out);
            prev_rows = (0..batch).map(|b| harden(vals.row(b))).collect();
            outs.push(out);
        }
        Ok(outs)
    }

    /// Decodes a `[B, d]` latent tensor into per-sample predictions.
    ///
    /// Autoregressive decoding stops a sample after the first step whose
    /// pen argmax is End; teacher forcing always returns `t` predictions.
    pub fn decode_sequence(
        &self,
        store: &ParameterStore,
        latent: &Tensor,
        t: usize,
        mode: DecodeMode,
        targets: Option<&[Vec<[f64; 5]>]>,
    ) -> Result<Vec<Vec<PointPrediction>>> {
        let mut tape = Tape::new();
        let l = tape.constant(latent.clone());
        self.check_latent(&tape, l)?;
        let batch = latent.shape[0];
        match mode {
            DecodeMode::TeacherForcing => {
                let targets = targets.ok_or_else(|| {
                    Error::MissingTargets("teacher forcing requires target sequences".into())
                })?;
                let outs = self.teacher_forced(&mut tape, store, l, targets, t)?;
                Ok((0..batch)
                    .map(|b| outs.iter().map(|&o| PointPrediction::from_row(tape.value(o).row(b))).collect())
                    .collect())
            }
            DecodeMode::Autoregressive => {
                let mut state = self.initial_state(&mut tape, store, l)?;
                let mut prev_rows = vec![START_TOKEN; batch];
                let mut result: Vec<Vec<PointPrediction>> = vec![Vec::new(); batch];
                let mut done = vec![false; batch];
                for _ in 0..t {
                    if done.iter().all(|&d| d) {
                        break;
                    }
                    let prev = tape.constant(Tensor::from_rows(&prev_rows));
                    let (s, out) = self.step(&mut tape, store, state, l, prev)?;
                    state = s;
                    let vals = tape.value(out).clone();
                    for b in 0..batch {
                        let row = vals.row(b);
                        prev_rows[b] = harden(row);
                        if done[b] {
                            continue;
                        }
                        let p = PointPrediction::from_row(row);
                        done[b] = PenState::argmax(&p.pen_logits) == PenState::End;
                        result[b].push(p);
                    }
                }
                Ok(result)
            }
        }
    }
}

/// Prediction row with pen logits replaced by the one-hot argmax.
pub fn harden(row: &[f64]) -> [f64; 5] {
    let pen = PenState::argmax(&row[2..5]).one_hot();
    [row[0], row[1], pen[0], pen[1], pen[2]]
}

//! Parameterized building blocks. Each layer owns a name prefix; its
//! tensors live in a [`ParameterStore`] under `<prefix>.<tensor>`.
//!
//! Parameter counts:
//! - `Linear`: `in * out + out`
//! - `Conv2d`: `out * in * k * k + out` (same for `ConvTranspose2d`)
//! - `RnnCell` GRU: `3h * (in + h) + 6h` (separate input and hidden biases)
//! - `RnnCell` LSTM: `4h * (in + h) + 4h`

use rand::Rng;

use super::config::CellKind;
use crate::error::Result;
use crate::nn::{Init, ParameterStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.into(),
            inputs,
            outputs,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        let bound = 1.0 / (self.inputs as f64).sqrt();
        init.uniform(store, &self.weight(), &[self.inputs, self.outputs], bound)?;
        init.uniform(store, &self.bias(), &[self.outputs], bound)
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    /// `x[B, in] -> [B, out]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Var {
        let w = tape.param(store, &self.weight());
        let b = tape.param(store, &self.bias());
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        let fan_in = (self.in_channels * self.kernel * self.kernel) as f64;
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        init.uniform(store, &format!("{}.weight", self.name), &shape, (6.0 / fan_in).sqrt())?;
        init.constant(store, &format!("{}.bias", self.name), &[self.out_channels], 0.0)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Var {
        let w = tape.param(store, &format!("{}.weight", self.name));
        let b = tape.param(store, &format!("{}.bias", self.name));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Kernel 4, stride 2, padding 1: doubles the spatial size.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTranspose2d {
    const KERNEL: usize = 4;

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        let k = Self::KERNEL;
        let fan_in = (self.in_channels * k * k) as f64 / 4.0;
        let shape = [self.in_channels, self.out_channels, k, k];
        init.uniform(store, &format!("{}.weight", self.name), &shape, (6.0 / fan_in).sqrt())?;
        init.constant(store, &format!("{}.bias", self.name), &[self.out_channels], 0.0)
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * Self::KERNEL * Self::KERNEL + self.out_channels
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Var {
        let w = tape.param(store, &format!("{}.weight", self.name));
        let b = tape.param(store, &format!("{}.bias", self.name));
        tape.conv_transpose2d(x, w, b, 2, 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum RnnState {
    Gru(Var),
    Lstm { h: Var, c: Var },
}

impl RnnState {
    pub fn h(&self) -> Var {
        match *self {
            RnnState::Gru(h) | RnnState::Lstm { h, .. } => h,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RnnCell {
    pub name: String,
    pub kind: CellKind,
    pub inputs: usize,
    pub hidden: usize,
}

impl RnnCell {
    pub fn new(name: impl Into<String>, kind: CellKind, inputs: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            inputs,
            hidden,
        }
    }

    fn gates(&self) -> usize {
        match self.kind {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    fn p(&self, t: &str) -> String {
        format!("{}.{t}", self.name)
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        let g = self.gates() * self.hidden;
        let bound = 1.0 / (self.hidden as f64).sqrt();
        init.uniform(store, &self.p("w_ih"), &[self.inputs, g], bound)?;
        init.uniform(store, &self.p("w_hh"), &[self.hidden, g], bound)?;
        match self.kind {
            CellKind::Gru => {
                init.uniform(store, &self.p("b_ih"), &[g], bound)?;
                init.uniform(store, &self.p("b_hh"), &[g], bound)
            }
            CellKind::Lstm => {
                let h = self.hidden;
                // forget gate starts open
                let bias: Vec<f64> = (0..g).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect();
                store.insert(&self.p("bias"), Tensor::new(vec![g], bias), init.dtype)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let g = self.gates() * self.hidden;
        let biases = match self.kind {
            CellKind::Gru => 2 * g,
            CellKind::Lstm => g,
        };
        g * (self.inputs + self.hidden) + biases
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> RnnState {
        let z = tape.constant(Tensor::zeros(&[batch, self.hidden]));
        self.state_from_h(tape, z)
    }

    /// State with the given hidden vector and (for LSTM) a zero cell.
    pub fn state_from_h(&self, tape: &mut Tape, h: Var) -> RnnState {
        match self.kind {
            CellKind::Gru => RnnState::Gru(h),
            CellKind::Lstm => {
                let rows = tape.shape(h)[0];
                let c = tape.constant(Tensor::zeros(&[rows, self.hidden]));
                RnnState::Lstm { h, c }
            }
        }
    }

    pub fn step(&self, tape: &mut Tape, store: &ParameterStore, x: Var, state: RnnState) -> RnnState {
        let h = self.hidden;
        let w_ih = tape.param(store, &self.p("w_ih"));
        let w_hh = tape.param(store, &self.p("w_hh"));
        match state {
            RnnState::Gru(hp) => {
                let b_ih = tape.param(store, &self.p("b_ih"));
                let b_hh = tape.param(store, &self.p("b_hh"));
                let gi = tape.matmul(x, w_ih);
                let gi = tape.add_row(gi, b_ih);
                let gh = tape.matmul(hp, w_hh);
                let gh = tape.add_row(gh, b_hh);
                let (ir, iz, inn) = (tape.slice_cols(gi, 0, h), tape.slice_cols(gi, h, 2 * h), tape.slice_cols(gi, 2 * h, 3 * h));
                let (hr, hz, hn) = (tape.slice_cols(gh, 0, h), tape.slice_cols(gh, h, 2 * h), tape.slice_cols(gh, 2 * h, 3 * h));
                let r = tape.add(ir, hr);
                let r = tape.sigmoid(r);
                let z = tape.add(iz, hz);
                let z = tape.sigmoid(z);
                let rn = tape.mul(r, hn);
                let n = tape.add(inn, rn);
                let n = tape.tanh(n);
                // h' = n + z * (h - n)
                let d = tape.sub(hp, n);
                let zd = tape.mul(z, d);
                RnnState::Gru(tape.add(n, zd))
            }
            RnnState::Lstm { h: hp, c: cp } => {
                let b = tape.param(store, &self.p("bias"));
                let gi = tape.matmul(x, w_ih);
                let gh = tape.matmul(hp, w_hh);
                let g = tape.add(gi, gh);
                let g = tape.add_row(g, b);
                let i = tape.slice_cols(g, 0, h);
                let i = tape.sigmoid(i);
                let f = tape.slice_cols(g, h, 2 * h);
                let f = tape.sigmoid(f);
                let gg = tape.slice_cols(g, 2 * h, 3 * h);
                let gg = tape.tanh(gg);
                let o = tape.slice_cols(g, 3 * h, 4 * h);
                let o = tape.sigmoid(o);
                let fc = tape.mul(f, cp);
                let ig = tape.mul(i, gg);
                let c = tape.add(fc, ig);
                let tc = tape.tanh(c);
                let hn = tape.mul(o, tc);
                RnnState::Lstm { h: hn, c }
            }
        }
    }

    /// Row-wise `mask ? new : old`.
    pub fn blend(&self, tape: &mut Tape, new: RnnState, old: RnnState, mask: &[f64]) -> RnnState {
        match (new, old) {
            (RnnState::Gru(a), RnnState::Gru(b)) => RnnState::Gru(tape.blend_rows(a, b, mask)),
            (RnnState::Lstm { h: ha, c: ca }, RnnState::Lstm { h: hb, c: cb }) => RnnState::Lstm {
                h: tape.blend_rows(ha, hb, mask),
                c: tape.blend_rows(ca, cb, mask),
            },
            _ => unreachable!("mixed cell states"),
        }
    }

    /// Runs the cell over `inputs` (one `[B, in]` node per step). Steps where
    /// a row's mask is 0 leave that row's state unchanged, so padding never
    /// contributes. Returns per-step hidden outputs (in input order) and the
    /// final state.
    pub fn run(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        inputs: &[Var],
        masks: &[Vec<f64>],
        reverse: bool,
    ) -> (Vec<Var>, RnnState) {
        let batch = tape.shape(inputs[0])[0];
        let mut state = self.zero_state(tape, batch);
        let mut outs = vec![state.h(); inputs.len()];
        let order: Vec<usize> = if reverse {
            (0..inputs.len()).rev().collect()
        } else {
            (0..inputs.len()).collect()
        };
        for t in order {
            let new = self.step(tape, store, inputs[t], state);
            state = self.blend(tape, new, state, &masks[t]);
            outs[t] = state.h();
        }
        (outs, state)
    }
}

/// Forward and backward cells whose outputs are concatenated per step.
#[derive(Debug, Clone)]
pub struct BiRnn {
    pub forward: RnnCell,
    pub backward: RnnCell,
}

impl BiRnn {
    pub fn new(name: &str, kind: CellKind, inputs: usize, hidden: usize) -> Self {
        Self {
            forward: RnnCell::new(format!("{name}.fwd"), kind, inputs, hidden),
            backward: RnnCell::new(format!("{name}.bwd"), kind, inputs, hidden),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, init: &mut Init<'_, R>) -> Result<()> {
        self.forward.init(store, init)?;
        self.backward.init(store, init)
    }

    pub fn param_count(&self) -> usize {
        self.forward.param_count() + self.backward.param_count()
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// Per-step `[B, 2h]` outputs and the final latent: the forward state
    /// after the last valid step concatenated with the backward state after
    /// step 0.
    pub fn run(&self, tape: &mut Tape, store: &ParameterStore, inputs: &[Var], masks: &[Vec<f64>]) -> (Vec<Var>, Var) {
        let (f_out, f_last) = self.forward.run(tape, store, inputs, masks, false);
        let (b_out, b_last) = self.backward.run(tape, store, inputs, masks, true);
        let outs = f_out
            .iter()
            .zip(&b_out)
            .map(|(&f, &b)| tape.concat_cols(&[f, b]))
            .collect();
        let last = tape.concat_cols(&[f_last.h(), b_last.h()]);
        (outs, last)
    }
}

//! Layers composed from tape primitives.

use rand::Rng;

use super::array::{Array, Scalar};
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// `x W + b` on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.insert_uniform(&format!("{name}.weight"), &[input, output], input, rng)?;
        let bias = if bias {
            Some(store.insert_uniform(&format!("{name}.bias"), &[output], input, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Gated recurrent cell with input, forget and output gates plus a candidate.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let g = 4 * hidden;
        Ok(Self {
            w_input: store.insert_uniform(&format!("{name}.w_input"), &[input, g], hidden, rng)?,
            w_hidden: store.insert_uniform(&format!("{name}.w_hidden"), &[hidden, g], hidden, rng)?,
            bias: store.insert_uniform(&format!("{name}.bias"), &[g], hidden, rng)?,
            hidden,
        })
    }

    pub fn zero_state<T: Scalar>(&self, tape: &mut Tape<T>, rows: usize) -> LstmState {
        LstmState {
            h: tape.constant(Array::zeros(&[rows, self.hidden])),
            c: tape.constant(Array::zeros(&[rows, self.hidden])),
        }
    }

    /// Projects a whole input sequence `[L, in]` to gate pre-activations `[L, 4H]`.
    pub fn project_input<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w_input);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    /// Advances one step from already-projected inputs.
    pub fn step_projected<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        projected: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        let wh = tape.param(store, self.w_hidden);
        let hw = tape.matmul(state.h, wh)?;
        let gates = tape.add(projected, hw)?;
        let h = self.hidden;
        let i = tape.slice_cols(gates, 0, h)?;
        let f = tape.slice_cols(gates, h, 2 * h)?;
        let g = tape.slice_cols(gates, 2 * h, 3 * h)?;
        let o = tape.slice_cols(gates, 3 * h, 4 * h)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        let projected = self.project_input(tape, store, x)?;
        self.step_projected(tape, store, projected, state)
    }
}

/// Bidirectional gated recurrence; output rows are `[forward_t ; backward_t]`.
#[derive(Clone, Debug)]
pub struct BiRecurrence {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiRecurrence {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            forward: LstmCell::new(store, &format!("{name}.forward"), input, hidden, rng)?,
            backward: LstmCell::new(store, &format!("{name}.backward"), input, hidden, rng)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// `seq[L, in]` to `[L, 2H]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, seq: Var) -> Result<Var> {
        let len = tape.value(seq).rows();
        let run = |cell: &LstmCell, tape: &mut Tape<T>, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Var>> {
            let projected = cell.project_input(tape, store, seq)?;
            let mut state = cell.zero_state(tape, 1);
            let mut out = vec![None; len];
            for t in order {
                let row = tape.gather_rows(projected, &[t])?;
                state = cell.step_projected(tape, store, row, state)?;
                out[t] = Some(state.h);
            }
            Ok(out.into_iter().map(|v| v.expect("every step visited")).collect())
        };
        let fwd = run(&self.forward, tape, &mut (0..len))?;
        let bwd = run(&self.backward, tape, &mut (0..len).rev())?;
        let fwd = tape.concat(&fwd, 0)?;
        let bwd = tape.concat(&bwd, 0)?;
        tape.concat(&[fwd, bwd], 1)
    }
}

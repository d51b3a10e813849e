//! Stepwise monotonic attention with duration-augmented memory and
//! relative-position queries.
//!
//! Memory rows are encoder outputs plus the latent duration code. Queries
//! are the decoder recurrence state after it consumes the prenet output
//! concatenated with embeddings of the forward and backward position within
//! the current token. Each step, every token gets a selection probability
//! `p_j = sigmoid(e_j)`; attention mass either stays on a token (`p_j`) or
//! moves exactly one token forward (`1 - p_j`).

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::nn::{Linear, LstmCell, LstmState};
use crate::numerics::{Array, ParamId, ParamStore, Scalar, Tape, Var};

/// Frames since the start of the current token and frames left before it
/// ends, both capped at the ceiling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RelativePosition {
    pub fwd: usize,
    pub bwd: usize,
}

impl RelativePosition {
    pub fn ceiled(fwd: usize, bwd: usize, ceiling: usize) -> Self {
        Self {
            fwd: fwd.min(ceiling),
            bwd: bwd.min(ceiling),
        }
    }
}

/// Keys and values derived from the attention memory.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    /// `[N, D]` encoder output plus duration code.
    pub memory: Var,
    pub keys: Var,
    pub values: Var,
}

#[derive(Clone, Debug)]
pub struct PamaAttention {
    query_proj: Linear,
    key_proj: ParamId,
    value_proj: ParamId,
    score: ParamId,
    energy_bias: ParamId,
    fwd_table: ParamId,
    bwd_table: ParamId,
    pub ceiling: usize,
    pub position_dim: usize,
    pub attention_dim: usize,
}

impl PamaAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        query_dim: usize,
        memory_dim: usize,
        attention_dim: usize,
        ceiling: usize,
        position_dim: usize,
        energy_bias: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let query_proj = Linear::new(store, "attention.query", query_dim, attention_dim, true, rng)?;
        let key_proj = store.insert_uniform("attention.key", &[memory_dim, attention_dim], memory_dim, rng)?;
        let value_proj = store.insert_uniform("attention.value", &[memory_dim, attention_dim], memory_dim, rng)?;
        let score = store.insert_uniform("attention.score", &[attention_dim, 1], attention_dim, rng)?;
        let energy_bias = store.insert("attention.energy_bias", Array::new(vec![1], vec![T::of(energy_bias)])?)?;
        let fwd_table = store.insert_uniform("position.forward", &[ceiling + 1, position_dim], 1, rng)?;
        let bwd_table = store.insert_uniform("position.backward", &[ceiling + 1, position_dim], 1, rng)?;
        Ok(Self {
            query_proj,
            key_proj,
            value_proj,
            score,
            energy_bias,
            fwd_table,
            bwd_table,
            ceiling,
            position_dim,
            attention_dim,
        })
    }

    pub fn position_tables(&self) -> (ParamId, ParamId) {
        (self.fwd_table, self.bwd_table)
    }

    /// `memory = encoded + code`; keys and values are linear projections of it.
    pub fn build_memory<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        encoded: Var,
        duration_code: Var,
    ) -> Result<Memory> {
        let memory = tape.add(encoded, duration_code)?;
        let wk = tape.param(store, self.key_proj);
        let wv = tape.param(store, self.value_proj);
        let keys = tape.matmul(memory, wk)?;
        let values = tape.matmul(memory, wv)?;
        Ok(Memory { memory, keys, values })
    }

    /// `[1, 2E]` concatenation of the forward and backward table rows.
    pub fn position_embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pos: RelativePosition,
    ) -> Result<Var> {
        if pos.fwd > self.ceiling || pos.bwd > self.ceiling {
            return Err(Error::invalid(
                "position_embed",
                format!("position {pos:?} exceeds ceiling {}", self.ceiling),
            ));
        }
        let ft = tape.param(store, self.fwd_table);
        let bt = tape.param(store, self.bwd_table);
        let f = tape.embedding_lookup(ft, &[pos.fwd])?;
        let b = tape.embedding_lookup(bt, &[pos.bwd])?;
        tape.concat(&[f, b], 1)
    }

    /// Additive score `e_j = v . tanh(W_q q + b + k_j) + r`, returned as `[1, N]`.
    pub fn energy<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, query: Var, keys: Var) -> Result<Var> {
        let n = tape.value(keys).rows();
        let q = self.query_proj.forward(tape, store, query)?;
        let s = tape.add_row(keys, q)?;
        let s = tape.tanh(s)?;
        let v = tape.param(store, self.score);
        let e = tape.matmul(s, v)?;
        let r = tape.param(store, self.energy_bias);
        let e = tape.add_row(e, r)?;
        tape.reshape(e, vec![1, n])
    }

    /// `sigmoid(energy + noise)`; `noise` holds one pre-drawn sample per token.
    pub fn selection_probs<T: Scalar>(&self, tape: &mut Tape<T>, energy: Var, noise: Option<Vec<T>>) -> Result<Var> {
        let e = match noise {
            Some(n) => {
                let noise = tape.constant(Array::new(tape.shape(energy).to_vec(), n)?);
                tape.add(energy, noise)?
            }
            None => energy,
        };
        tape.sigmoid(e)
    }
}

/// Decoder recurrence over `[prenet ; position ; extra]`; the new hidden state is the query.
pub fn build_query<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cell: &LstmCell,
    prenet_out: Var,
    position: Var,
    extra: Option<Var>,
    state: LstmState,
) -> Result<LstmState> {
    let input = match extra {
        Some(x) => tape.concat(&[prenet_out, position, x], 1)?,
        None => tape.concat(&[prenet_out, position], 1)?,
    };
    cell.step(tape, store, input, state)
}

/// Soft stepwise-monotonic transition (see [`Tape::sma_step`]).
pub fn sma_step<T: Scalar>(tape: &mut Tape<T>, alpha_prev: Var, p: Var) -> Result<Var> {
    tape.sma_step(alpha_prev, p)
}

/// One-hot transition: stay on `j` when `p_j >= 0.5`, else move to `j + 1`.
/// The last token never moves.
pub fn hard_step<T: Scalar>(alpha_prev: &[T], p: &[T]) -> Result<Vec<T>> {
    if alpha_prev.len() != p.len() {
        return Err(Error::Shape {
            op: "hard_step",
            lhs: vec![alpha_prev.len()],
            rhs: vec![p.len()],
        });
    }
    let ones: Vec<usize> = alpha_prev
        .iter()
        .enumerate()
        .filter(|(_, &a)| a != T::zero())
        .map(|(i, _)| i)
        .collect();
    let j = match ones.as_slice() {
        [j] if alpha_prev[*j] == T::one() => *j,
        _ => return Err(Error::invalid("hard_step", "alpha_prev is not one-hot")),
    };
    let n = alpha_prev.len();
    let next = if j + 1 == n || p[j] >= T::of(0.5) { j } else { j + 1 };
    let mut out = vec![T::zero(); n];
    out[next] = T::one();
    Ok(out)
}

/// Attention readout `sum_j alpha_j * value_j`, shape `[1, A]`.
pub fn context<T: Scalar>(tape: &mut Tape<T>, alpha: Var, values: Var) -> Result<Var> {
    tape.matmul(alpha, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attention() -> (ParamStore<f64>, PamaAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let att = PamaAttention::new(&mut store, 6, 4, 5, 50, 3, 1.0, &mut rng).unwrap();
        (store, att)
    }

    fn sma(prev: &[f64], p: &[f64]) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Array::row(prev.to_vec()));
        let pv = tape.constant(Array::row(p.to_vec()));
        let out = sma_step(&mut tape, a, pv).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn sma_examples() {
        assert_eq!(sma(&[1.0, 0.0, 0.0], &[0.5, 0.9, 0.1]), vec![0.5, 0.5, 0.0]);
        assert_eq!(sma(&[0.0, 0.0, 1.0], &[0.2, 0.3, 0.01]), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sma_rejects_unnormalized() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Array::row(vec![0.5, 0.2]));
        let p = tape.constant(Array::row(vec![0.5, 0.5]));
        assert!(sma_step(&mut tape, a, p).is_err());
    }

    #[test]
    fn hard_step_examples() {
        assert_eq!(
            hard_step(&[1.0, 0.0, 0.0], &[0.7, 0.1, 0.1]).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        assert_eq!(
            hard_step(&[1.0, 0.0, 0.0], &[0.3, 0.1, 0.1]).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        assert_eq!(
            hard_step(&[0.0, 0.0, 1.0], &[0.0, 0.0, 0.0]).unwrap(),
            vec![0.0, 0.0, 1.0]
        );
        assert!(hard_step(&[0.5, 0.5, 0.0], &[0.3, 0.1, 0.1]).is_err());
        assert!(hard_step(&[0.0, 0.0, 0.0], &[0.3, 0.1, 0.1]).is_err());
    }

    #[test]
    fn context_readout() {
        let mut tape = Tape::<f64>::new();
        let values = tape.constant(Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 9.0]]).unwrap());
        let one_hot = tape.constant(Array::row(vec![0.0, 1.0, 0.0]));
        let c = context(&mut tape, one_hot, values).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0]);
        let uniform = tape.constant(Array::row(vec![1.0 / 3.0; 3]));
        let c = context(&mut tape, uniform, values).unwrap();
        assert!((tape.value(c).data()[0] - 3.0).abs() < 1e-12);
        assert!((tape.value(c).data()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn position_embedding_contract() {
        let (store, att) = attention();
        let mut tape = Tape::new();
        let e00 = att
            .position_embed(&mut tape, &store, RelativePosition::ceiled(0, 0, 50))
            .unwrap();
        assert_eq!(tape.shape(e00), &[1, 6]);
        let (ft, bt) = att.position_tables();
        let expect: Vec<f64> = store
            .get(ft)
            .row_slice(0)
            .iter()
            .chain(store.get(bt).row_slice(0))
            .copied()
            .collect();
        assert_eq!(tape.value(e00).data(), expect.as_slice());

        let e12 = att
            .position_embed(&mut tape, &store, RelativePosition::ceiled(1, 2, 50))
            .unwrap();
        assert_ne!(tape.value(e00), tape.value(e12));

        let sat_a = att
            .position_embed(&mut tape, &store, RelativePosition::ceiled(50, 3, 50))
            .unwrap();
        let sat_b = att
            .position_embed(&mut tape, &store, RelativePosition::ceiled(100, 3, 50))
            .unwrap();
        assert_eq!(tape.value(sat_a), tape.value(sat_b));

        let raw = RelativePosition { fwd: 51, bwd: 0 };
        assert!(att.position_embed(&mut tape, &store, raw).is_err());
    }

    #[test]
    fn energy_symmetry_and_shape() {
        let (store, att) = attention();
        let mut tape = Tape::new();
        let q = tape.constant(Array::row(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4]));
        let keys = tape.constant(Array::full(&[4, 5], 0.25));
        let e = att.energy(&mut tape, &store, q, keys).unwrap();
        assert_eq!(tape.shape(e), &[1, 4]);
        let d = tape.value(e).data();
        assert!(d.iter().all(|&x| x == d[0] && x.is_finite()));
        let one = tape.constant(Array::full(&[1, 5], 0.25));
        let e = att.energy(&mut tape, &store, q, one).unwrap();
        assert_eq!(tape.shape(e), &[1, 1]);
    }

    #[test]
    fn memory_rows_are_local() {
        let (store, att) = attention();
        let enc = Array::from_rows(&[
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.5, 0.6, 0.7, 0.8],
            vec![-0.1, 0.0, 0.1, 0.2],
        ])
        .unwrap();
        let run = |code: Array<f64>| {
            let mut tape = Tape::new();
            let e = tape.constant(enc.clone());
            let c = tape.constant(code);
            let m = att.build_memory(&mut tape, &store, e, c).unwrap();
            (
                tape.value(m.memory).clone(),
                tape.value(m.keys).clone(),
                tape.value(m.values).clone(),
            )
        };
        let (m0, k0, v0) = run(Array::zeros(&[3, 4]));
        assert_eq!(m0, enc);
        assert_eq!(k0.shape(), &[3, 5]);
        let mut bumped = Array::zeros(&[3, 4]);
        bumped.data_mut()[4..8].copy_from_slice(&[1.0, -1.0, 0.5, 0.25]);
        let (_, k1, v1) = run(bumped);
        for r in 0..3 {
            let changed = k0.row_slice(r) != k1.row_slice(r) || v0.row_slice(r) != v1.row_slice(r);
            assert_eq!(changed, r == 1, "row {r}");
        }
    }
}

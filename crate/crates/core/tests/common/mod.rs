//! Shared test oracles: central finite differences over tape primitives.
#![allow(dead_code)]

use pama::numerics::nn::BiRecurrence;
use pama::numerics::{Array, ParamStore, Scalar, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prim {
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    Affine,
    ConcatRows,
    ConcatCols,
    SliceCols,
    GatherRows,
    Embedding,
    Sigmoid,
    Tanh,
    Relu,
    SoftmaxRows,
    SoftmaxCols,
    Conv1d,
    Recurrence,
    Dropout,
    Reshape,
    Sum,
    Mean,
    SumSquaredError,
    Mse,
    L1,
    CrossEntropy,
    SmaStep,
}

pub const ALL: &[Prim] = &[
    Prim::MatMul,
    Prim::Add,
    Prim::Sub,
    Prim::Mul,
    Prim::AddRow,
    Prim::Affine,
    Prim::ConcatRows,
    Prim::ConcatCols,
    Prim::SliceCols,
    Prim::GatherRows,
    Prim::Embedding,
    Prim::Sigmoid,
    Prim::Tanh,
    Prim::Relu,
    Prim::SoftmaxRows,
    Prim::SoftmaxCols,
    Prim::Conv1d,
    Prim::Recurrence,
    Prim::Dropout,
    Prim::Reshape,
    Prim::Sum,
    Prim::Mean,
    Prim::SumSquaredError,
    Prim::Mse,
    Prim::L1,
    Prim::CrossEntropy,
    Prim::SmaStep,
];

/// Random inputs for one primitive application.
pub struct Case {
    pub prim: Prim,
    pub inputs: Vec<Array<f64>>,
    pub params: ParamStore<f64>,
    pub rnn: Option<BiRecurrence>,
    pub indices: Vec<usize>,
    pub range: (usize, usize),
    pub seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array<f64> {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform in `[-1, 1]` but at least `0.05` away from zero, for kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    uniform(rng, shape, -1.0, 1.0).map(|v| if v.abs() < 0.05 { v.signum() * 0.5 } else { v })
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

impl Case {
    pub fn sample(prim: Prim, rng: &mut ChaCha8Rng) -> Self {
        let mut case = Case {
            prim,
            inputs: Vec::new(),
            params: ParamStore::new(),
            rnn: None,
            indices: Vec::new(),
            range: (0, 0),
            seed: rng.random(),
        };
        let (r, c) = dims(rng);
        let u = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);
        case.inputs = match prim {
            Prim::MatMul => {
                let k = rng.random_range(1..5);
                vec![u(rng, &[r, k]), u(rng, &[k, c])]
            }
            Prim::Add | Prim::Sub | Prim::Mul | Prim::SumSquaredError | Prim::Mse => {
                vec![u(rng, &[r, c]), u(rng, &[r, c])]
            }
            Prim::L1 => {
                let a = u(rng, &[r, c]);
                let b = away_from_zero(rng, &[r, c]);
                let b = Array::new(vec![r, c], a.data().iter().zip(b.data()).map(|(x, d)| x + d).collect()).unwrap();
                vec![a, b]
            }
            Prim::AddRow => vec![u(rng, &[r, c]), u(rng, &[c])],
            Prim::Affine | Prim::Sigmoid | Prim::Tanh | Prim::Sum | Prim::Mean | Prim::Dropout => {
                vec![uniform(rng, &[r, c], -2.0, 2.0)]
            }
            Prim::Relu => vec![away_from_zero(rng, &[r, c])],
            Prim::SoftmaxRows | Prim::SoftmaxCols | Prim::Reshape => vec![uniform(rng, &[r, c], -2.0, 2.0)],
            Prim::ConcatRows => {
                let r2 = rng.random_range(1..4);
                vec![u(rng, &[r, c]), u(rng, &[r2, c])]
            }
            Prim::ConcatCols => {
                let c2 = rng.random_range(1..4);
                let c3 = rng.random_range(1..3);
                vec![u(rng, &[r, c]), u(rng, &[r, c2]), u(rng, &[r, c3])]
            }
            Prim::SliceCols => {
                let c = c + 1;
                let start = rng.random_range(0..c - 1);
                let end = rng.random_range(start + 1..=c);
                case.range = (start, end);
                vec![u(rng, &[r, c])]
            }
            Prim::GatherRows | Prim::Embedding => {
                let n = rng.random_range(1..7);
                case.indices = (0..n).map(|_| rng.random_range(0..r)).collect();
                vec![u(rng, &[r, c])]
            }
            Prim::Conv1d => {
                let len = rng.random_range(1..7);
                let k = [1, 3, 5][rng.random_range(0..3)];
                let (cin, cout) = dims(rng);
                vec![u(rng, &[len, cin]), u(rng, &[k, cin, cout])]
            }
            Prim::Recurrence => {
                let len = rng.random_range(1..5);
                let (input, hidden) = dims(rng);
                case.rnn = Some(BiRecurrence::new(&mut case.params, "rnn", input, hidden, rng).unwrap());
                vec![u(rng, &[len, input])]
            }
            Prim::CrossEntropy => {
                case.indices = (0..r).map(|_| rng.random_range(0..c + 1)).collect();
                vec![uniform(rng, &[r, c + 1], -2.0, 2.0)]
            }
            Prim::SmaStep => {
                let n = rng.random_range(1..7);
                let raw = uniform(rng, &[r, n], 0.05, 1.0);
                let mut alpha = raw.clone();
                for i in 0..r {
                    let s: f64 = raw.row_slice(i).iter().sum();
                    for j in 0..n {
                        alpha.data_mut()[i * n + j] = raw.at(i, j) / s;
                    }
                }
                vec![alpha, uniform(rng, &[r, n], 0.05, 0.95)]
            }
        };
        case
    }

    fn store<T: Scalar>(&self) -> ParamStore<T> {
        let mut s = ParamStore::new();
        for (name, a) in self.params.names().iter().zip(self.params.arrays()) {
            s.insert(name, a.cast()).unwrap();
        }
        s
    }

    /// Applies the primitive and returns its (possibly non-scalar) output.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, v: &[Var]) -> Var {
        let out = match self.prim {
            Prim::MatMul => tape.matmul(v[0], v[1]),
            Prim::Add => tape.add(v[0], v[1]),
            Prim::Sub => tape.sub(v[0], v[1]),
            Prim::Mul => tape.mul(v[0], v[1]),
            Prim::AddRow => tape.add_row(v[0], v[1]),
            Prim::Affine => tape.affine(v[0], T::of(-1.7), T::of(0.3)),
            Prim::ConcatRows => tape.concat(v, 0),
            Prim::ConcatCols => tape.concat(v, 1),
            Prim::SliceCols => tape.slice_cols(v[0], self.range.0, self.range.1),
            Prim::GatherRows => tape.gather_rows(v[0], &self.indices),
            Prim::Embedding => tape.embedding_lookup(v[0], &self.indices),
            Prim::Sigmoid => tape.sigmoid(v[0]),
            Prim::Tanh => tape.tanh(v[0]),
            Prim::Relu => tape.relu(v[0]),
            Prim::SoftmaxRows => tape.softmax(v[0], 1),
            Prim::SoftmaxCols => tape.softmax(v[0], 0),
            Prim::Conv1d => tape.conv1d(v[0], v[1]),
            Prim::Recurrence => self.rnn.as_ref().unwrap().forward(tape, store, v[0]),
            Prim::Dropout => tape.dropout(v[0], 0.3, true, &mut ChaCha8Rng::seed_from_u64(self.seed)),
            Prim::Reshape => {
                let n = tape.value(v[0]).len();
                tape.reshape(v[0], vec![1, n])
            }
            Prim::Sum => tape.sum(v[0]),
            Prim::Mean => tape.mean(v[0]),
            Prim::SumSquaredError => tape.sum_squared_error(v[0], v[1]),
            Prim::Mse => tape.mse(v[0], v[1]),
            Prim::L1 => tape.l1(v[0], v[1]),
            Prim::CrossEntropy => tape.cross_entropy(v[0], &self.indices),
            Prim::SmaStep => tape.sma_step(v[0], v[1]),
        };
        out.unwrap()
    }

    /// Scalar objective `sum(out * proj)` with a fixed random projection.
    fn objective<T: Scalar>(&self, inputs: &[Array<T>], store: &ParamStore<T>) -> (Tape<T>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
        let out = self.apply(&mut tape, store, &vars);
        let shape = tape.shape(out).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let n: usize = shape.iter().product();
        let proj = Array::new(shape, (0..n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect()).unwrap();
        let proj = tape.constant(proj);
        let prod = tape.mul(out, proj).unwrap();
        let loss = tape.sum(prod).unwrap();
        (tape, vars, loss)
    }

    fn value_f64(&self, inputs: &[Array<f64>], store: &ParamStore<f64>) -> f64 {
        let (tape, _, loss) = self.objective(inputs, store);
        tape.value(loss).item()
    }

    /// `max|a - n| / max(max|a|, max|n|, 1e-10)` between analytic gradients
    /// in `T` and central differences in 64-bit, over every input and parameter.
    pub fn relative_error<T: Scalar>(&self) -> f64 {
        let store_t: ParamStore<T> = self.store();
        let inputs_t: Vec<Array<T>> = self.inputs.iter().map(|a| a.cast()).collect();
        let (tape, vars, loss) = self.objective(&inputs_t, &store_t);
        let grads = tape.backward(loss).unwrap();
        let mut analytic: Vec<f64> = vars
            .iter()
            .flat_map(|&v| grads.wrt(v).cast::<f64>().into_data())
            .collect();
        for g in grads.params(&store_t) {
            analytic.extend(g.cast::<f64>().into_data());
        }

        let mut numeric = Vec::with_capacity(analytic.len());
        let mut inputs = self.inputs.clone();
        for i in 0..inputs.len() {
            for k in 0..inputs[i].len() {
                let orig = inputs[i].data()[k];
                inputs[i].data_mut()[k] = orig + FD_EPS;
                let up = self.value_f64(&inputs, &self.params);
                inputs[i].data_mut()[k] = orig - FD_EPS;
                let down = self.value_f64(&inputs, &self.params);
                inputs[i].data_mut()[k] = orig;
                numeric.push((up - down) / (2.0 * FD_EPS));
            }
        }
        let mut params = self.params.clone();
        for p in 0..params.len() {
            for k in 0..params.arrays()[p].len() {
                let orig = params.arrays()[p].data()[k];
                params.arrays_mut()[p].data_mut()[k] = orig + FD_EPS;
                let up = self.value_f64(&self.inputs, &params);
                params.arrays_mut()[p].data_mut()[k] = orig - FD_EPS;
                let down = self.value_f64(&self.inputs, &params);
                params.arrays_mut()[p].data_mut()[k] = orig;
                numeric.push((up - down) / (2.0 * FD_EPS));
            }
        }
        relative(&analytic, &numeric)
    }
}

pub fn relative(a: &[f64], n: &[f64]) -> f64 {
    assert_eq!(a.len(), n.len());
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|x| x.abs()).fold(1e-10, f64::max);
    diff / scale
}

/// Worst relative error per primitive over `cases` random applications.
pub fn suite<T: Scalar>(cases: usize, seed: u64) -> Vec<(Prim, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ALL.iter()
        .map(|&p| {
            let worst = (0..cases)
                .map(|_| Case::sample(p, &mut rng).relative_error::<T>())
                .fold(0.0, f64::max);
            (p, worst)
        })
        .collect()
}

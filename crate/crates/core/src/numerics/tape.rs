//! Tape-based reverse-mode differentiation over dense arrays.
//!
//! Every primitive evaluates eagerly, appends one node to the tape and
//! returns a [`Var`] handle. [`Tape::backward`] walks the nodes in exact
//! reverse order of creation and accumulates vector-Jacobian products.

use super::array::{Array, Scalar};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, T),
    Concat(Vec<Var>, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var, usize),
    Conv1d(Var, Var),
    MaskMul(Var, Vec<T>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumSquaredError(Var, Var),
    Mse(Var, Var),
    L1(Var, Var),
    CrossEntropy(Var, Vec<usize>, Vec<T>),
    SmaStep(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Ordered record of primitive ops.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: Vec<Option<Var>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any recorded value; zeros when unreached.
    pub fn wrt(&self, v: Var) -> Array<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array::zeros(&self.shapes[v.0]),
        }
    }

    /// Adds `scale` times each parameter gradient into `acc`, indexed by parameter id.
    pub fn accumulate_params(&self, acc: &mut [Array<T>], scale: T) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                let dst = acc[id.index()].data_mut();
                for (d, &s) in dst.iter_mut().zip(g.data()) {
                    *d += scale * s;
                }
            }
        }
    }

    /// Per-parameter gradients for a store of `count` parameters.
    pub fn params(&self, store: &ParamStore<T>) -> Vec<Array<T>> {
        let mut out: Vec<Array<T>> = store.arrays().iter().map(|a| Array::zeros(a.shape())).collect();
        self.accumulate_params(&mut out, T::one());
        out
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Array<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input value (no parameter binding).
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter of `store`; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bound.get(id.index()) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        if self.bound.len() <= id.index() {
            self.bound.resize(id.index() + 1, None);
        }
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![T::zero(); m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = ad[i * k + p];
                if s == T::zero() {
                    continue;
                }
                for (o, &w) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += s * w;
                }
            }
        }
        self.push("matmul", Array::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Array::new(av.shape().to_vec(), data)?;
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[r, c] + row[c]` for every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.cols();
        if rv.len() != c || xv.shape().len() != 2 {
            return Err(shape_err("add_row", xv.shape(), rv.shape()));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (d, &b) in chunk.iter_mut().zip(rv.data()) {
                *d += b;
            }
        }
        let value = Array::new(xv.shape().to_vec(), data)?;
        self.push("add_row", value, Op::AddRow(x, row))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push("affine", value, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    /// Concatenates 2-D values along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::invalid("concat", "needs at least one part and axis 0 or 1"));
        }
        let first = self.value(parts[0]);
        let (rows0, cols0) = (first.rows(), first.cols());
        let value = if axis == 1 {
            let mut total = 0;
            for &p in parts {
                let v = self.value(p);
                if v.rows() != rows0 {
                    return Err(shape_err("concat", first.shape(), v.shape()));
                }
                total += v.cols();
            }
            let mut data = Vec::with_capacity(rows0 * total);
            for r in 0..rows0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(r));
                }
            }
            Array::new(vec![rows0, total], data)?
        } else {
            let mut rows = 0;
            let mut data = Vec::new();
            for &p in parts {
                let v = self.value(p);
                if v.cols() != cols0 {
                    return Err(shape_err("concat", first.shape(), v.shape()));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Array::new(vec![rows, cols0], data)?
        };
        self.push("concat", value, Op::Concat(parts.to_vec(), axis))
    }

    /// Columns `start..end` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start >= end || end > c {
            return Err(Error::invalid(
                "slice_cols",
                format!("range {start}..{end} outside {:?}", xv.shape()),
            ));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&xv.row_slice(i)[start..end]);
        }
        let value = Array::new(vec![r, end - start], data)?;
        self.push("slice_cols", value, Op::SliceCols(x, start))
    }

    /// Selects rows by index; duplicates allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= xv.rows() {
                return Err(Error::invalid(
                    "gather_rows",
                    format!("row {r} outside {:?}", xv.shape()),
                ));
            }
            data.extend_from_slice(xv.row_slice(r));
        }
        let value = Array::new(vec![rows.len(), c], data)?;
        self.push("gather_rows", value, Op::GatherRows(x, rows.to_vec()))
    }

    /// Rows `index` of an embedding table.
    pub fn embedding_lookup(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        self.gather_rows(table, index)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.tanh());
        self.push("tanh", value, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", value, Op::Relu(x))
    }

    /// Softmax of a 2-D value along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis > 1 || xv.shape().len() > 2 {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} invalid for shape {:?}", xv.shape()),
            ));
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = xv.data().to_vec();
        let lanes: Vec<Vec<usize>> = if axis == 1 {
            (0..r).map(|i| (i * c..(i + 1) * c).collect()).collect()
        } else {
            (0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect()
        };
        for lane in lanes {
            let m = lane.iter().map(|&i| data[i]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for &i in &lane {
                data[i] = (data[i] - m).exp();
                z += data[i];
            }
            for &i in &lane {
                data[i] = data[i] / z;
            }
        }
        let value = Array::new(xv.shape().to_vec(), data)?;
        self.push("softmax", value, Op::Softmax(x, axis))
    }

    /// Same-padded 1-D convolution: signal `[L, Cin]`, kernel `[K, Cin, Cout]`, K odd.
    pub fn conv1d(&mut self, signal: Var, kernel: Var) -> Result<Var> {
        let (sv, kv) = (self.value(signal), self.value(kernel));
        let ks = kv.shape();
        if ks.len() != 3 || sv.shape().len() != 2 || ks[1] != sv.cols() || ks[0] % 2 == 0 {
            return Err(shape_err("conv1d", sv.shape(), ks));
        }
        let (len, cin) = (sv.rows(), sv.cols());
        let (k, cout) = (ks[0], ks[2]);
        let half = k / 2;
        let (x, w) = (sv.data(), kv.data());
        let mut out = vec![T::zero(); len * cout];
        for t in 0..len {
            let orow = &mut out[t * cout..(t + 1) * cout];
            for tap in 0..k {
                let src = t + tap;
                if src < half || src - half >= len {
                    continue;
                }
                let xrow = &x[(src - half) * cin..(src - half + 1) * cin];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let wrow = &w[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let value = Array::new(vec![len, cout], out)?;
        self.push("conv1d", value, Op::Conv1d(signal, kernel))
    }

    /// Multiplies by a fixed mask (dropout with the keep-scale folded into the mask).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(shape_err("dropout", xv.shape(), &[mask.len()]));
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Array::new(xv.shape().to_vec(), data)?;
        self.push("dropout", value, Op::MaskMul(x, mask))
    }

    /// Inverted dropout. Identity when `train` is false or `p` is zero.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut impl rand::Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.mask_mul(x, mask)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Array::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::invalid("mean", "empty input"));
        }
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.len() as f64);
        self.push("mean", Array::scalar(m), Op::Mean(x))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.rows() != bv.rows() {
            return Err(shape_err(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    /// `sum((a - b)^2)`.
    pub fn sum_squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sum_squared_error", a, b)?;
        let s = sq_diff_sum(self.value(a).data(), self.value(b).data());
        self.push("sum_squared_error", Array::scalar(s), Op::SumSquaredError(a, b))
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mse", a, b)?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid("mse", "empty input"));
        }
        let s = sq_diff_sum(self.value(a).data(), self.value(b).data()) / T::of(n as f64);
        self.push("mse", Array::scalar(s), Op::Mse(a, b))
    }

    /// Mean absolute error over all entries.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("l1", a, b)?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid("l1", "empty input"));
        }
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        self.push("l1", Array::scalar(s / T::of(n as f64)), Op::L1(a, b))
    }

    /// Mean softmax cross-entropy of `logits[n, K]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = (lv.rows(), lv.cols());
        if labels.len() != n || n == 0 {
            return Err(shape_err("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("label {label} outside {k} classes"),
                ));
            }
            let row = lv.row_slice(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let log_z = z.ln() + m;
            loss += log_z - row[label];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let value = Array::scalar(loss / T::of(n as f64));
        self.push("cross_entropy", value, Op::CrossEntropy(logits, labels.to_vec(), probs))
    }

    /// One stepwise-monotonic transition on rows of `[B, N]`:
    /// `alpha_j = prev_j * p_j + prev_{j-1} * (1 - p_{j-1})`, with the last
    /// selection probability of each row forced to 1 so the final token absorbs.
    pub fn sma_step(&mut self, alpha_prev: Var, p: Var) -> Result<Var> {
        let (av, pv) = (self.value(alpha_prev), self.value(p));
        if av.shape() != pv.shape() || av.shape().len() != 2 {
            return Err(shape_err("sma_step", av.shape(), pv.shape()));
        }
        let n = av.cols();
        let tol = T::of(1e-4);
        let mut out = vec![T::zero(); av.len()];
        for r in 0..av.rows() {
            let a = av.row_slice(r);
            let pr = pv.row_slice(r);
            let total: T = a.iter().copied().sum();
            if (total - T::one()).abs() > tol || a.iter().any(|&x| x < -tol) {
                return Err(Error::invalid(
                    "sma_step",
                    format!("alpha_prev row {r} is not a distribution (sum {total})"),
                ));
            }
            if pr.iter().any(|&x| x < T::zero() || x > T::one()) {
                return Err(Error::invalid("sma_step", "selection probability outside [0, 1]"));
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut carry = T::zero();
            for j in 0..n {
                let pj = if j + 1 == n { T::one() } else { pr[j] };
                o[j] = a[j] * pj + carry;
                carry = a[j] * (T::one() - pj);
            }
        }
        let value = Array::new(av.shape().to_vec(), out)?;
        self.push("sma_step", value, Op::SmaStep(alpha_prev, p))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "grad",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
            .collect();
        Ok(Gradients { grads, shapes, params })
    }

    fn backprop_node(&self, i: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                {
                    let da = slot(grads, *a, av);
                    let bd = bv.data();
                    for r in 0..m {
                        let grow = &gd[r * n..(r + 1) * n];
                        for p in 0..k {
                            let s: T = grow.iter().zip(&bd[p * n..(p + 1) * n]).map(|(&x, &y)| x * y).sum();
                            da[r * k + p] += s;
                        }
                    }
                }
                let db = slot(grads, *b, bv);
                let ad = av.data();
                for r in 0..m {
                    let grow = &gd[r * n..(r + 1) * n];
                    for p in 0..k {
                        let s = ad[r * k + p];
                        if s == T::zero() {
                            continue;
                        }
                        for (d, &x) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += s * x;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, val(*a)), gd, T::one());
                add_into(slot(grads, *b, val(*b)), gd, T::one());
            }
            Op::Sub(a, b) => {
                add_into(slot(grads, *a, val(*a)), gd, T::one());
                add_into(slot(grads, *b, val(*b)), gd, -T::one());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da = slot(grads, *a, av);
                for ((d, &x), &y) in da.iter_mut().zip(gd).zip(bv.data()) {
                    *d += x * y;
                }
                let db = slot(grads, *b, bv);
                for ((d, &x), &y) in db.iter_mut().zip(gd).zip(av.data()) {
                    *d += x * y;
                }
            }
            Op::AddRow(x, row) => {
                let c = val(*x).cols();
                add_into(slot(grads, *x, val(*x)), gd, T::one());
                let dr = slot(grads, *row, val(*row));
                for chunk in gd.chunks(c) {
                    for (d, &v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
            }
            Op::Affine(x, s) => add_into(slot(grads, *x, val(*x)), gd, *s),
            Op::Concat(parts, axis) => {
                let out_cols = node.value.cols();
                if *axis == 1 {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let (r, c) = (pv.rows(), pv.cols());
                        let dp = slot(grads, p, pv);
                        for row in 0..r {
                            let src = &gd[row * out_cols + offset..row * out_cols + offset + c];
                            for (d, &v) in dp[row * c..(row + 1) * c].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                        offset += c;
                    }
                } else {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let len = pv.len();
                        add_into(slot(grads, p, pv), &gd[offset..offset + len], T::one());
                        offset += len;
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let c = xv.cols();
                let w = node.value.cols();
                let dx = slot(grads, *x, xv);
                for r in 0..node.value.rows() {
                    for (d, &v) in dx[r * c + start..r * c + start + w]
                        .iter_mut()
                        .zip(&gd[r * w..(r + 1) * w])
                    {
                        *d += v;
                    }
                }
            }
            Op::GatherRows(x, rows) => {
                let xv = val(*x);
                let c = xv.cols();
                let dx = slot(grads, *x, xv);
                for (k, &r) in rows.iter().enumerate() {
                    for (d, &v) in dx[r * c..(r + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                        *d += v;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = slot(grads, *x, val(*x));
                for ((d, &gv), &yv) in dx.iter_mut().zip(gd).zip(y) {
                    *d += gv * yv * (T::one() - yv);
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let dx = slot(grads, *x, val(*x));
                for ((d, &gv), &yv) in dx.iter_mut().zip(gd).zip(y) {
                    *d += gv * (T::one() - yv * yv);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let dx = slot(grads, *x, xv);
                for ((d, &gv), &v) in dx.iter_mut().zip(gd).zip(xv.data()) {
                    if v > T::zero() {
                        *d += gv;
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let yd = y.data();
                let dx = slot(grads, *x, val(*x));
                let lanes: Vec<Vec<usize>> = if *axis == 1 {
                    (0..r).map(|i| (i * c..(i + 1) * c).collect()).collect()
                } else {
                    (0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect()
                };
                for lane in lanes {
                    let dot: T = lane.iter().map(|&i| gd[i] * yd[i]).sum();
                    for &i in &lane {
                        dx[i] += yd[i] * (gd[i] - dot);
                    }
                }
            }
            Op::Conv1d(signal, kernel) => {
                let (sv, kv) = (val(*signal), val(*kernel));
                let ks = kv.shape();
                let (len, cin) = (sv.rows(), sv.cols());
                let (k, cout) = (ks[0], ks[2]);
                let half = k / 2;
                let (x, w) = (sv.data(), kv.data());
                {
                    let dx = slot(grads, *signal, sv);
                    for t in 0..len {
                        let grow = &gd[t * cout..(t + 1) * cout];
                        for tap in 0..k {
                            let src = t + tap;
                            if src < half || src - half >= len {
                                continue;
                            }
                            let base = (src - half) * cin;
                            for ci in 0..cin {
                                let wrow = &w[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
                                let s: T = grow.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
                                dx[base + ci] += s;
                            }
                        }
                    }
                }
                let dw = slot(grads, *kernel, kv);
                for t in 0..len {
                    let grow = &gd[t * cout..(t + 1) * cout];
                    for tap in 0..k {
                        let src = t + tap;
                        if src < half || src - half >= len {
                            continue;
                        }
                        let xrow = &x[(src - half) * cin..(src - half + 1) * cin];
                        for (ci, &xv) in xrow.iter().enumerate() {
                            let off = (tap * cin + ci) * cout;
                            for (d, &gv) in dw[off..off + cout].iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
            Op::MaskMul(x, mask) => {
                let dx = slot(grads, *x, val(*x));
                for ((d, &gv), &m) in dx.iter_mut().zip(gd).zip(mask) {
                    *d += gv * m;
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, val(*x)), gd, T::one()),
            Op::Sum(x) => {
                let s = gd[0];
                for d in slot(grads, *x, val(*x)) {
                    *d += s;
                }
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let s = gd[0] / T::of(xv.len() as f64);
                for d in slot(grads, *x, xv) {
                    *d += s;
                }
            }
            Op::SumSquaredError(a, b) | Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = if matches!(node.op, Op::Mse(..)) { av.len() } else { 1 };
                let s = gd[0] * T::of(2.0 / n as f64);
                let diff: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
                add_into(slot(grads, *a, av), &diff, s);
                add_into(slot(grads, *b, bv), &diff, -s);
            }
            Op::L1(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let s = gd[0] / T::of(av.len() as f64);
                let sign: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            T::one()
                        } else if d < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                add_into(slot(grads, *a, av), &sign, s);
                add_into(slot(grads, *b, bv), &sign, -s);
            }
            Op::CrossEntropy(logits, labels, probs) => {
                let lv = val(*logits);
                let k = lv.cols();
                let s = gd[0] / T::of(labels.len() as f64);
                let dl = slot(grads, *logits, lv);
                for (i, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let target = if j == label { T::one() } else { T::zero() };
                        dl[i * k + j] += s * (probs[i * k + j] - target);
                    }
                }
            }
            Op::SmaStep(alpha_prev, p) => {
                let (av, pv) = (val(*alpha_prev), val(*p));
                let n = av.cols();
                let rows = av.rows();
                {
                    let da = slot(grads, *alpha_prev, av);
                    for r in 0..rows {
                        let pr = pv.row_slice(r);
                        for j in 0..n {
                            let pj = if j + 1 == n { T::one() } else { pr[j] };
                            let mut d = gd[r * n + j] * pj;
                            if j + 1 < n {
                                d += gd[r * n + j + 1] * (T::one() - pj);
                            }
                            da[r * n + j] += d;
                        }
                    }
                }
                let dp = slot(grads, *p, pv);
                for r in 0..rows {
                    let a = av.row_slice(r);
                    for j in 0..n.saturating_sub(1) {
                        dp[r * n + j] += a[j] * (gd[r * n + j] - gd[r * n + j + 1]);
                    }
                }
            }
        }
    }
}

fn sq_diff_sum<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T], s: T) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

fn slot<'g, T: Scalar>(grads: &'g mut [Option<Array<T>>], v: Var, like: &Array<T>) -> &'g mut [T] {
    grads[v.0].get_or_insert_with(|| Array::zeros(like.shape())).data_mut()
}

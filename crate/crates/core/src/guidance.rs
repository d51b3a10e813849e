//! Guided-attention targets built from alignment labels, and the alignment loss.

use crate::error::{Error, Result};
use crate::numerics::{Array, Scalar, Tape, Var};

/// Outgoing-token weights over the six frames straddling a boundary
/// (three before the first frame of the next token, three from it on).
pub const RAMP_OUT: [f64; 6] = [1.0, 0.8, 0.6, 0.4, 0.2, 0.0];
/// Frames of the ramp that precede the boundary frame.
pub const RAMP_LEAD: usize = 3;

/// Frame counts per filtered token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentLabel {
    durations: Vec<usize>,
}

impl AlignmentLabel {
    pub fn new(durations: Vec<usize>) -> Result<Self> {
        if durations.is_empty() {
            return Err(Error::Label("no tokens".into()));
        }
        if let Some(i) = durations.iter().position(|&d| d == 0) {
            return Err(Error::Label(format!("token {i} has zero frames")));
        }
        Ok(Self { durations })
    }

    pub fn durations(&self) -> &[usize] {
        &self.durations
    }

    pub fn tokens(&self) -> usize {
        self.durations.len()
    }

    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// First frame of each token, plus the total frame count at the end.
    pub fn starts(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.durations.len() + 1);
        let mut acc = 0;
        out.push(0);
        for &d in &self.durations {
            acc += d;
            out.push(acc);
        }
        out
    }

    /// Token index of every frame.
    pub fn frame_tokens(&self) -> Vec<usize> {
        self.durations
            .iter()
            .enumerate()
            .flat_map(|(j, &d)| std::iter::repeat_n(j, d))
            .collect()
    }
}

/// `N x T` target attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMatrix {
    weights: Array<f64>,
}

impl GuidanceMatrix {
    pub fn tokens(&self) -> usize {
        self.weights.rows()
    }

    pub fn frames(&self) -> usize {
        self.weights.cols()
    }

    pub fn at(&self, token: usize, frame: usize) -> f64 {
        self.weights.at(token, frame)
    }

    /// Token-major `[N, T]` weights.
    pub fn weights(&self) -> &Array<f64> {
        &self.weights
    }

    /// Frame-major `[T, N]` copy, matching the layout of an attention trace.
    pub fn frame_major<T: Scalar>(&self) -> Array<T> {
        self.weights.transposed().cast()
    }

    pub fn column_sum(&self, frame: usize) -> f64 {
        (0..self.tokens()).map(|j| self.at(j, frame)).sum()
    }
}

/// One-hot spans: `W[j, t] = 1` iff frame `t` belongs to token `j`.
pub fn hard_matrix(label: &AlignmentLabel) -> GuidanceMatrix {
    let (n, t) = (label.tokens(), label.frames());
    let mut w = Array::zeros(&[n, t]);
    for (frame, j) in label.frame_tokens().into_iter().enumerate() {
        w.data_mut()[j * t + frame] = 1.0;
    }
    GuidanceMatrix { weights: w }
}

/// Hard spans with six-frame linear ramps at every internal boundary.
///
/// Around the first frame `b` of token `j + 1`, frames `b-3..=b+2` carry
/// [`RAMP_OUT`] for token `j` and its complement for token `j + 1`. Entries
/// touched by several ramps are summed and each column is renormalized.
pub fn fuzzy_matrix(label: &AlignmentLabel) -> GuidanceMatrix {
    let (n, t) = (label.tokens(), label.frames());
    let starts = label.starts();
    let hard = hard_matrix(label);
    let mut w = vec![0.0; n * t];
    let mut touched = vec![false; n * t];

    for j in 1..n {
        let b = starts[j] as isize;
        for (k, &out) in RAMP_OUT.iter().enumerate() {
            let frame = b - RAMP_LEAD as isize + k as isize;
            if frame < 0 || frame >= t as isize {
                continue;
            }
            let f = frame as usize;
            w[(j - 1) * t + f] += out;
            touched[(j - 1) * t + f] = true;
            w[j * t + f] += 1.0 - out;
            touched[j * t + f] = true;
        }
    }
    for i in 0..n * t {
        if !touched[i] {
            w[i] = hard.weights.data()[i];
        }
    }
    for f in 0..t {
        let s: f64 = (0..n).map(|j| w[j * t + f]).sum();
        for j in 0..n {
            w[j * t + f] /= s;
        }
    }
    GuidanceMatrix {
        weights: Array::new(vec![n, t], w).expect("shape matches"),
    }
}

/// `(1/T) * sum((W - A)^2)` over all entries of frame-major `[T, N]` inputs.
pub fn alignment_loss<T: Scalar>(tape: &mut Tape<T>, guidance: Var, attention: Var) -> Result<Var> {
    if tape.shape(guidance) != tape.shape(attention) {
        return Err(Error::Shape {
            op: "alignment_loss",
            lhs: tape.shape(guidance).to_vec(),
            rhs: tape.shape(attention).to_vec(),
        });
    }
    let frames = tape.value(attention).rows();
    let sse = tape.sum_squared_error(attention, guidance)?;
    tape.scale(sse, T::of(1.0 / frames as f64))
}

/// Parses `utt_id: d1 d2 ... dN` lines; blank lines and `#` comments are skipped.
pub fn parse_label_file(text: &str, source_name: &str) -> Result<Vec<(String, AlignmentLabel)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            msg,
        };
        let (id, rest) = line
            .split_once(':')
            .ok_or_else(|| err("missing `utt_id:` prefix".into()))?;
        let durations = rest
            .split_whitespace()
            .map(|w| w.parse::<usize>().map_err(|_| err(format!("bad frame count `{w}`"))))
            .collect::<Result<Vec<_>>>()?;
        let label = AlignmentLabel::new(durations).map_err(|e| err(e.to_string()))?;
        out.push((id.trim().to_string(), label));
    }
    Ok(out)
}

pub fn format_label_line(utt_id: &str, label: &AlignmentLabel) -> String {
    let ds: Vec<String> = label.durations().iter().map(|d| d.to_string()).collect();
    format!("{utt_id}: {}", ds.join(" "))
}

//! Duration error and alignment robustness measured from attention traces.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::InferenceMode;
use crate::error::{Error, Result};
use crate::inference::synthesize;
use crate::model::Model;
use crate::numerics::{Array, ParamStore};
use crate::tokens::TokenSequence;

/// Argmax token of every row of a frame-major `[T, N]` trace.
pub fn argmax_path(attention: &Array<f64>) -> Vec<usize> {
    (0..attention.rows())
        .map(|t| {
            let row = attention.row_slice(t);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Frames per token, counting the steps at which each token is the argmax.
pub fn duration_from_attention(attention: &Array<f64>) -> Vec<usize> {
    let mut d = vec![0; attention.cols()];
    for j in argmax_path(attention) {
        d[j] += 1;
    }
    d
}

/// Mean absolute difference in frames.
pub fn duration_mae(predicted: &[usize], measured: &[usize]) -> Result<f64> {
    if predicted.len() != measured.len() {
        return Err(Error::Shape {
            op: "duration_mae",
            lhs: vec![predicted.len()],
            rhs: vec![measured.len()],
        });
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let sum: usize = predicted.iter().zip(measured).map(|(&a, &b)| a.abs_diff(b)).sum();
    Ok(sum as f64 / predicted.len() as f64)
}

/// Alignment failures in one trace.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Robustness {
    /// Tokens that are never the argmax.
    pub skipped: usize,
    /// Steps where the argmax moves backwards.
    pub regressions: usize,
    pub truncations: usize,
}

impl std::ops::AddAssign for Robustness {
    fn add_assign(&mut self, o: Self) {
        self.skipped += o.skipped;
        self.regressions += o.regressions;
        self.truncations += o.truncations;
    }
}

pub fn robustness(attention: &Array<f64>, truncated: bool) -> Robustness {
    let path = argmax_path(attention);
    Robustness {
        skipped: duration_from_attention(attention).iter().filter(|&&d| d == 0).count(),
        regressions: path.windows(2).filter(|w| w[1] < w[0]).count(),
        truncations: usize::from(truncated),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceEval {
    pub id: String,
    pub scaled: Vec<usize>,
    pub measured: Vec<usize>,
    pub mae: f64,
    pub frames: usize,
    pub robustness: Robustness,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorReport {
    pub factor: f64,
    pub utterances: Vec<UtteranceEval>,
}

impl FactorReport {
    pub fn mae(&self) -> f64 {
        self.utterances.iter().map(|u| u.mae).sum::<f64>() / self.utterances.len() as f64
    }

    pub fn robustness(&self) -> Robustness {
        let mut r = Robustness::default();
        for u in &self.utterances {
            r += u.robustness;
        }
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub factors: Vec<FactorReport>,
}

impl EvalReport {
    fn reference(&self) -> Option<&FactorReport> {
        self.factors.iter().find(|f| f.factor == 1.0)
    }

    /// Per-utterance `frames(f) / (f * frames(1.0))`, when factor 1.0 was evaluated.
    pub fn rate_ratios(&self, factor: &FactorReport) -> Option<Vec<f64>> {
        let base = self.reference()?;
        Some(
            factor
                .utterances
                .iter()
                .zip(&base.utterances)
                .map(|(u, b)| u.frames as f64 / (factor.factor * b.frames as f64))
                .collect(),
        )
    }

    /// Summary table then per-utterance rows, tab-separated. Durations are
    /// in frames.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# durations in frames\n");
        out.push_str("factor\tmae_frames\tskipped\tregressions\ttruncations\tratio_min\tratio_max\n");
        for f in &self.factors {
            let r = f.robustness();
            let (lo, hi) = match self.rate_ratios(f) {
                Some(v) => (
                    v.iter().copied().fold(f64::INFINITY, f64::min),
                    v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ),
                None => (f64::NAN, f64::NAN),
            };
            let _ = writeln!(
                out,
                "{}\t{:.4}\t{}\t{}\t{}\t{:.4}\t{:.4}",
                f.factor,
                f.mae(),
                r.skipped,
                r.regressions,
                r.truncations,
                lo,
                hi
            );
        }
        out.push_str("\nfactor\tutt_id\tframes\tmae_frames\tskipped\tregressions\ttruncated\tscaled\tmeasured\n");
        for f in &self.factors {
            for u in &f.utterances {
                let join = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{:.4}\t{}\t{}\t{}\t{}\t{}",
                    f.factor,
                    u.id,
                    u.frames,
                    u.mae,
                    u.robustness.skipped,
                    u.robustness.regressions,
                    u.robustness.truncations,
                    join(&u.scaled),
                    join(&u.measured)
                );
            }
        }
        out
    }
}

/// Synthesizes every utterance at every factor. Dropout draws are seeded
/// per utterance so results do not depend on evaluation order.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    utterances: &[(String, TokenSequence)],
    factors: &[f64],
    mode: InferenceMode,
) -> Result<EvalReport> {
    if utterances.is_empty() {
        return Err(Error::invalid("evaluate", "empty evaluation set"));
    }
    if factors.is_empty() {
        return Err(Error::invalid("evaluate", "no duration factors"));
    }
    let mut reports = Vec::with_capacity(factors.len());
    for &factor in factors {
        let mut utts = Vec::with_capacity(utterances.len());
        for (i, (id, tokens)) in utterances.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
            rng.set_stream(i as u64);
            let syn = synthesize(model, store, tokens, factor, mode, &mut rng)?;
            let measured = duration_from_attention(&syn.attention);
            utts.push(UtteranceEval {
                id: id.clone(),
                mae: duration_mae(&syn.scaled, &measured)?,
                frames: syn.path.len(),
                robustness: robustness(&syn.attention, syn.truncated),
                scaled: syn.scaled,
                measured,
            });
        }
        reports.push(FactorReport {
            factor,
            utterances: utts,
        });
    }
    Ok(EvalReport { factors: reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(path: &[usize], n: usize) -> Array<f64> {
        let mut a = Array::zeros(&[path.len(), n]);
        for (t, &j) in path.iter().enumerate() {
            a.data_mut()[t * n + j] = 1.0;
        }
        a
    }

    #[test]
    fn duration_examples() {
        assert_eq!(duration_from_attention(&trace(&[0, 0, 1, 1, 1], 2)), vec![2, 3]);
        assert_eq!(duration_from_attention(&trace(&[0, 0, 0, 0], 1)), vec![4]);
        let soft = Array::from_rows(&[vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        assert_eq!(duration_from_attention(&soft), vec![1, 1]);
    }

    #[test]
    fn mae_examples() {
        assert_eq!(duration_mae(&[4, 6], &[4, 6]).unwrap(), 0.0);
        assert_eq!(duration_mae(&[4, 6], &[5, 6]).unwrap(), 0.5);
        assert!(duration_mae(&[4], &[4, 6]).is_err());
    }

    #[test]
    fn robustness_examples() {
        assert_eq!(robustness(&trace(&[0, 1, 1, 2, 3], 4), false), Robustness::default());
        let missing = robustness(&trace(&[0, 1, 2, 4], 5), false);
        assert_eq!((missing.skipped, missing.regressions), (1, 0));
        let back = robustness(&trace(&[0, 1, 0, 1, 2], 3), true);
        assert_eq!((back.skipped, back.regressions, back.truncations), (0, 1, 1));
    }

    #[test]
    fn report_layout() {
        let mk = |factor: f64, frames: usize| FactorReport {
            factor,
            utterances: vec![UtteranceEval {
                id: "u1".into(),
                scaled: vec![2, 3],
                measured: vec![2, 4],
                mae: 0.5,
                frames,
                robustness: Robustness::default(),
            }],
        };
        let r = EvalReport {
            factors: vec![mk(0.75, 6), mk(1.0, 8), mk(1.5, 12)],
        };
        assert_eq!(r.rate_ratios(&r.factors[2]).unwrap(), vec![1.0]);
        let tsv = r.to_tsv();
        let summary: Vec<&str> = tsv.lines().skip(2).take(3).collect();
        assert!(summary[0].starts_with("0.75\t0.5000\t0\t0\t0\t1.0000"));
        assert!(summary[2].starts_with("1.5\t"));
        assert!(tsv.lines().all(|l| !l.contains("  ")));
    }
}

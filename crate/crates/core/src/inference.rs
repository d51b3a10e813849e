//! Autoregressive synthesis with position tracking, rate control and the
//! duration-based stop rule.

use rand::Rng;

use crate::attention::RelativePosition;
use crate::config::InferenceMode;
use crate::error::{Error, Result};
use crate::model::{Model, Stepping};
use crate::numerics::{Array, ParamStore, Scalar, Tape};
use crate::tokens::TokenSequence;

/// `round_half_up(pred * factor)`, at least one frame per token.
pub fn scale_durations(pred: &[f64], factor: f64) -> Result<Vec<usize>> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::invalid(
            "scale_durations",
            format!("factor must be positive, got {factor}"),
        ));
    }
    Ok(pred
        .iter()
        .map(|&d| {
            let v = (d * factor + 0.5).floor();
            if v.is_finite() && v >= 1.0 {
                v as usize
            } else {
                1
            }
        })
        .collect())
}

/// A jump or backward move of the tracked token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathEvent {
    pub step: usize,
    pub from: usize,
    pub to: usize,
}

/// Position bookkeeping along the argmax path of the attention.
///
/// Before the first frame nothing has been spent; the first advance enters
/// a token with `frames_spent = 0`.
#[derive(Clone, Debug)]
pub struct DecodeState {
    durations: Vec<usize>,
    ceiling: usize,
    token: usize,
    frames_spent: usize,
    started: bool,
    emitted: usize,
    cap: usize,
    path: Vec<usize>,
    skips: Vec<PathEvent>,
    regressions: Vec<PathEvent>,
}

impl DecodeState {
    pub fn new(durations: Vec<usize>, ceiling: usize, cap: usize) -> Result<Self> {
        if durations.is_empty() || durations.contains(&0) {
            return Err(Error::invalid(
                "decode_state",
                "durations must be non-empty and positive",
            ));
        }
        Ok(Self {
            durations,
            ceiling,
            token: 0,
            frames_spent: 0,
            started: false,
            emitted: 0,
            cap,
            path: Vec::new(),
            skips: Vec::new(),
            regressions: Vec::new(),
        })
    }

    pub fn token(&self) -> usize {
        self.token
    }

    pub fn frames_spent(&self) -> usize {
        self.frames_spent
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn durations(&self) -> &[usize] {
        &self.durations
    }

    pub fn path(&self) -> &[usize] {
        &self.path
    }

    pub fn skips(&self) -> &[PathEvent] {
        &self.skips
    }

    pub fn regressions(&self) -> &[PathEvent] {
        &self.regressions
    }

    /// Query position for the next frame.
    pub fn positions_for_step(&self) -> RelativePosition {
        if !self.started {
            return RelativePosition::ceiled(0, self.durations[0], self.ceiling);
        }
        let d = self.durations[self.token];
        let bwd = d.saturating_sub(self.frames_spent + 1);
        RelativePosition::ceiled(self.frames_spent, bwd, self.ceiling)
    }

    /// Records the frame just emitted, attributed to the argmax of `alpha_row`.
    pub fn advance<T: Scalar>(&mut self, alpha_row: &[T]) -> Result<()> {
        if alpha_row.len() != self.durations.len() {
            return Err(Error::Shape {
                op: "advance",
                lhs: vec![alpha_row.len()],
                rhs: vec![self.durations.len()],
            });
        }
        let sum: f64 = alpha_row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::invalid("advance", format!("alpha row sums to {sum}")));
        }
        let j = argmax(alpha_row);
        self.step_to(j);
        Ok(())
    }

    fn step_to(&mut self, j: usize) {
        let step = self.emitted;
        let expected_next = if self.started { self.token + 1 } else { 0 };
        if j > expected_next {
            self.skips.push(PathEvent {
                step,
                from: self.token,
                to: j,
            });
        }
        if self.started && j < self.token {
            self.regressions.push(PathEvent {
                step,
                from: self.token,
                to: j,
            });
            self.frames_spent += 1;
        } else if !self.started || j != self.token {
            self.token = j;
            self.frames_spent = 0;
        } else {
            self.frames_spent += 1;
        }
        self.started = true;
        self.emitted += 1;
        self.path.push(self.token);
    }

    /// Last token held for its duration, or the frame cap reached.
    pub fn should_stop(&self) -> bool {
        self.finished() || self.emitted >= self.cap
    }

    fn finished(&self) -> bool {
        let last = self.durations.len() - 1;
        self.started && self.token == last && self.frames_spent + 1 >= self.durations[last]
    }

    /// The cap ended decoding before the stop rule fired.
    pub fn truncated(&self) -> bool {
        self.emitted >= self.cap && !self.finished()
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Positions fed to the decoder at every frame when it follows the labelled
/// path exactly.
pub fn teacher_positions(durations: &[usize], ceiling: usize) -> Vec<RelativePosition> {
    let mut state = DecodeState::new(durations.to_vec(), ceiling, usize::MAX).expect("label durations are positive");
    let mut out = Vec::with_capacity(durations.iter().sum());
    for (j, &d) in durations.iter().enumerate() {
        for _ in 0..d {
            out.push(state.positions_for_step());
            state.step_to(j);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    /// `[T, mel_dim]`
    pub mel: Array<f64>,
    /// `[T, N]` attention rows.
    pub attention: Array<f64>,
    /// Argmax token per frame.
    pub path: Vec<usize>,
    pub predicted: Vec<f64>,
    pub scaled: Vec<usize>,
    pub skips: Vec<PathEvent>,
    pub regressions: Vec<PathEvent>,
    pub truncated: bool,
}

/// Free-running synthesis at duration `factor`.
///
/// Decoding stops after the last token has held attention for its scaled
/// duration, or at `min(max_decode_frames, 3 * sum(scaled))` frames.
pub fn synthesize<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    tokens: &TokenSequence,
    factor: f64,
    mode: InferenceMode,
    rng: &mut impl Rng,
) -> Result<Synthesis> {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, store, tokens)?;
    let predicted: Vec<f64> = tape.value(enc.durations).data().iter().map(|v| v.as_f64()).collect();
    let scaled = scale_durations(&predicted, factor)?;
    let n = scaled.len();
    let cap = cfg.max_decode_frames.min(3 * scaled.iter().sum::<usize>()).max(1);
    let mut track = DecodeState::new(scaled.clone(), cfg.position_ceiling, cap)?;
    let stepping = match mode {
        InferenceMode::Soft => Stepping::Soft,
        InferenceMode::Hard => Stepping::Hard,
    };

    let mut state = model.initial_state(&mut tape, n);
    let mut prev = model.go_frame(&mut tape);
    let mut mel = Vec::new();
    let mut attention = Vec::new();
    while !track.should_stop() {
        let pos = track.positions_for_step();
        let out = model.decode_step(
            &mut tape,
            store,
            prev,
            state,
            &enc.memory,
            pos,
            stepping,
            0.0,
            cfg.dropout_at_inference,
            rng,
        )?;
        let alpha = tape.value(out.state.alpha).data();
        track.advance(alpha)?;
        attention.extend(alpha.iter().map(|v| v.as_f64()));
        let frame = tape.value(out.mel).data().to_vec();
        mel.extend(frame.iter().map(|v| v.as_f64()));
        // Detach the fed-back frame so the tape stays a chain of small graphs.
        prev = tape.constant(Array::row(frame));
        state = out.state;
    }
    let frames = track.emitted();
    Ok(Synthesis {
        mel: Array::new(vec![frames, cfg.mel_dim], mel)?,
        attention: Array::new(vec![frames, n], attention)?,
        path: track.path().to_vec(),
        predicted,
        scaled,
        skips: track.skips().to_vec(),
        regressions: track.regressions().to_vec(),
        truncated: track.truncated(),
    })
}

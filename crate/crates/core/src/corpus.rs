//! Seeded synthetic corpus with exact alignments and pseudo-mel frames.
//!
//! Each frame-bearing token has a fixed base pattern. Within a token, frame
//! `k` of `d` is `base + ramp * k / d` plus small Gaussian noise, so both the
//! token identity and the progress through it are visible in the features.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::guidance::{format_label_line, parse_label_file, AlignmentLabel};
use crate::model::TrainExample;
use crate::numerics::Array;
use crate::textio;
use crate::tokens::{Syllable, Token, TokenSequence, Vocabulary};

pub const NOISE_SIGMA: f64 = 0.02;
pub const RAMP_SCALE: f64 = 0.3;
const PAUSE_DURATION: (usize, usize) = (3, 8);
const PHONEME_BASE: (usize, usize) = (3, 11);
const SYLLABLES: (usize, usize) = (2, 8);
/// Sampling weights of internal boundary levels #0..#3.
const BOUNDARY_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.15, 0.15];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUtterance {
    pub id: String,
    pub tokens: TokenSequence,
    pub label: AlignmentLabel,
    /// `[T, mel_dim]`
    pub mel: Array<f64>,
}

impl SyntheticUtterance {
    pub fn to_example(&self) -> TrainExample {
        TrainExample {
            tokens: self.tokens.clone(),
            label: self.label.clone(),
            mel: self.mel.clone(),
        }
    }
}

/// Fixed per-class feature patterns: signed rows of a normalized Sylvester
/// Hadamard matrix for phonemes, unit axes for silence and the #3 pause.
#[derive(Clone, Debug)]
pub struct Patterns {
    rows: Vec<Vec<f64>>,
    ramp: Vec<f64>,
}

impl Patterns {
    pub fn new(vocab: &Vocabulary, mel_dim: usize) -> Result<Self> {
        if !mel_dim.is_power_of_two() || mel_dim < 8 {
            return Err(Error::Config(format!(
                "mel_dim must be a power of two >= 8, got {mel_dim}"
            )));
        }
        let p = vocab.class_count() - 2;
        if p > 2 * mel_dim {
            return Err(Error::Config(format!("{p} phonemes need mel_dim >= {}", p.div_ceil(2))));
        }
        let h = hadamard(mel_dim);
        let mut rows = Vec::with_capacity(p + 2);
        for i in 0..p {
            let sign = if i < mel_dim { 1.0 } else { -1.0 };
            rows.push(h[i % mel_dim].iter().map(|v| sign * v).collect());
        }
        let axis = |k: usize| (0..mel_dim).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
        rows.push(axis(0));
        rows.push(axis(1));
        let ramp = vec![RAMP_SCALE / (mel_dim as f64).sqrt(); mel_dim];
        Ok(Self { rows, ramp })
    }

    /// Base pattern of classifier class `class`.
    pub fn base(&self, class: usize) -> &[f64] {
        &self.rows[class]
    }

    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    /// Noiseless frame `k` of a `d`-frame token.
    pub fn frame(&self, class: usize, k: usize, d: usize) -> Vec<f64> {
        let f = k as f64 / d as f64;
        self.rows[class]
            .iter()
            .zip(&self.ramp)
            .map(|(b, r)| b + r * f)
            .collect()
    }

    /// Class whose base pattern is closest to `frame`.
    pub fn nearest(&self, frame: &[f64]) -> usize {
        let dist = |row: &[f64]| row.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (0..self.rows.len())
            .min_by(|&a, &b| dist(&self.rows[a]).total_cmp(&dist(&self.rows[b])))
            .expect("at least one class")
    }
}

fn hadamard(n: usize) -> Vec<Vec<f64>> {
    let mut h = vec![vec![1.0]];
    while h.len() < n {
        let m = h.len();
        let mut next = vec![vec![0.0; 2 * m]; 2 * m];
        for i in 0..m {
            for j in 0..m {
                next[i][j] = h[i][j];
                next[i][j + m] = h[i][j];
                next[i + m][j] = h[i][j];
                next[i + m][j + m] = -h[i][j];
            }
        }
        h = next;
    }
    let s = 1.0 / (n as f64).sqrt();
    h.into_iter().map(|r| r.into_iter().map(|v| v * s).collect()).collect()
}

pub fn utt_id(index: usize) -> String {
    format!("utt_{:04}", index + 1)
}

/// Generates `count` utterances. Each phoneme has a corpus-wide typical
/// duration in 3..=11 frames; every occurrence deviates from it by at most
/// one frame. Silences and #3 pauses last 3..=8 frames.
pub fn generate(seed: u64, count: usize, phonemes: usize, mel_dim: usize) -> Result<Vec<SyntheticUtterance>> {
    if count == 0 {
        return Err(Error::invalid("generate", "count must be at least 1"));
    }
    let vocab = Vocabulary::new(phonemes);
    let patterns = Patterns::new(&vocab, mel_dim)?;
    let mut base_rng = ChaCha8Rng::seed_from_u64(seed);
    let typical: Vec<usize> = (0..phonemes)
        .map(|_| base_rng.random_range(PHONEME_BASE.0..=PHONEME_BASE.1))
        .collect();
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            utterance(&mut rng, utt_id(i), &vocab, &patterns, &typical)
        })
        .collect()
}

fn utterance(
    rng: &mut ChaCha8Rng,
    id: String,
    vocab: &Vocabulary,
    patterns: &Patterns,
    typical: &[usize],
) -> Result<SyntheticUtterance> {
    let count = rng.random_range(SYLLABLES.0..=SYLLABLES.1);
    let mut syllables = Vec::with_capacity(count);
    for k in 0..count {
        let phones = (0..rng.random_range(1..=2))
            .map(|_| rng.random_range(0..typical.len()))
            .collect();
        let tone = rng.random_range(1..=5);
        let boundary = if k + 1 == count {
            rng.random_range(0..=2)
        } else {
            pick_boundary(rng.random::<f64>())
        };
        syllables.push(Syllable {
            phonemes: phones,
            tone,
            boundary,
        });
    }
    let tokens = TokenSequence::build(&syllables, vocab)?;
    let filtered = tokens.filtered_tokens();
    let durations: Vec<usize> = filtered
        .iter()
        .map(|t| match t {
            Token::Phoneme(p) => (typical[*p] as i64 + rng.random_range(-1..=1)) as usize,
            _ => rng.random_range(PAUSE_DURATION.0..=PAUSE_DURATION.1),
        })
        .collect();
    let label = AlignmentLabel::new(durations)?;
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let dim = patterns.base(0).len();
    let mut data = Vec::with_capacity(label.frames() * dim);
    for (tok, &d) in filtered.iter().zip(label.durations()) {
        let class = vocab.class(*tok).expect("frame-bearing");
        for k in 0..d {
            for v in patterns.frame(class, k, d) {
                data.push(v + noise.sample(rng));
            }
        }
    }
    let mel = Array::new(vec![label.frames(), dim], data)?;
    Ok(SyntheticUtterance { id, tokens, label, mel })
}

fn pick_boundary(u: f64) -> u8 {
    let mut acc = 0.0;
    for (level, w) in BOUNDARY_WEIGHTS.iter().enumerate() {
        acc += w;
        if u < acc {
            return level as u8;
        }
    }
    3
}

/// Seeded shuffle of utterance indices into `(train, heldout)`, each kept in
/// corpus order.
pub fn split(count: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0 < train_fraction && train_fraction <= 1.0) {
        return Err(Error::invalid(
            "split",
            format!("train_fraction {train_fraction} outside (0, 1]"),
        ));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    idx.shuffle(&mut rng);
    let n_train = ((count as f64) * train_fraction).round() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut held = idx[n_train..].to_vec();
    train.sort_unstable();
    held.sort_unstable();
    Ok((train, held))
}

/// Writes `utts.txt`, `align.txt` and `mel/<id>.txt` under `dir`.
pub fn write_corpus(dir: &Path, utts: &[SyntheticUtterance]) -> Result<()> {
    let mel_dir = dir.join("mel");
    fs::create_dir_all(&mel_dir).map_err(|e| Error::io(&mel_dir, e))?;
    let mut utt_text = String::new();
    let mut align_text = String::new();
    for u in utts {
        utt_text.push_str(&format!("{}: {}\n", u.id, u.tokens));
        align_text.push_str(&format_label_line(&u.id, &u.label));
        align_text.push('\n');
        textio::write_matrix(&mel_dir.join(format!("{}.txt", u.id)), &u.mel)?;
    }
    let p = dir.join("utts.txt");
    fs::write(&p, utt_text).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("align.txt");
    fs::write(&p, align_text).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

/// Parses `utt_id: token ...` lines.
pub fn parse_utterance_file(text: &str, source_name: &str, vocab: &Vocabulary) -> Result<Vec<(String, TokenSequence)>> {
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
        let seq = TokenSequence::parse(rest, vocab).map_err(|e| err(e.to_string()))?;
        out.push((id.trim().to_string(), seq));
    }
    Ok(out)
}

/// Reads a corpus directory written by [`write_corpus`].
pub fn read_corpus(dir: &Path, vocab: &Vocabulary) -> Result<Vec<SyntheticUtterance>> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let utts = parse_utterance_file(&read("utts.txt")?, "utts.txt", vocab)?;
    let labels = parse_label_file(&read("align.txt")?, "align.txt")?;
    if utts.len() != labels.len() {
        return Err(Error::Label(format!(
            "utts.txt has {} lines, align.txt has {}",
            utts.len(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(utts.len());
    for ((id, tokens), (lid, label)) in utts.into_iter().zip(labels) {
        if id != lid {
            return Err(Error::Label(format!("utterance order mismatch: `{id}` vs `{lid}`")));
        }
        if tokens.filtered_len() != label.tokens() {
            return Err(Error::Label(format!(
                "{id}: {} frame-bearing tokens but {} durations",
                tokens.filtered_len(),
                label.tokens()
            )));
        }
        let mel = textio::read_matrix(&dir.join("mel").join(format!("{id}.txt")))?;
        if mel.rows() != label.frames() {
            return Err(Error::Label(format!(
                "{id}: {} mel frames but durations sum to {}",
                mel.rows(),
                label.frames()
            )));
        }
        out.push(SyntheticUtterance { id, tokens, label, mel });
    }
    Ok(out)
}

//! Input token sequences and the hidden-state filter.
//!
//! Syllables are laid out as phonemes, then the syllable's tone, then the
//! prosodic boundary that follows it. The utterance is wrapped in silence.
//! Tones and boundaries `#0`..`#2` carry no acoustic frames and are dropped
//! by the filter; `#3` is kept and treated like silence.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Var};

pub const TONES: usize = 5;
pub const BOUNDARY_LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Phoneme(usize),
    /// Lexical tone 1..=5 of the preceding syllable.
    Tone(u8),
    /// Prosodic boundary level 0..=3.
    Boundary(u8),
    Silence,
}

impl Token {
    /// Whether the token occupies acoustic frames.
    pub fn is_frame_bearing(self) -> bool {
        matches!(self, Token::Phoneme(_) | Token::Silence | Token::Boundary(3))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Phoneme(i) => write!(f, "p{i}"),
            Token::Tone(t) => write!(f, "t{t}"),
            Token::Boundary(l) => write!(f, "#{l}"),
            Token::Silence => write!(f, "sil"),
        }
    }
}

/// Closed vocabulary: phonemes, five tones, four boundary levels, one silence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub phonemes: usize,
}

impl Vocabulary {
    pub fn new(phonemes: usize) -> Self {
        Self { phonemes }
    }

    pub fn size(&self) -> usize {
        self.phonemes + TONES + BOUNDARY_LEVELS + 1
    }

    /// Number of classes seen by the phoneme classifier: phonemes, silence and `#3`.
    pub fn class_count(&self) -> usize {
        self.phonemes + 2
    }

    pub fn index(&self, token: Token) -> usize {
        let p = self.phonemes;
        match token {
            Token::Phoneme(i) => i,
            Token::Tone(t) => p + t as usize - 1,
            Token::Boundary(l) => p + TONES + l as usize,
            Token::Silence => p + TONES + BOUNDARY_LEVELS,
        }
    }

    pub fn token(&self, index: usize) -> Option<Token> {
        let p = self.phonemes;
        match index {
            i if i < p => Some(Token::Phoneme(i)),
            i if i < p + TONES => Some(Token::Tone((i - p + 1) as u8)),
            i if i < p + TONES + BOUNDARY_LEVELS => Some(Token::Boundary((i - p - TONES) as u8)),
            i if i == p + TONES + BOUNDARY_LEVELS => Some(Token::Silence),
            _ => None,
        }
    }

    /// Classifier target for a frame-bearing token.
    pub fn class(&self, token: Token) -> Option<usize> {
        match token {
            Token::Phoneme(i) => Some(i),
            Token::Silence => Some(self.phonemes),
            Token::Boundary(3) => Some(self.phonemes + 1),
            _ => None,
        }
    }

    pub fn validate(&self, token: Token) -> Result<()> {
        match token {
            Token::Phoneme(i) if i >= self.phonemes => Err(Error::Token(format!(
                "phoneme p{i} outside vocabulary of {}",
                self.phonemes
            ))),
            Token::Tone(t) if !(1..=TONES as u8).contains(&t) => Err(Error::Token(format!("tone {t} outside 1..=5"))),
            Token::Boundary(l) if l as usize >= BOUNDARY_LEVELS => {
                Err(Error::Token(format!("boundary #{l} outside #0..#3")))
            }
            _ => Ok(()),
        }
    }

    pub fn parse_token(&self, s: &str) -> Result<Token> {
        let bad = || Error::Token(format!("unrecognized token `{s}`"));
        let token = if s == "sil" {
            Token::Silence
        } else if let Some(rest) = s.strip_prefix('#') {
            Token::Boundary(rest.parse().map_err(|_| bad())?)
        } else if let Some(rest) = s.strip_prefix('t') {
            Token::Tone(rest.parse().map_err(|_| bad())?)
        } else if let Some(rest) = s.strip_prefix('p') {
            Token::Phoneme(rest.parse().map_err(|_| bad())?)
        } else {
            return Err(bad());
        };
        self.validate(token)?;
        Ok(token)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Syllable {
    pub phonemes: Vec<usize>,
    pub tone: u8,
    /// Level of the boundary following this syllable.
    pub boundary: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<Token>,
    mask: Vec<bool>,
}

impl TokenSequence {
    pub fn build(syllables: &[Syllable], vocab: &Vocabulary) -> Result<Self> {
        if syllables.is_empty() {
            return Err(Error::Token("empty syllable list".into()));
        }
        let mut tokens = vec![Token::Silence];
        for (k, syl) in syllables.iter().enumerate() {
            if syl.phonemes.is_empty() {
                return Err(Error::Token(format!("syllable {k} has no phonemes")));
            }
            for &p in &syl.phonemes {
                tokens.push(Token::Phoneme(p));
            }
            tokens.push(Token::Tone(syl.tone));
            tokens.push(Token::Boundary(syl.boundary));
        }
        tokens.push(Token::Silence);
        for &t in &tokens {
            vocab.validate(t)?;
        }
        let mask = tokens.iter().map(|t| t.is_frame_bearing()).collect();
        Ok(Self { tokens, mask })
    }

    /// Parses `sil? (phon+ toneN #L)*`, e.g. `p3 p7 t3 #1 p2 t5 #3`.
    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut words: Vec<Token> = text
            .split_whitespace()
            .map(|w| vocab.parse_token(w))
            .collect::<Result<_>>()?;
        if words.first() == Some(&Token::Silence) {
            words.remove(0);
        }
        if words.last() == Some(&Token::Silence) {
            words.pop();
        }
        let mut syllables = Vec::new();
        let mut phonemes = Vec::new();
        let mut iter = words.into_iter().peekable();
        while let Some(tok) = iter.next() {
            match tok {
                Token::Phoneme(p) => phonemes.push(p),
                Token::Tone(tone) => {
                    if phonemes.is_empty() {
                        return Err(Error::Token(format!("tone t{tone} without phonemes")));
                    }
                    let boundary = match iter.next() {
                        Some(Token::Boundary(l)) => l,
                        other => {
                            return Err(Error::Token(format!(
                                "expected boundary after t{tone}, found {}",
                                other.map_or("end of line".to_string(), |t| t.to_string())
                            )))
                        }
                    };
                    syllables.push(Syllable {
                        phonemes: std::mem::take(&mut phonemes),
                        tone,
                        boundary,
                    });
                }
                other => return Err(Error::Token(format!("unexpected token `{other}`"))),
            }
        }
        if !phonemes.is_empty() {
            return Err(Error::Token("trailing phonemes without tone and boundary".into()));
        }
        Self::build(&syllables, vocab)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn filtered_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn filtered_tokens(&self) -> Vec<Token> {
        self.tokens
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }

    pub fn vocab_ids(&self, vocab: &Vocabulary) -> Vec<usize> {
        self.tokens.iter().map(|&t| vocab.index(t)).collect()
    }

    pub fn class_labels(&self, vocab: &Vocabulary) -> Vec<usize> {
        self.filtered_tokens()
            .into_iter()
            .map(|t| vocab.class(t).expect("filtered tokens have a class"))
            .collect()
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Indices of the `true` entries of `mask`.
pub fn kept_rows(mask: &[bool]) -> Result<Vec<usize>> {
    let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(Error::Token("filter mask keeps no tokens".into()));
    }
    Ok(rows)
}

/// Drops the hidden-state rows whose mask entry is false, preserving order.
pub fn apply_filter<T: Scalar>(tape: &mut Tape<T>, hidden: Var, mask: &[bool]) -> Result<Var> {
    let rows = tape.value(hidden).rows();
    if rows != mask.len() {
        return Err(Error::Shape {
            op: "apply_filter",
            lhs: tape.shape(hidden).to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let keep = kept_rows(mask)?;
    tape.gather_rows(hidden, &keep)
}

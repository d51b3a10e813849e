//! Hyperparameters, parsed from flat `key = value` text.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Attention stepping used at synthesis time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceMode {
    /// Expected-value recursion; the tracked token is the row argmax.
    Soft,
    /// One-hot stepping on `p >= 0.5`.
    Hard,
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            other => Err(Error::Config(format!(
                "inference_mode must be soft or hard, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Soft => "soft",
            Self::Hard => "hard",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub phonemes: usize,
    pub embed_dim: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub conv_layers: usize,
    pub encoder_hidden: usize,
    pub duration_channels: usize,
    pub duration_kernel: usize,
    pub attention_dim: usize,
    pub position_ceiling: usize,
    pub position_dim: usize,
    pub prenet_dims: Vec<usize>,
    pub prenet_dropout: f64,
    pub dropout_at_inference: bool,
    pub decoder_hidden: usize,
    pub context_feedback: bool,
    pub mel_dim: usize,
    pub energy_bias_init: f64,
    pub loss_pc: f64,
    pub loss_dur: f64,
    pub loss_align: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub noise_sigma: f64,
    pub noise_anneal_steps: usize,
    pub checkpoint_every: usize,
    pub duration_factor: f64,
    pub max_decode_frames: usize,
    pub inference_mode: InferenceMode,
    pub use_position_embedding: bool,
    pub train_fraction: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            phonemes: 16,
            embed_dim: 32,
            conv_channels: 32,
            conv_kernel: 5,
            conv_layers: 3,
            encoder_hidden: 32,
            duration_channels: 32,
            duration_kernel: 3,
            attention_dim: 32,
            position_ceiling: 50,
            position_dim: 16,
            prenet_dims: vec![32, 32],
            prenet_dropout: 0.5,
            dropout_at_inference: true,
            decoder_hidden: 64,
            context_feedback: true,
            mel_dim: 8,
            energy_bias_init: 1.0,
            loss_pc: 0.005,
            loss_dur: 0.025,
            loss_align: 0.25,
            learning_rate: 3e-3,
            batch_size: 8,
            steps: 2000,
            noise_sigma: 1.0,
            noise_anneal_steps: 1000,
            checkpoint_every: 500,
            duration_factor: 1.0,
            max_decode_frames: 2000,
            inference_mode: InferenceMode::Hard,
            use_position_embedding: true,
            train_fraction: 0.9,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "phonemes",
    "embed_dim",
    "conv_channels",
    "conv_kernel",
    "conv_layers",
    "encoder_hidden",
    "duration_channels",
    "duration_kernel",
    "attention_dim",
    "position_ceiling",
    "position_dim",
    "prenet_dims",
    "prenet_dropout",
    "dropout_at_inference",
    "decoder_hidden",
    "context_feedback",
    "mel_dim",
    "energy_bias_init",
    "loss_pc",
    "loss_dur",
    "loss_align",
    "learning_rate",
    "batch_size",
    "steps",
    "noise_sigma",
    "noise_anneal_steps",
    "checkpoint_every",
    "duration_factor",
    "max_decode_frames",
    "inference_mode",
    "use_position_embedding",
    "train_fraction",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl Config {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                source_name: "config".into(),
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "phonemes" => self.phonemes = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "conv_channels" => self.conv_channels = parse(key, value)?,
            "conv_kernel" => self.conv_kernel = parse(key, value)?,
            "conv_layers" => self.conv_layers = parse(key, value)?,
            "encoder_hidden" => self.encoder_hidden = parse(key, value)?,
            "duration_channels" => self.duration_channels = parse(key, value)?,
            "duration_kernel" => self.duration_kernel = parse(key, value)?,
            "attention_dim" => self.attention_dim = parse(key, value)?,
            "position_ceiling" => self.position_ceiling = parse(key, value)?,
            "position_dim" => self.position_dim = parse(key, value)?,
            "prenet_dims" => {
                self.prenet_dims = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?
            }
            "prenet_dropout" => self.prenet_dropout = parse(key, value)?,
            "dropout_at_inference" => self.dropout_at_inference = parse(key, value)?,
            "decoder_hidden" => self.decoder_hidden = parse(key, value)?,
            "context_feedback" => self.context_feedback = parse(key, value)?,
            "mel_dim" => self.mel_dim = parse(key, value)?,
            "energy_bias_init" => self.energy_bias_init = parse(key, value)?,
            "loss_pc" => self.loss_pc = parse(key, value)?,
            "loss_dur" => self.loss_dur = parse(key, value)?,
            "loss_align" => self.loss_align = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "noise_anneal_steps" => self.noise_anneal_steps = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "duration_factor" => self.duration_factor = parse(key, value)?,
            "max_decode_frames" => self.max_decode_frames = parse(key, value)?,
            "inference_mode" => self.inference_mode = value.parse()?,
            "use_position_embedding" => self.use_position_embedding = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            other => return Err(Error::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }

    /// `PAMA_SEED` overrides the seed when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("PAMA_SEED") {
            self.set("seed", v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("phonemes", self.phonemes),
            ("embed_dim", self.embed_dim),
            ("conv_channels", self.conv_channels),
            ("encoder_hidden", self.encoder_hidden),
            ("duration_channels", self.duration_channels),
            ("attention_dim", self.attention_dim),
            ("position_dim", self.position_dim),
            ("decoder_hidden", self.decoder_hidden),
            ("mel_dim", self.mel_dim),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if self.conv_kernel.is_multiple_of(2) || self.duration_kernel.is_multiple_of(2) {
            return Err(Error::Config("convolution kernels must have odd width".into()));
        }
        if self.prenet_dims.is_empty() {
            return Err(Error::Config("`prenet_dims` needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::Config("`prenet_dropout` must lie in [0, 1)".into()));
        }
        if self.duration_factor <= 0.0 {
            return Err(Error::Config("`duration_factor` must be positive".into()));
        }
        if !(0.0 < self.train_fraction && self.train_fraction <= 1.0) {
            return Err(Error::Config("`train_fraction` must lie in (0, 1]".into()));
        }
        if self.noise_sigma < 0.0 || self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "`noise_sigma` must be >= 0 and `learning_rate` > 0".into(),
            ));
        }
        Ok(())
    }

    /// Noise scale on attention energies at a training step.
    pub fn noise_at(&self, step: usize) -> f64 {
        if self.noise_anneal_steps == 0 {
            return self.noise_sigma;
        }
        let frac = 1.0 - step as f64 / self.noise_anneal_steps as f64;
        self.noise_sigma * frac.max(0.0)
    }

    pub fn value_of(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "phonemes" => self.phonemes.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "conv_channels" => self.conv_channels.to_string(),
            "conv_kernel" => self.conv_kernel.to_string(),
            "conv_layers" => self.conv_layers.to_string(),
            "encoder_hidden" => self.encoder_hidden.to_string(),
            "duration_channels" => self.duration_channels.to_string(),
            "duration_kernel" => self.duration_kernel.to_string(),
            "attention_dim" => self.attention_dim.to_string(),
            "position_ceiling" => self.position_ceiling.to_string(),
            "position_dim" => self.position_dim.to_string(),
            "prenet_dims" => self
                .prenet_dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "prenet_dropout" => self.prenet_dropout.to_string(),
            "dropout_at_inference" => self.dropout_at_inference.to_string(),
            "decoder_hidden" => self.decoder_hidden.to_string(),
            "context_feedback" => self.context_feedback.to_string(),
            "mel_dim" => self.mel_dim.to_string(),
            "energy_bias_init" => self.energy_bias_init.to_string(),
            "loss_pc" => self.loss_pc.to_string(),
            "loss_dur" => self.loss_dur.to_string(),
            "loss_align" => self.loss_align.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "noise_anneal_steps" => self.noise_anneal_steps.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "duration_factor" => self.duration_factor.to_string(),
            "max_decode_frames" => self.max_decode_frames.to_string(),
            "inference_mode" => self.inference_mode.to_string(),
            "use_position_embedding" => self.use_position_embedding.to_string(),
            "train_fraction" => self.train_fraction.to_string(),
            _ => return None,
        })
    }

    /// Snapshot in the same `key = value` format accepted by [`Config::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key).expect("known key"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_loss_weights() {
        let c = Config::default();
        assert_eq!((c.loss_pc, c.loss_dur, c.loss_align), (0.005, 0.025, 0.25));
        assert_eq!(c.position_ceiling, 50);
        assert_eq!(c.prenet_dims, vec![32, 32]);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let c = Config::parse("# toy\nsteps = 10\nprenet_dims = 16, 8 # two layers\ninference_mode = hard\n").unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.prenet_dims, vec![16, 8]);
        assert_eq!(c.inference_mode, InferenceMode::Hard);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::parse("stepz = 3").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn bad_values_rejected() {
        assert!(Config::parse("steps = many").is_err());
        assert!(Config::parse("duration_factor = -1").is_err());
        assert!(Config::parse("conv_kernel = 4").is_err());
        assert!(Config::parse("no equals sign").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let c = Config {
            seed: 99,
            learning_rate: 3e-4,
            use_position_embedding: false,
            ..Config::default()
        };
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn noise_anneals_linearly() {
        let c = Config::default();
        assert_eq!(c.noise_at(0), 1.0);
        assert!((c.noise_at(500) - 0.5).abs() < 1e-12);
        assert_eq!(c.noise_at(5000), 0.0);
    }
}

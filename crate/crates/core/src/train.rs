//! Teacher-forced training loop with periodic checkpoints.
//!
//! Every random draw (batch order, attention noise, prenet dropout) is a
//! pure function of the seed and the step, so a resumed run reproduces an
//! uninterrupted one exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{Model, TrainExample};
use crate::numerics::{Adam, Array, ParamStore, Tape};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "loss.tsv";
const HISTORY_HEADER: &str = "step\ttotal\tmel\tpc\tdur\talign";

const INIT_STREAM: u64 = 0;
const ORDER_STREAM: u64 = 1 << 62;
const STEP_STREAM: u64 = 1 << 61;

/// Batch-mean loss components of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub mel: f64,
    pub pc: f64,
    pub dur: f64,
    pub align: f64,
}

impl LossRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.total, self.mel, self.pc, self.dur, self.align
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let err = |msg: &str| Error::Parse {
            source_name: HISTORY_FILE.into(),
            line: lineno,
            msg: msg.into(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(err("expected 6 tab-separated fields"));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| err("bad number"));
        Ok(Self {
            step: f[0].parse().map_err(|_| err("bad step"))?,
            total: num(1)?,
            mel: num(2)?,
            pc: num(3)?,
            dur: num(4)?,
            align: num(5)?,
        })
    }
}

pub fn format_history(records: &[LossRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.to_line());
    }
    out
}

pub fn parse_history(text: &str) -> Result<Vec<LossRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && *l != HISTORY_HEADER)
        .map(|(i, l)| LossRecord::parse(l, i + 1))
        .collect()
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds a model with freshly initialized parameters from `config.seed`.
pub fn init_model(config: &Config) -> Result<(Model, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = Model::new(config, &mut store, &mut rng_for(config.seed, INIT_STREAM))?;
    Ok((model, store))
}

/// Rebuilds the model described by a checkpoint and loads its weights.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(Model, ParamStore<f32>)> {
    let (model, mut store) = init_model(&ck.config)?;
    ck.restore_into(&mut store)?;
    Ok((model, store))
}

pub struct Trainer {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    pub step: usize,
    pub history: Vec<LossRecord>,
    examples: Vec<TrainExample>,
}

impl Trainer {
    pub fn new(config: &Config, examples: Vec<TrainExample>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("train", "no training utterances"));
        }
        let (model, store) = init_model(config)?;
        let optimizer = Adam::new(&store, config.learning_rate);
        Ok(Self {
            model,
            store,
            optimizer,
            step: 0,
            history: Vec::new(),
            examples,
        })
    }

    /// Continues from a checkpoint; `history` must cover exactly its steps.
    pub fn resume(ck: &Checkpoint, examples: Vec<TrainExample>, history: Vec<LossRecord>) -> Result<Self> {
        let mut t = Self::new(&ck.config, examples)?;
        ck.restore_into(&mut t.store)?;
        t.optimizer = ck
            .optimizer
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        t.step = ck.step;
        t.history = history.into_iter().filter(|r| r.step < ck.step).collect();
        if t.history.len() != ck.step {
            return Err(Error::Checkpoint(format!(
                "loss history has {} entries for checkpoint at step {}",
                t.history.len(),
                ck.step
            )));
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            step: self.step,
            params: self.store.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Utterance indices of the batch at `step`: consecutive slices of
    /// seeded per-epoch permutations.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.examples.len();
        let b = self.model.config.batch_size;
        let mut out = Vec::with_capacity(b);
        let mut epoch = usize::MAX;
        let mut perm = Vec::new();
        for k in step * b..(step + 1) * b {
            if k / n != epoch {
                epoch = k / n;
                perm = (0..n).collect();
                perm.shuffle(&mut rng_for(self.model.config.seed, ORDER_STREAM + epoch as u64));
            }
            out.push(perm[k % n]);
        }
        out
    }

    /// One optimizer step on the mean loss of a batch.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        let cfg = &self.model.config;
        let step = self.step;
        let sigma = cfg.noise_at(step);
        let batch = self.batch_indices(step);
        let scale = 1.0 / batch.len() as f32;
        let mut grads: Vec<Array<f32>> = self.store.zeros_like();
        let mut sums = [0.0f64; 5];
        for (k, &i) in batch.iter().enumerate() {
            let mut rng = rng_for(cfg.seed, STEP_STREAM + (step * batch.len() + k) as u64);
            let mut tape = Tape::new();
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { step },
                other => other,
            };
            let terms = self
                .model
                .forward_train(&mut tape, &self.store, &self.examples[i], sigma, true, &mut rng)
                .map_err(diverged)?;
            let total = self.model.total_loss(&mut tape, &terms).map_err(diverged)?;
            for (s, v) in sums
                .iter_mut()
                .zip([total, terms.mel, terms.pc, terms.dur, terms.align])
            {
                *s += tape.value(v).item() as f64;
            }
            tape.backward(total)
                .map_err(diverged)?
                .accumulate_params(&mut grads, scale);
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step });
        }
        let mut updated = self.store.clone();
        self.optimizer.update(&mut updated, &grads);
        if !updated.all_finite() {
            return Err(Error::Diverged { step });
        }
        self.store = updated;
        let n = batch.len() as f64;
        let rec = LossRecord {
            step,
            total: sums[0] / n,
            mel: sums[1] / n,
            pc: sums[2] / n,
            dur: sums[3] / n,
            align: sums[4] / n,
        };
        self.history.push(rec);
        self.step += 1;
        Ok(rec)
    }
}

/// Where a run keeps its checkpoint and history.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }

    pub fn history_path(&self) -> PathBuf {
        self.dir.join(HISTORY_FILE)
    }

    pub fn save(&self, trainer: &Trainer) -> Result<()> {
        trainer.checkpoint().save(&self.checkpoint_path())?;
        let p = self.history_path();
        fs::write(&p, format_history(&trainer.history)).map_err(|e| Error::io(&p, e))
    }

    pub fn load_history(&self) -> Result<Vec<LossRecord>> {
        let p = self.history_path();
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        parse_history(&text)
    }
}

/// Trains until `config.steps`, saving every `checkpoint_every` steps and at
/// the end. On divergence the last saved checkpoint is left untouched and
/// [`Error::Diverged`] is returned.
pub fn run(trainer: &mut Trainer, out: &RunDir, mut progress: impl FnMut(&LossRecord)) -> Result<()> {
    let total = trainer.model.config.steps;
    let every = trainer.model.config.checkpoint_every;
    while trainer.step < total {
        let rec = trainer.train_step()?;
        progress(&rec);
        if every > 0 && trainer.step.is_multiple_of(every) {
            out.save(trainer)?;
        }
    }
    out.save(trainer)
}

/// Mean alignment loss and classifier cross-entropy with noise and dropout off.
pub fn evaluate_losses(model: &Model, store: &ParamStore<f32>, examples: &[TrainExample]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::invalid("evaluate_losses", "no utterances"));
    }
    let mut rng = rng_for(model.config.seed, 0);
    let (mut align, mut ce) = (0.0, 0.0);
    for ex in examples {
        let mut tape = Tape::<f32>::new();
        let terms = model.forward_train(&mut tape, store, ex, 0.0, false, &mut rng)?;
        align += tape.value(terms.align).item() as f64;
        ce += tape.value(terms.pc).item() as f64;
    }
    let n = examples.len() as f64;
    Ok((align / n, ce / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate;

    fn tiny_config() -> Config {
        Config {
            seed: 3,
            embed_dim: 8,
            conv_channels: 8,
            conv_layers: 1,
            encoder_hidden: 6,
            duration_channels: 6,
            attention_dim: 6,
            position_dim: 4,
            prenet_dims: vec![8],
            decoder_hidden: 8,
            batch_size: 2,
            steps: 4,
            checkpoint_every: 2,
            ..Config::default()
        }
    }

    fn examples() -> Vec<TrainExample> {
        generate(1, 5, 16, 8).unwrap().iter().map(|u| u.to_example()).collect()
    }

    #[test]
    fn one_step_changes_params() {
        let mut t = Trainer::new(&tiny_config(), examples()).unwrap();
        let before = t.store.clone();
        let rec = t.train_step().unwrap();
        assert_ne!(before, t.store);
        assert!(rec.total.is_finite());
        assert_eq!(t.step, 1);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let t = Trainer::new(&tiny_config(), examples()).unwrap();
        let mut seen: Vec<usize> = (0..5).flat_map(|s| t.batch_indices(s)).collect();
        seen.truncate(5);
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(t.batch_indices(3), t.batch_indices(3));
    }

    #[test]
    fn seeded_runs_and_resume_are_bit_identical() {
        let cfg = tiny_config();
        let full_dir = tempfile::tempdir().unwrap();
        let mut a = Trainer::new(&cfg, examples()).unwrap();
        run(&mut a, &RunDir::new(full_dir.path()).unwrap(), |_| {}).unwrap();

        let mut b = Trainer::new(&cfg, examples()).unwrap();
        for _ in 0..4 {
            b.train_step().unwrap();
        }
        assert_eq!(a.history, b.history);
        assert_eq!(a.store, b.store);

        let part_dir = tempfile::tempdir().unwrap();
        let rd = RunDir::new(part_dir.path()).unwrap();
        let mut c = Trainer::new(
            &Config {
                steps: 2,
                ..cfg.clone()
            },
            examples(),
        )
        .unwrap();
        run(&mut c, &rd, |_| {}).unwrap();
        let ck = Checkpoint::load(&rd.checkpoint_path()).unwrap();
        let mut ck = ck;
        ck.config.steps = 4;
        let mut d = Trainer::resume(&ck, examples(), rd.load_history().unwrap()).unwrap();
        run(&mut d, &rd, |_| {}).unwrap();
        assert_eq!(d.history, a.history);
        assert_eq!(
            fs::read(rd.checkpoint_path()).unwrap(),
            fs::read(full_dir.path().join(CHECKPOINT_FILE)).unwrap()
        );
    }

    #[test]
    fn divergence_is_reported_and_checkpoint_kept() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDir::new(dir.path()).unwrap();
        let mut t = Trainer::new(&Config { steps: 2, ..cfg }, examples()).unwrap();
        run(&mut t, &rd, |_| {}).unwrap();
        let saved = fs::read(rd.checkpoint_path()).unwrap();
        let w = t.store.id("decoder.mel.weight").unwrap();
        t.store.get_mut(w).data_mut()[0] = f32::NAN;
        t.model.config.steps = 4;
        match run(&mut t, &rd, |_| {}) {
            Err(Error::Diverged { step }) => assert_eq!(step, 2),
            other => panic!("expected divergence, got {other:?}"),
        }
        assert_eq!(fs::read(rd.checkpoint_path()).unwrap(), saved);
    }

    #[test]
    fn history_round_trip() {
        let recs = vec![LossRecord {
            step: 0,
            total: 1.25,
            mel: 0.5,
            pc: 2.0,
            dur: 3.0,
            align: 0.125,
        }];
        let text = format_history(&recs);
        assert!(text.starts_with("step\ttotal\tmel\tpc\tdur\talign\n"));
        assert_eq!(parse_history(&text).unwrap(), recs);
        assert!(parse_history("1\t2\n").is_err());
    }
}

//! Encoder, phoneme classifier, duration model, attention and autoregressive
//! decoder wired into one trainable model.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::{self, Memory, PamaAttention, RelativePosition};
use crate::config::Config;
use crate::duration::{duration_loss, DurationCode, DurationPredictor};
use crate::error::{Error, Result};
use crate::guidance::{alignment_loss, fuzzy_matrix, AlignmentLabel};
use crate::inference::teacher_positions;
use crate::numerics::nn::{BiRecurrence, Linear, LstmCell, LstmState};
use crate::numerics::{Array, ParamId, ParamStore, Scalar, Tape, Var};
use crate::tokens::{apply_filter, TokenSequence, Vocabulary};

/// One utterance prepared for teacher-forced training.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub tokens: TokenSequence,
    pub label: AlignmentLabel,
    /// `[T, mel_dim]` target frames.
    pub mel: Array<f64>,
}

/// Layer layout; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub vocab: Vocabulary,
    embedding: ParamId,
    convs: Vec<(ParamId, ParamId)>,
    encoder_rnn: BiRecurrence,
    classifier: Linear,
    duration: DurationPredictor,
    code: DurationCode,
    pub attention: PamaAttention,
    prenet: Vec<Linear>,
    decoder: LstmCell,
    mel_head: Linear,
}

/// Per-utterance encoder products shared by every decoder step.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[N, 2H]` filtered encoder output.
    pub hidden: Var,
    /// `[N, classes]` phoneme classifier logits.
    pub logits: Var,
    /// `[N, 1]` predicted frame counts.
    pub durations: Var,
    pub memory: Memory,
}

/// Recurrent state carried between decoder steps.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub lstm: LstmState,
    /// `[1, N]` attention weights of the previous step.
    pub alpha: Var,
    /// `[1, A]` context of the previous step.
    pub context: Var,
}

/// How the attention row advances in [`Model::decode_step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stepping {
    Soft,
    Hard,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `[1, mel_dim]`
    pub mel: Var,
    pub state: DecoderState,
    /// `[1, N]` selection probabilities.
    pub probs: Var,
}

/// Scalar loss terms of one utterance.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub mel: Var,
    pub pc: Var,
    pub dur: Var,
    pub align: Var,
    /// `[T, N]` stacked attention rows.
    pub attention: Var,
}

impl Model {
    pub fn new<T: Scalar>(config: &Config, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::new(config.phonemes);
        let embedding = store.insert_uniform("encoder.embedding", &[vocab.size(), config.embed_dim], 1, rng)?;
        let mut convs = Vec::with_capacity(config.conv_layers);
        let mut width = config.embed_dim;
        for i in 0..config.conv_layers {
            let fan_in = config.conv_kernel * width;
            let k = store.insert_uniform(
                &format!("encoder.conv{i}.kernel"),
                &[config.conv_kernel, width, config.conv_channels],
                fan_in,
                rng,
            )?;
            let b = store.insert_uniform(&format!("encoder.conv{i}.bias"), &[config.conv_channels], fan_in, rng)?;
            convs.push((k, b));
            width = config.conv_channels;
        }
        let encoder_rnn = BiRecurrence::new(store, "encoder.rnn", width, config.encoder_hidden, rng)?;
        let enc_dim = encoder_rnn.output_dim();
        let classifier = Linear::new(store, "classifier", enc_dim, vocab.class_count(), true, rng)?;
        let duration = DurationPredictor::new(store, enc_dim, config.duration_channels, config.duration_kernel, rng)?;
        let code = DurationCode::new(store, config.duration_channels, enc_dim, rng)?;

        let mut prenet = Vec::with_capacity(config.prenet_dims.len());
        let mut width = config.mel_dim;
        for (i, &d) in config.prenet_dims.iter().enumerate() {
            prenet.push(Linear::new(store, &format!("prenet.{i}"), width, d, true, rng)?);
            width = d;
        }
        let mut decoder_in = width + 2 * config.position_dim;
        if config.context_feedback {
            decoder_in += config.attention_dim;
        }
        let decoder = LstmCell::new(store, "decoder.rnn", decoder_in, config.decoder_hidden, rng)?;
        let attention = PamaAttention::new(
            store,
            config.decoder_hidden,
            enc_dim,
            config.attention_dim,
            config.position_ceiling,
            config.position_dim,
            config.energy_bias_init,
            rng,
        )?;
        let mel_head = Linear::new(
            store,
            "decoder.mel",
            config.decoder_hidden + config.attention_dim,
            config.mel_dim,
            true,
            rng,
        )?;
        Ok(Self {
            config: config.clone(),
            vocab,
            embedding,
            convs,
            encoder_rnn,
            classifier,
            duration,
            code,
            attention,
            prenet,
            decoder,
            mel_head,
        })
    }

    /// Embeds, convolves and runs the bidirectional recurrence over all tokens,
    /// then keeps frame-bearing rows and builds the attention memory.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, seq: &TokenSequence) -> Result<Encoded> {
        let table = tape.param(store, self.embedding);
        let mut x = tape.embedding_lookup(table, &seq.vocab_ids(&self.vocab))?;
        for &(k, b) in &self.convs {
            let kv = tape.param(store, k);
            let bv = tape.param(store, b);
            let y = tape.conv1d(x, kv)?;
            let y = tape.add_row(y, bv)?;
            x = tape.relu(y)?;
        }
        let full = self.encoder_rnn.forward(tape, store, x)?;
        let hidden = apply_filter(tape, full, seq.mask())?;
        let logits = self.classifier.forward(tape, store, hidden)?;
        let pred = self.duration.predict(tape, store, hidden)?;
        let code = self.code.forward(tape, store, pred.latent)?;
        let memory = self.attention.build_memory(tape, store, hidden, code)?;
        Ok(Encoded {
            hidden,
            logits,
            durations: pred.durations,
            memory,
        })
    }

    /// Attention at the first token, zero context and zero recurrent state.
    pub fn initial_state<T: Scalar>(&self, tape: &mut Tape<T>, tokens: usize) -> DecoderState {
        let mut alpha = Array::zeros(&[1, tokens]);
        alpha.data_mut()[0] = T::one();
        DecoderState {
            lstm: self.decoder.zero_state(tape, 1),
            alpha: tape.constant(alpha),
            context: tape.constant(Array::zeros(&[1, self.config.attention_dim])),
        }
    }

    /// All-zero go frame.
    pub fn go_frame<T: Scalar>(&self, tape: &mut Tape<T>) -> Var {
        tape.constant(Array::zeros(&[1, self.config.mel_dim]))
    }

    fn prenet<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        prev_mel: Var,
        dropout: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let mut x = prev_mel;
        for layer in &self.prenet {
            let y = layer.forward(tape, store, x)?;
            let y = tape.relu(y)?;
            x = tape.dropout(y, self.config.prenet_dropout, dropout, rng)?;
        }
        Ok(x)
    }

    fn position<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, pos: RelativePosition) -> Result<Var> {
        if self.config.use_position_embedding {
            self.attention.position_embed(tape, store, pos)
        } else {
            Ok(tape.constant(Array::zeros(&[1, 2 * self.config.position_dim])))
        }
    }

    /// One frame: prenet, position embedding, decoder recurrence, attention
    /// update, then the mel head on `[state ; context]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        prev_mel: Var,
        state: DecoderState,
        memory: &Memory,
        pos: RelativePosition,
        stepping: Stepping,
        noise_sigma: f64,
        dropout: bool,
        rng: &mut impl Rng,
    ) -> Result<StepOutput> {
        let pre = self.prenet(tape, store, prev_mel, dropout, rng)?;
        let pe = self.position(tape, store, pos)?;
        let extra = self.config.context_feedback.then_some(state.context);
        let lstm = attention::build_query(tape, store, &self.decoder, pre, pe, extra, state.lstm)?;
        let energy = self.attention.energy(tape, store, lstm.h, memory.keys)?;
        let noise = (noise_sigma > 0.0).then(|| {
            (0..tape.value(energy).len())
                .map(|_| T::of(noise_sigma * rng.sample::<f64, _>(StandardNormal)))
                .collect()
        });
        let probs = self.attention.selection_probs(tape, energy, noise)?;
        let alpha = match stepping {
            Stepping::Soft => attention::sma_step(tape, state.alpha, probs)?,
            Stepping::Hard => {
                let next = attention::hard_step(tape.value(state.alpha).data(), tape.value(probs).data())?;
                tape.constant(Array::row(next))
            }
        };
        let context = attention::context(tape, alpha, memory.values)?;
        let out_in = tape.concat(&[lstm.h, context], 1)?;
        let mel = self.mel_head.forward(tape, store, out_in)?;
        Ok(StepOutput {
            mel,
            state: DecoderState { lstm, alpha, context },
            probs,
        })
    }

    /// Teacher-forced pass over one utterance producing every loss term.
    pub fn forward_train<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        example: &TrainExample,
        noise_sigma: f64,
        dropout: bool,
        rng: &mut impl Rng,
    ) -> Result<LossTerms> {
        let n = example.tokens.filtered_len();
        if n != example.label.tokens() {
            return Err(Error::Label(format!(
                "label has {} tokens, sequence has {n} frame-bearing tokens",
                example.label.tokens()
            )));
        }
        let frames = example.label.frames();
        if example.mel.shape() != [frames, self.config.mel_dim] {
            return Err(Error::Shape {
                op: "forward_train",
                lhs: example.mel.shape().to_vec(),
                rhs: vec![frames, self.config.mel_dim],
            });
        }
        let enc = self.encode(tape, store, &example.tokens)?;
        let pc = tape.cross_entropy(enc.logits, &example.tokens.class_labels(&self.vocab))?;
        let dur = duration_loss(tape, enc.durations, example.label.durations())?;

        let target: Array<T> = example.mel.cast();
        let positions = teacher_positions(example.label.durations(), self.config.position_ceiling);
        let mut state = self.initial_state(tape, n);
        let mut prev = self.go_frame(tape);
        let mut mels = Vec::with_capacity(frames);
        let mut alphas = Vec::with_capacity(frames);
        for (t, &pos) in positions.iter().enumerate() {
            let out = self.decode_step(
                tape,
                store,
                prev,
                state,
                &enc.memory,
                pos,
                Stepping::Soft,
                noise_sigma,
                dropout,
                rng,
            )?;
            state = out.state;
            mels.push(out.mel);
            alphas.push(out.state.alpha);
            prev = tape.constant(Array::row(target.row_slice(t).to_vec()));
        }
        let predicted = tape.concat(&mels, 0)?;
        let target = tape.constant(target);
        let mel = tape.mse(predicted, target)?;
        let attention = tape.concat(&alphas, 0)?;
        let guidance = tape.constant(fuzzy_matrix(&example.label).frame_major());
        let align = alignment_loss(tape, guidance, attention)?;
        Ok(LossTerms {
            mel,
            pc,
            dur,
            align,
            attention,
        })
    }

    /// `mel + a1 pc + a2 dur + a3 align`; the alignment term is left off the
    /// graph entirely when its weight is zero.
    pub fn total_loss<T: Scalar>(&self, tape: &mut Tape<T>, terms: &LossTerms) -> Result<Var> {
        let c = &self.config;
        let mut total = terms.mel;
        for (w, v) in [
            (c.loss_pc, terms.pc),
            (c.loss_dur, terms.dur),
            (c.loss_align, terms.align),
        ] {
            if w != 0.0 {
                let s = tape.scale(v, T::of(w))?;
                total = tape.add(total, s)?;
            }
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::Syllable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> Config {
        Config {
            phonemes: 4,
            embed_dim: 6,
            conv_channels: 5,
            conv_kernel: 3,
            conv_layers: 2,
            encoder_hidden: 4,
            duration_channels: 4,
            attention_dim: 5,
            position_ceiling: 6,
            position_dim: 3,
            prenet_dims: vec![6, 5],
            decoder_hidden: 7,
            mel_dim: 3,
            ..Config::default()
        }
    }

    fn example(cfg: &Config) -> TrainExample {
        let vocab = Vocabulary::new(cfg.phonemes);
        let tokens = TokenSequence::build(
            &[
                Syllable {
                    phonemes: vec![1, 2],
                    tone: 3,
                    boundary: 1,
                },
                Syllable {
                    phonemes: vec![0],
                    tone: 1,
                    boundary: 0,
                },
            ],
            &vocab,
        )
        .unwrap();
        let label = AlignmentLabel::new(vec![2, 3, 1, 2, 2]).unwrap();
        let t = label.frames();
        let mel = Array::new(
            vec![t, cfg.mel_dim],
            (0..t * cfg.mel_dim).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        TrainExample { tokens, label, mel }
    }

    fn build(cfg: &Config) -> (ParamStore<f64>, Model) {
        let mut store = ParamStore::new();
        let model = Model::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (store, model)
    }

    #[test]
    fn no_stop_head() {
        let (store, _) = build(&small_config());
        assert!(store.names().iter().all(|n| !n.contains("stop")));
    }

    #[test]
    fn decode_step_shapes_and_normalization() {
        let cfg = small_config();
        let (store, model) = build(&cfg);
        let ex = example(&cfg);
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &store, &ex.tokens).unwrap();
        assert_eq!(tape.shape(enc.hidden), &[5, 8]);
        let state = model.initial_state(&mut tape, 5);
        let go = model.go_frame(&mut tape);
        assert!(tape.value(go).data().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pos = RelativePosition::ceiled(0, 2, 6);
        let out = model
            .decode_step(
                &mut tape,
                &store,
                go,
                state,
                &enc.memory,
                pos,
                Stepping::Soft,
                1.0,
                true,
                &mut rng,
            )
            .unwrap();
        assert_eq!(tape.shape(out.mel), &[1, 3]);
        let sum: f64 = tape.value(out.state.alpha).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let hard = model
            .decode_step(
                &mut tape,
                &store,
                go,
                state,
                &enc.memory,
                pos,
                Stepping::Hard,
                0.0,
                false,
                &mut rng,
            )
            .unwrap();
        let a = tape.value(hard.state.alpha).data();
        assert_eq!(a.iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn loss_weights_combine_linearly() {
        let cfg = small_config();
        let (store, model) = build(&cfg);
        let mut tape = Tape::<f64>::new();
        let one = tape.constant(Array::scalar(1.0));
        let terms = LossTerms {
            mel: one,
            pc: one,
            dur: one,
            align: one,
            attention: one,
        };
        let total = model.total_loss(&mut tape, &terms).unwrap();
        assert!((tape.value(total).item() - 1.28).abs() < 1e-12);
        let _ = store;
    }

    #[test]
    fn guidance_weight_zero_detaches_alignment() {
        let mut cfg = small_config();
        cfg.loss_align = 0.0;
        let (store, model) = build(&cfg);
        let ex = example(&cfg);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let terms = model
            .forward_train(&mut tape, &store, &ex, 0.0, false, &mut rng)
            .unwrap();
        let total = model.total_loss(&mut tape, &terms).unwrap();
        let expect =
            tape.value(terms.mel).item() + 0.005 * tape.value(terms.pc).item() + 0.025 * tape.value(terms.dur).item();
        assert!((tape.value(total).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn alignment_gradient_reaches_embeddings() {
        let cfg = small_config();
        let (store, model) = build(&cfg);
        let ex = example(&cfg);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let terms = model
            .forward_train(&mut tape, &store, &ex, 0.0, false, &mut rng)
            .unwrap();
        assert!(tape.value(terms.align).item().is_finite());
        assert_eq!(tape.shape(terms.attention), &[10, 5]);
        let grads = tape.backward(terms.align).unwrap().params(&store);
        let emb = store.id("encoder.embedding").unwrap();
        assert!(grads[emb.index()].data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn mismatched_label_rejected() {
        let cfg = small_config();
        let (store, model) = build(&cfg);
        let mut ex = example(&cfg);
        ex.label = AlignmentLabel::new(vec![2, 3]).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(model
            .forward_train(&mut tape, &store, &ex, 0.0, false, &mut rng)
            .is_err());
    }
}

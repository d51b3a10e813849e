//! Token duration predictor and the latent duration code it exposes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::nn::Linear;
use crate::numerics::{Array, ParamId, ParamStore, Scalar, Tape, Var};

/// Two same-padded convolutions with ReLU, then a linear head. The head's
/// input activations are the latent duration representation.
#[derive(Clone, Debug)]
pub struct DurationPredictor {
    conv1: ParamId,
    bias1: ParamId,
    conv2: ParamId,
    bias2: ParamId,
    head: Linear,
    pub channels: usize,
}

/// Output of [`DurationPredictor::predict`].
#[derive(Clone, Copy, Debug)]
pub struct DurationPrediction {
    /// `[N, 1]` predicted frame counts (unclamped, linear domain).
    pub durations: Var,
    /// `[N, channels]` last hidden layer.
    pub latent: Var,
}

impl DurationPredictor {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        input: usize,
        channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv1: store.insert_uniform("duration.conv1.kernel", &[kernel, input, channels], kernel * input, rng)?,
            bias1: store.insert_uniform("duration.conv1.bias", &[channels], kernel * input, rng)?,
            conv2: store.insert_uniform(
                "duration.conv2.kernel",
                &[kernel, channels, channels],
                kernel * channels,
                rng,
            )?,
            bias2: store.insert_uniform("duration.conv2.bias", &[channels], kernel * channels, rng)?,
            head: Linear::new(store, "duration.head", channels, 1, true, rng)?,
            channels,
        })
    }

    pub fn predict<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        encoded: Var,
    ) -> Result<DurationPrediction> {
        let mut x = encoded;
        for (k, b) in [(self.conv1, self.bias1), (self.conv2, self.bias2)] {
            let kv = tape.param(store, k);
            let bv = tape.param(store, b);
            let y = tape.conv1d(x, kv)?;
            let y = tape.add_row(y, bv)?;
            x = tape.relu(y)?;
        }
        let durations = self.head.forward(tape, store, x)?;
        Ok(DurationPrediction { durations, latent: x })
    }
}

/// Mean absolute error in frames between `[N, 1]` predictions and label counts.
pub fn duration_loss<T: Scalar>(tape: &mut Tape<T>, predicted: Var, label: &[usize]) -> Result<Var> {
    let n = tape.value(predicted).len();
    if n != label.len() {
        return Err(Error::Shape {
            op: "duration_loss",
            lhs: tape.shape(predicted).to_vec(),
            rhs: vec![label.len()],
        });
    }
    let target = Array::new(
        tape.shape(predicted).to_vec(),
        label.iter().map(|&d| T::of(d as f64)).collect(),
    )?;
    let target = tape.constant(target);
    tape.l1(predicted, target)
}

/// Linear projection of the latent duration representation to the encoder width.
#[derive(Clone, Debug)]
pub struct DurationCode {
    pub proj: Linear,
}

impl DurationCode {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        latent: usize,
        encoder_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, "duration.code", latent, encoder_dim, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, latent: Var) -> Result<Var> {
        self.proj.forward(tape, store, latent)
    }
}

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CellEncoding, ModelConfig, ModelError};
use crate::math;
use crate::tensor::{BatchNormStats, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `C_out × C_in × k × k`
    pub kernel: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// Additive attention: `score[j] = vᵀ·tanh(a_j·W_a + h·W_h + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `F × A`
    pub w_feature: Tensor,
    /// `hidden × A`
    pub w_hidden: Tensor,
    /// `A`
    pub bias: Tensor,
    /// `A × 1`
    pub v: Tensor,
}

/// LSTM cell (gate order input, forget, candidate, output) and output head.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// `(F + K) × 4·hidden`
    pub w_input: Tensor,
    /// `hidden × 4·hidden`
    pub w_hidden: Tensor,
    /// `4·hidden`
    pub bias: Tensor,
    /// `hidden × K`
    pub w_out: Tensor,
    /// `K`
    pub b_out: Tensor,
}

/// Every learnable value of the model plus the batch-norm running buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    /// `N × C`, present in embedding mode.
    pub embedding: Option<Tensor>,
    pub encoder: Vec<EncoderParams>,
    pub attention: AttentionParams,
    pub decoder: DecoderParams,
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    uniform(rng, shape, bound)
}

/// Small enough that codes seen only a few times stay near zero until their
/// gradients say otherwise; ±1 lets rare background codes be memorized.
const EMBEDDING_INIT: f64 = 0.1;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

fn learnable(t: Tensor) -> Tensor {
    t.with_grad()
}

impl ParameterSet {
    /// Glorot-uniform weights, zero biases, forget-gate bias 1, unit
    /// batch-norm scale, embedding entries uniform in ±0.1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = match config.cell_encoding {
            CellEncoding::Normalized => None,
            CellEncoding::Embedding { channels } => Some(uniform(
                &mut rng,
                &[config.vocab_size, channels],
                EMBEDDING_INIT,
            )),
        };
        let mut c_in = config.input_channels();
        let mut encoder = Vec::with_capacity(config.encoder.len());
        for layer in &config.encoder {
            let k = layer.kernel;
            let c_out = layer.filters;
            encoder.push(EncoderParams {
                kernel: glorot(&mut rng, &[c_out, c_in, k, k], c_in * k * k, c_out * k * k),
                gamma: learnable(Tensor::ones(&[c_out])),
                beta: learnable(Tensor::zeros(&[c_out])),
                running_mean: Tensor::zeros(&[c_out]),
                running_var: Tensor::ones(&[c_out]),
            });
            c_in = c_out;
        }
        let f = config.feature_channels();
        let a = config.attention_hidden;
        let hd = config.lstm_hidden;
        let kc = config.classes;
        let attention = AttentionParams {
            w_feature: glorot(&mut rng, &[f, a], f, a),
            w_hidden: glorot(&mut rng, &[hd, a], hd, a),
            bias: learnable(Tensor::zeros(&[a])),
            v: glorot(&mut rng, &[a, 1], a, 1),
        };
        let mut lstm_bias = Tensor::zeros(&[4 * hd]);
        lstm_bias.data_mut()[hd..2 * hd].fill(1.0);
        let decoder = DecoderParams {
            w_input: glorot(&mut rng, &[f + kc, 4 * hd], f + kc, 4 * hd),
            w_hidden: glorot(&mut rng, &[hd, 4 * hd], hd, 4 * hd),
            bias: learnable(lstm_bias),
            w_out: glorot(&mut rng, &[hd, kc], hd, kc),
            b_out: learnable(Tensor::zeros(&[kc])),
        };
        Ok(Self {
            embedding,
            encoder,
            attention,
            decoder,
        })
    }

    /// Trainable tensors in declaration order.
    pub fn learnable(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.embedding.iter().collect();
        for l in &self.encoder {
            out.extend([&l.kernel, &l.gamma, &l.beta]);
        }
        let a = &self.attention;
        out.extend([&a.w_feature, &a.w_hidden, &a.bias, &a.v]);
        let d = &self.decoder;
        out.extend([&d.w_input, &d.w_hidden, &d.bias, &d.w_out, &d.b_out]);
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.embedding.iter_mut().collect();
        for l in &mut self.encoder {
            out.extend([&mut l.kernel, &mut l.gamma, &mut l.beta]);
        }
        let a = &mut self.attention;
        out.extend([&mut a.w_feature, &mut a.w_hidden, &mut a.bias, &mut a.v]);
        let d = &mut self.decoder;
        out.extend([
            &mut d.w_input,
            &mut d.w_hidden,
            &mut d.bias,
            &mut d.w_out,
            &mut d.b_out,
        ]);
        out
    }

    /// All tensors, running statistics included, in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.embedding.iter().collect();
        for l in &self.encoder {
            out.extend([
                &l.kernel,
                &l.gamma,
                &l.beta,
                &l.running_mean,
                &l.running_var,
            ]);
        }
        let a = &self.attention;
        out.extend([&a.w_feature, &a.w_hidden, &a.bias, &a.v]);
        let d = &self.decoder;
        out.extend([&d.w_input, &d.w_hidden, &d.bias, &d.w_out, &d.b_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.embedding.iter_mut().collect();
        for l in &mut self.encoder {
            out.extend([
                &mut l.kernel,
                &mut l.gamma,
                &mut l.beta,
                &mut l.running_mean,
                &mut l.running_var,
            ]);
        }
        let a = &mut self.attention;
        out.extend([&mut a.w_feature, &mut a.w_hidden, &mut a.bias, &mut a.v]);
        let d = &mut self.decoder;
        out.extend([
            &mut d.w_input,
            &mut d.w_hidden,
            &mut d.bias,
            &mut d.w_out,
            &mut d.b_out,
        ]);
        out
    }

    /// Replaces every tensor's values from `values` (declaration order),
    /// checking shapes against a freshly initialized set for `config`.
    pub fn from_values(config: &ModelConfig, values: Vec<Tensor>) -> Result<Self, ModelError> {
        let mut params = Self::init(config, 0)?;
        let slots = params.tensors_mut();
        if slots.len() != values.len() {
            return Err(ModelError::Config(alloc::format!(
                "expected {} tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(ModelError::Config(alloc::format!(
                    "tensor shape {:?} does not match expected {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(v.data());
        }
        params.validate(config)?;
        Ok(params)
    }

    pub fn num_learnable(&self) -> usize {
        self.learnable().iter().map(|t| t.numel()).sum()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let reference = Self::init(config, 0)?;
        let ours = self.tensors();
        let theirs = reference.tensors();
        if ours.len() != theirs.len()
            || ours
                .iter()
                .zip(&theirs)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(ModelError::Config(
                "parameter shapes do not match the model configuration".into(),
            ));
        }
        if ours.iter().any(|t| !t.is_finite()) {
            return Err(ModelError::Config(
                "parameters contain non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[BatchNormStats], momentum: f64) {
        for (layer, s) in self.encoder.iter_mut().zip(stats) {
            let (rm, rv) = (&mut layer.running_mean, &mut layer.running_var);
            s.update_running(rm.data_mut(), rv.data_mut(), momentum);
        }
    }
}

//! Tape-level building blocks: encoder, attention, LSTM step and the shared
//! decode loop used by both teacher-forced training and free-running
//! prediction.

use alloc::vec;
use alloc::vec::Vec;

use super::{CellEncoding, ModelConfig, ModelError, ParameterSet, StopReason};
use crate::pathway::InputImage;
use crate::tensor::{BatchNormStats, NormMode, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub kernel: Var,
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone)]
pub struct BoundAttention {
    pub w_feature: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub v: Var,
}

#[derive(Debug, Clone)]
pub struct BoundDecoder {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Learnable parameters recorded on a tape, mirroring [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub embedding: Option<Var>,
    pub encoder: Vec<BoundLayer>,
    pub attention: BoundAttention,
    pub decoder: BoundDecoder,
}

impl BoundParams {
    /// Records every learnable tensor; `track` decides whether they collect
    /// gradients.
    pub fn bind(tape: &mut Tape, params: &ParameterSet, track: bool) -> Self {
        let vars: Vec<Var> = params
            .learnable()
            .into_iter()
            .map(|t| {
                let mut t = t.clone();
                t.clear_grad();
                t.set_requires_grad(track);
                tape.leaf(t)
            })
            .collect();
        Self::from_vars(params.embedding.is_some(), params.encoder.len(), &vars)
            .expect("learnable() layout")
    }

    /// Interprets vars laid out like [`ParameterSet::learnable`].
    pub fn from_vars(has_embedding: bool, layers: usize, vars: &[Var]) -> Result<Self, ModelError> {
        let expected = usize::from(has_embedding) + 3 * layers + 9;
        if vars.len() != expected {
            return Err(ModelError::Config(alloc::format!(
                "expected {expected} parameter vars, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().unwrap();
        let embedding = has_embedding.then(&mut next);
        let encoder = (0..layers)
            .map(|_| BoundLayer {
                kernel: next(),
                gamma: next(),
                beta: next(),
            })
            .collect();
        let attention = BoundAttention {
            w_feature: next(),
            w_hidden: next(),
            bias: next(),
            v: next(),
        };
        let decoder = BoundDecoder {
            w_input: next(),
            w_hidden: next(),
            bias: next(),
            w_out: next(),
            b_out: next(),
        };
        Ok(Self {
            embedding,
            encoder,
            attention,
            decoder,
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.embedding.into_iter().collect();
        for l in &self.encoder {
            out.extend([l.kernel, l.gamma, l.beta]);
        }
        let a = &self.attention;
        out.extend([a.w_feature, a.w_hidden, a.bias, a.v]);
        let d = &self.decoder;
        out.extend([d.w_input, d.w_hidden, d.bias, d.w_out, d.b_out]);
        out
    }
}

/// LSTM memory plus the previous-token input, `h₀ = c₀ = ỹ₀ = 0`.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub hidden: Var,
    pub cell: Var,
    pub prev_token: Var,
}

impl DecoderState {
    pub fn initial(tape: &mut Tape, config: &ModelConfig) -> Self {
        let hd = config.lstm_hidden;
        Self {
            hidden: tape.constant(Tensor::zeros(&[1, hd])),
            cell: tape.constant(Tensor::zeros(&[1, hd])),
            prev_token: tape.constant(Tensor::zeros(&[1, config.classes])),
        }
    }
}

pub fn one_hot(tape: &mut Tape, classes: usize, class: usize) -> Var {
    let mut t = Tensor::zeros(&[1, classes]);
    t.data_mut()[class] = 1.0;
    tape.constant(t)
}

fn check_input(config: &ModelConfig, x: &InputImage) -> Result<(), ModelError> {
    if x.height != config.input_height || x.width != config.input_width {
        return Err(ModelError::Dimension(alloc::format!(
            "input is {}×{}, model expects {}×{}",
            x.height,
            x.width,
            config.input_height,
            config.input_width
        )));
    }
    if let Some(&bad) = x.cells.iter().find(|&&v| v as usize > config.vocab_size) {
        return Err(ModelError::Dimension(alloc::format!(
            "cell index {bad} exceeds vocabulary size {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Turns a batch of index grids into the `B×C×H×W` encoder input.
pub fn input_tensor(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundParams,
    inputs: &[&InputImage],
) -> Result<Var, ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::Contract("empty batch".into()));
    }
    for x in inputs {
        check_input(config, x)?;
    }
    let (h, w) = (config.input_height, config.input_width);
    match (config.cell_encoding, bound.embedding) {
        (CellEncoding::Normalized, _) => {
            let n = config.vocab_size as f64;
            let data = inputs
                .iter()
                .flat_map(|x| x.cells.iter().map(move |&v| f64::from(v) / n))
                .collect();
            Ok(tape.constant(Tensor::new(&[inputs.len(), 1, h, w], data)?))
        }
        (CellEncoding::Embedding { .. }, Some(table)) => {
            let cells: Vec<u32> = inputs
                .iter()
                .flat_map(|x| x.cells.iter().copied())
                .collect();
            Ok(tape.embed(table, &cells, (inputs.len(), h, w))?)
        }
        (CellEncoding::Embedding { .. }, None) => Err(ModelError::Config(
            "embedding mode without an embedding table".into(),
        )),
    }
}

/// Runs every encoder block (dilated conv → batch norm → ReLU). Returns the
/// `B×F×h′×w′` feature map and, in train mode, each layer's batch statistics.
pub fn encode_features(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ParameterSet,
    bound: &BoundParams,
    inputs: &[&InputImage],
    mode: NormMode,
) -> Result<(Var, Vec<BatchNormStats>), ModelError> {
    let mut x = input_tensor(tape, config, bound, inputs)?;
    let mut stats = Vec::new();
    for ((layer, b), p) in config
        .encoder
        .iter()
        .zip(&bound.encoder)
        .zip(&params.encoder)
    {
        let conv = tape.conv2d(x, b.kernel, layer.conv_params())?;
        let running = (p.running_mean.data(), p.running_var.data());
        let (normed, s) =
            tape.batch_norm(conv, b.gamma, b.beta, config.bn_eps, mode, Some(running))?;
        stats.extend(s);
        x = tape.relu(normed);
    }
    Ok((x, stats))
}

/// Feature vectors of one sample plus their attention projection `a·W_a`,
/// which does not change between decode steps.
#[derive(Debug, Clone, Copy)]
pub struct SampleFeatures {
    /// `H × F`
    pub a: Var,
    /// `H × A`
    pub keys: Var,
}

pub fn sample_features(
    tape: &mut Tape,
    features: Var,
    sample: usize,
    att: &BoundAttention,
) -> Result<SampleFeatures, ModelError> {
    let a = tape.location_rows(features, sample)?;
    let keys = tape.matmul(a, att.w_feature)?;
    Ok(SampleFeatures { a, keys })
}

fn score_with_keys(
    tape: &mut Tape,
    keys: Var,
    hidden: Var,
    att: &BoundAttention,
) -> Result<Var, ModelError> {
    let query = tape.matmul(hidden, att.w_hidden)?;
    let query = tape.add_bias(query, att.bias)?;
    // broadcast the 1×A query over all H rows
    let summed = tape.add_bias(keys, query)?;
    let act = tape.tanh(summed);
    let scores = tape.matmul(act, att.v)?;
    let h = tape.shape(scores)[0];
    Ok(tape.reshape(scores, &[h])?)
}

/// `score[j] = vᵀ·tanh(a_j·W_a + h_prev·W_h + bias)` for every location `j`.
pub fn attention_score(
    tape: &mut Tape,
    a: Var,
    hidden: Var,
    att: &BoundAttention,
) -> Result<Var, ModelError> {
    let keys = tape.matmul(a, att.w_feature)?;
    score_with_keys(tape, keys, hidden, att)
}

/// The attention mask: softmax over locations.
pub fn attention_mask(tape: &mut Tape, scores: Var) -> Result<Var, ModelError> {
    Ok(tape.softmax(scores)?)
}

/// Returns `(a ⊙ p, Σ_j p_j·a_j)`.
pub fn attention_apply(tape: &mut Tape, a: Var, p: Var) -> Result<(Var, Var), ModelError> {
    let weighted = tape.scale_rows(a, p)?;
    let context = tape.sum_rows(weighted)?;
    Ok((weighted, context))
}

/// One LSTM step over `[context ‖ prev_token]`; returns the class logits.
pub fn lstm_step(
    tape: &mut Tape,
    config: &ModelConfig,
    context: Var,
    state: DecoderState,
    dec: &BoundDecoder,
) -> Result<(Var, DecoderState), ModelError> {
    let hd = config.lstm_hidden;
    let x = tape.concat(&[context, state.prev_token])?;
    let zx = tape.matmul(x, dec.w_input)?;
    let zh = tape.matmul(state.hidden, dec.w_hidden)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_bias(z, dec.bias)?;
    let gi = tape.slice_cols(z, 0, hd)?;
    let gf = tape.slice_cols(z, hd, hd)?;
    let gg = tape.slice_cols(z, 2 * hd, hd)?;
    let go = tape.slice_cols(z, 3 * hd, hd)?;
    let i = tape.sigmoid(gi);
    let f = tape.sigmoid(gf);
    let g = tape.tanh(gg);
    let o = tape.sigmoid(go);
    let keep = tape.mul(f, state.cell)?;
    let write = tape.mul(i, g)?;
    let cell = tape.add(keep, write)?;
    let squashed = tape.tanh(cell);
    let hidden = tape.mul(o, squashed)?;
    let logits = tape.matmul(hidden, dec.w_out)?;
    let logits = tape.add_bias(logits, dec.b_out)?;
    Ok((
        logits,
        DecoderState {
            hidden,
            cell,
            prev_token: state.prev_token,
        },
    ))
}

/// Where the previous-token input comes from.
#[derive(Debug, Clone, Copy)]
pub enum TokenSource<'a> {
    /// Ground-truth labels (teacher forcing); runs exactly `labels.len()` steps.
    Teacher(&'a [usize]),
    /// The argmax of the previous step; stops at END or `max_len`.
    FreeRunning,
}

#[derive(Debug, Clone, Copy)]
pub struct DecodedStep {
    /// `1 × K` class distribution.
    pub probs: Var,
    /// `H` attention mask.
    pub mask: Var,
    pub argmax: usize,
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The prediction loop: attention on `(a, h_{i−1})`, LSTM step, softmax.
pub fn decode(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundParams,
    features: SampleFeatures,
    source: TokenSource<'_>,
) -> Result<(Vec<DecodedStep>, StopReason), ModelError> {
    let mut state = DecoderState::initial(tape, config);
    let steps = match source {
        TokenSource::Teacher(labels) => labels.len(),
        TokenSource::FreeRunning => config.max_len,
    };
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let scores = score_with_keys(tape, features.keys, state.hidden, &bound.attention)?;
        let mask = attention_mask(tape, scores)?;
        let (_, context) = attention_apply(tape, features.a, mask)?;
        let (logits, next) = lstm_step(tape, config, context, state, &bound.decoder)?;
        let probs = tape.softmax(logits)?;
        let best = argmax(tape.data(probs));
        out.push(DecodedStep {
            probs,
            mask,
            argmax: best,
        });
        let token = match source {
            TokenSource::Teacher(labels) => labels[i],
            TokenSource::FreeRunning => {
                if best == config.end_class() {
                    return Ok((out, StopReason::End));
                }
                best
            }
        };
        state = DecoderState {
            prev_token: one_hot(tape, config.classes, token),
            ..next
        };
    }
    let stop = match out.last() {
        Some(s) if s.argmax == config.end_class() => StopReason::End,
        _ => StopReason::LengthCap,
    };
    Ok((out, stop))
}

/// Checks a teacher label sequence: non-empty, at most `L`, classes in
/// range, END only last, and END-terminated unless it has length `L`.
pub fn validate_labels(config: &ModelConfig, labels: &[usize]) -> Result<(), ModelError> {
    let end = config.end_class();
    let bad = |msg: &str| {
        Err(ModelError::Contract(alloc::format!(
            "label sequence {labels:?}: {msg}"
        )))
    };
    if labels.is_empty() {
        return bad("empty");
    }
    if labels.len() > config.max_len {
        return bad("longer than max_len");
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= config.classes) {
        return Err(ModelError::Contract(alloc::format!(
            "class {c} out of range"
        )));
    }
    if labels[..labels.len() - 1].contains(&end) {
        return bad("END before the last step");
    }
    if labels.len() < config.max_len && labels[labels.len() - 1] != end {
        return bad("shorter than max_len but not END-terminated");
    }
    Ok(())
}

/// Mean cross-entropy over a sample's steps, built on the tape.
pub fn sample_loss(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundParams,
    features: SampleFeatures,
    labels: &[usize],
) -> Result<(Var, Vec<DecodedStep>), ModelError> {
    validate_labels(config, labels)?;
    let (steps, _) = decode(tape, config, bound, features, TokenSource::Teacher(labels))?;
    let mut terms = Vec::with_capacity(steps.len());
    for (step, &y) in steps.iter().zip(labels) {
        terms.push(tape.cross_entropy(step.probs, y)?);
    }
    let total = tape.add_n(&terms)?;
    Ok((tape.scale(total, 1.0 / terms.len() as f64), steps))
}

/// Mean of per-sample losses over a batch that shares batch-norm statistics.
pub fn batch_loss(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ParameterSet,
    bound: &BoundParams,
    batch: &[(&InputImage, &[usize])],
    mode: NormMode,
) -> Result<(Var, Vec<BatchNormStats>), ModelError> {
    let inputs: Vec<&InputImage> = batch.iter().map(|(x, _)| *x).collect();
    let (features, stats) = encode_features(tape, config, params, bound, &inputs, mode)?;
    let mut losses = vec![];
    for (b, (_, labels)) in batch.iter().enumerate() {
        let sf = sample_features(tape, features, b, &bound.attention)?;
        let (loss, _) = sample_loss(tape, config, bound, sf, labels)?;
        losses.push(loss);
    }
    let total = tape.add_n(&losses)?;
    Ok((tape.scale(total, 1.0 / losses.len() as f64), stats))
}

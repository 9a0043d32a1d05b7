//! Mini-batch training: stratified splitting, clipped Adam updates and the
//! epoch loop with best-checkpoint tracking.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::model::{self, ModelConfig, ModelError, ParameterSet};
use crate::pathway::LabeledInput;
use crate::tensor::{NormMode, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("training configuration error: {0}")]
    Config(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("training diverged in epoch {epoch}: {reason}")]
    Divergence {
        epoch: usize,
        reason: String,
        /// State after the last fully successful epoch.
        last_good: Box<TrainState>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Decoupled weight decay on matrices, kernels and the embedding (not on
    /// biases or batch-norm affine terms); 0 disables it.
    pub weight_decay: f64,
    /// Seeds parameter initialization, the split and the shuffles.
    pub seed: u64,
    pub train_fraction: f64,
    /// Evaluate accuracy / test loss every this many epochs (and always on
    /// the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            weight_decay: 0.0,
            seed: 0,
            train_fraction: 0.8,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(self.eps > 0.0) || !(self.clip_norm > 0.0) {
            return bad("learning_rate, eps and clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decay rates must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        Ok(())
    }
}

/// Number of test items drawn from a stratum of `n` items.
fn test_share(n: usize, fraction: f64, stratified: bool) -> usize {
    let raw = math::round((1.0 - fraction) * n as f64) as usize;
    if stratified && n >= 2 {
        raw.clamp(1, n - 1)
    } else {
        raw.min(n)
    }
}

/// Splits `0..strata.len()` into `(train, test)` index lists. Each stratum is
/// shuffled and contributes `round((1−f)·n)` test items, at least one and at
/// most `n−1` when it has two or more members. A single stratum is a plain
/// shuffled split.
pub fn split_indices<K: Ord + Clone>(
    strata: &[K],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if strata.len() < 2 {
        return Err(TrainError::Split("need at least two items".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TrainError::Split(alloc::format!(
            "fraction {fraction} outside (0, 1)"
        )));
    }
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in strata.iter().enumerate() {
        groups.entry(k.clone()).or_default().push(i);
    }
    let stratified = groups.len() > 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        let n_test = test_share(members.len(), fraction, stratified);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(TrainError::Split(alloc::format!(
            "fraction {fraction} of {} items leaves an empty side",
            strata.len()
        )));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// [`split_indices`] applied to items, stratified by `stratum`.
pub fn split_dataset<T: Clone, K: Ord + Clone>(
    items: &[T],
    fraction: f64,
    seed: u64,
    stratum: impl Fn(&T) -> K,
) -> Result<(Vec<T>, Vec<T>), TrainError> {
    let keys: Vec<K> = items.iter().map(stratum).collect();
    let (train, test) = split_indices(&keys, fraction, seed)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| items[i].clone()).collect();
    Ok((pick(train), pick(test)))
}

/// First and second moment estimates, one buffer per learnable tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params(params: &[&Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|t| alloc::vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|t| alloc::vec![0.0; t.numel()]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to every gradient (1 when not clipped).
    pub clip_scale: f64,
}

/// Clips the global gradient norm to `config.clip_norm`, then applies one
/// bias-corrected Adam step.
pub fn update_parameters(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<UpdateInfo, TrainError> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(TrainError::Shape(alloc::format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        if p.numel() != g.len() || m.len() != g.len() || v.len() != g.len() {
            return Err(TrainError::Shape(alloc::format!(
                "parameter of {} values got a gradient of {}",
                p.numel(),
                g.len()
            )));
        }
    }
    let squares: f64 = grads.iter().flatten().map(|g| g * g).sum();
    if !squares.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    let grad_norm = math::sqrt(squares);
    let clip_scale = if grad_norm > config.clip_norm {
        config.clip_norm / grad_norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(config.beta1, f64::from(t));
    let c2 = 1.0 - libm::pow(config.beta2, f64::from(t));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let decay = if p.rank() >= 2 {
            config.learning_rate * config.weight_decay
        } else {
            0.0
        };
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i] * clip_scale;
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *x -= config.learning_rate * m_hat / (math::sqrt(v_hat) + config.eps) + decay * *x;
        }
    }
    Ok(UpdateInfo {
        grad_norm,
        clip_scale,
    })
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParameterSet,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: ParameterSet) -> Self {
        let adam = AdamState::for_params(&params.learnable());
        Self {
            params,
            adam,
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean of the mini-batch losses seen during the epoch.
    pub train_loss: f64,
    /// Eval-mode teacher-forced loss on the held-out split.
    pub test_loss: Option<f64>,
    /// Eval-mode exact-sequence accuracy on the training split.
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

impl EpochLog {
    /// Accuracy reported in the CSV log: held-out when available.
    pub fn seq_accuracy(&self) -> Option<f64> {
        self.test_accuracy.or(self.train_accuracy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub state: TrainState,
    /// Parameters with the lowest test loss (train loss without a test
    /// split) and the epoch they came from.
    pub best: Option<(usize, ParameterSet)>,
    pub log: Vec<EpochLog>,
}

impl FitOutcome {
    pub fn params(&self) -> &ParameterSet {
        &self.state.params
    }
}

/// Eval-mode teacher-forced mean loss.
pub fn evaluate_loss(
    config: &ModelConfig,
    params: &ParameterSet,
    data: &[LabeledInput],
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for s in data {
        total += model::forward_train(config, params, &s.input, &s.labels, NormMode::Eval)?.loss;
    }
    Ok(total / data.len() as f64)
}

/// Fraction of samples whose predicted sequence (END included) equals the
/// label sequence.
pub fn sequence_accuracy(
    config: &ModelConfig,
    params: &ParameterSet,
    data: &[LabeledInput],
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("no samples to evaluate".into()));
    }
    let mut hits = 0usize;
    for s in data {
        if model::predict(config, params, &s.input)?.classes() == s.labels {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Trains from a fresh initialization seeded by `train.seed`.
pub fn fit(
    config: &ModelConfig,
    train: &TrainConfig,
    train_set: &[LabeledInput],
    test_set: &[LabeledInput],
) -> Result<FitOutcome, TrainError> {
    let params = ParameterSet::init(config, train.seed)?;
    fit_from(
        config,
        train,
        TrainState::new(params),
        train.epochs,
        train_set,
        test_set,
    )
}

/// Runs `epochs` more epochs starting from `state`. Shuffling for epoch `e`
/// depends only on `(seed, e)`, so a resumed run follows the same path as an
/// uninterrupted one.
pub fn fit_from(
    config: &ModelConfig,
    train: &TrainConfig,
    state: TrainState,
    epochs: usize,
    train_set: &[LabeledInput],
    test_set: &[LabeledInput],
) -> Result<FitOutcome, TrainError> {
    fit_observed(
        config,
        train,
        state,
        epochs,
        train_set,
        test_set,
        &mut |_| {},
    )
}

/// [`fit_from`] that reports every finished epoch to `on_epoch`.
pub fn fit_observed(
    config: &ModelConfig,
    train: &TrainConfig,
    mut state: TrainState,
    epochs: usize,
    train_set: &[LabeledInput],
    test_set: &[LabeledInput],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FitOutcome, TrainError> {
    train.validate()?;
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    state.params.validate(config)?;
    let mut log = Vec::with_capacity(epochs);
    let mut best: Option<(usize, ParameterSet)> = None;
    let mut best_loss = f64::INFINITY;
    let last_epoch = state.epoch + epochs;

    while state.epoch < last_epoch {
        let epoch = state.epoch + 1;
        let checkpoint = state.clone();
        let diverged = |reason: String, good: &TrainState| TrainError::Divergence {
            epoch,
            reason,
            last_good: Box::new(good.clone()),
        };

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (&train_set[i].input, train_set[i].labels.as_slice()))
                .collect();
            let params = &mut state.params;
            let g = model::loss_and_gradients(config, params, &batch, NormMode::Train)?;
            if !g.loss.is_finite() {
                return Err(diverged(alloc::format!("loss is {}", g.loss), &checkpoint));
            }
            loss_sum += g.loss * chunk.len() as f64;
            let mut slots = params.learnable_mut();
            match update_parameters(&mut slots, &g.grads, &mut state.adam, train) {
                Ok(_) => {}
                Err(TrainError::NonFiniteGradient) => {
                    return Err(diverged("non-finite gradient".into(), &checkpoint))
                }
                Err(e) => return Err(e),
            }
            params.update_running_stats(&g.stats, config.bn_momentum);
        }
        state.epoch = epoch;
        let train_loss = loss_sum / train_set.len() as f64;

        let evaluate = epoch % train.eval_every == 0 || epoch == last_epoch;
        let params = &state.params;
        let mut entry = EpochLog {
            epoch,
            train_loss,
            test_loss: None,
            train_accuracy: None,
            test_accuracy: None,
        };
        if evaluate {
            entry.train_accuracy = Some(sequence_accuracy(config, params, train_set)?);
            if !test_set.is_empty() {
                entry.test_loss = Some(evaluate_loss(config, params, test_set)?);
                entry.test_accuracy = Some(sequence_accuracy(config, params, test_set)?);
            }
        }
        let score = if test_set.is_empty() {
            Some(train_loss)
        } else {
            entry.test_loss
        };
        if let Some(score) = score {
            if score < best_loss {
                best_loss = score;
                best = Some((epoch, params.clone()));
            }
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(FitOutcome { state, best, log })
}

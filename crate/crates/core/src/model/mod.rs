//! The attention model: dilated-convolution encoder, additive attention over
//! feature locations and an LSTM decoder emitting one condition per step.

mod config;
pub mod network;
mod params;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use self::config::{CellEncoding, EncoderLayer, ModelConfig, ReceptiveField};
pub use self::network::{BoundParams, TokenSource};
pub use self::params::{AttentionParams, DecoderParams, EncoderParams, ParameterSet};

use crate::pathway::{InputImage, PathwayError};
use crate::tensor::{BatchNormStats, NormMode, Tape, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pathway(#[from] PathwayError),
}

/// Why free-running prediction stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    End,
    LengthCap,
}

/// One step's attention weights over the `rows × cols` feature grid,
/// row-major, summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl AttentionMask {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Nearest-neighbour resize to `height × width`: target cell `(r, c)`
    /// takes source `(r·rows/height, c·cols/width)`.
    pub fn upsample(&self, height: usize, width: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = r * self.rows / height;
            for c in 0..width {
                out.push(self.get(sr, c * self.cols / width));
            }
        }
        out
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Maps a `mask_rows × mask_cols` attention mask onto the `height × width`
/// input. Every input column belongs to one mask column; each mask row
/// spreads its weight evenly over a range of input rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskProjection {
    pub mask_rows: usize,
    pub mask_cols: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive input-row range of each mask row.
    pub row_spans: Vec<(usize, usize)>,
    /// Owning mask column of each input column.
    pub col_owner: Vec<usize>,
}

impl MaskProjection {
    /// Plain nearest-neighbour resize, the same mapping as
    /// [`AttentionMask::upsample`] when `height` is a multiple of `mask_rows`.
    pub fn nearest(mask_rows: usize, mask_cols: usize, height: usize, width: usize) -> Self {
        let row_spans = (0..mask_rows)
            .map(|i| {
                let lo = (i * height).div_ceil(mask_rows);
                let hi = ((i + 1) * height).div_ceil(mask_rows).max(lo + 1) - 1;
                (lo.min(height - 1), hi.min(height - 1))
            })
            .collect();
        Self {
            mask_rows,
            mask_cols,
            height,
            width,
            row_spans,
            col_owner: (0..width).map(|c| c * mask_cols / width).collect(),
        }
    }

    /// Projection through the encoder's receptive fields: a feature row
    /// covers every input row its receptive field reaches, and an input
    /// column goes to the feature column whose receptive field is centred
    /// nearest to it. With the default encoder every feature row sees all
    /// input rows, so attention resolves columns, not rows.
    pub fn for_model(config: &ModelConfig) -> Result<Self, ModelError> {
        let (rows, cols) = config.feature_grid()?;
        let (row_rf, col_rf) = config.receptive_field();
        let (h, w) = (config.input_height, config.input_width);
        let row_spans = (0..rows).map(|i| row_rf.span(i, h)).collect();
        let centre0 = col_rf.offset * 2 + col_rf.size as isize - 1;
        let jump = 2 * col_rf.jump as isize;
        let col_owner = (0..w)
            .map(|c| {
                let rel = 2 * c as isize - centre0;
                let j = (rel + jump / 2).div_euclid(jump);
                j.clamp(0, cols as isize - 1) as usize
            })
            .collect();
        Ok(Self {
            mask_rows: rows,
            mask_cols: cols,
            height: h,
            width: w,
            row_spans,
            col_owner,
        })
    }

    /// Input-resolution heatmap, row-major `height × width`.
    pub fn project(&self, mask: &AttentionMask) -> Result<Vec<f64>, ModelError> {
        if mask.rows != self.mask_rows
            || mask.cols != self.mask_cols
            || mask.values.len() != mask.rows * mask.cols
        {
            return Err(ModelError::Dimension(alloc::format!(
                "{}×{} mask ({} values) does not match a {}×{} projection",
                mask.rows,
                mask.cols,
                mask.values.len(),
                self.mask_rows,
                self.mask_cols
            )));
        }
        let mut out = alloc::vec![0.0; self.height * self.width];
        for (i, &(lo, hi)) in self.row_spans.iter().enumerate() {
            let share = 1.0 / (hi + 1 - lo) as f64;
            for r in lo..=hi {
                let row = &mut out[r * self.width..(r + 1) * self.width];
                for (cell, &j) in row.iter_mut().zip(&self.col_owner) {
                    *cell += mask.get(i, j) * share;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    /// One `K`-way distribution per emitted step.
    pub distributions: Vec<Vec<f64>>,
    pub masks: Vec<AttentionMask>,
    pub stop: StopReason,
}

impl PredictionResult {
    /// Argmax class per step, END included when emitted.
    pub fn classes(&self) -> Vec<usize> {
        self.distributions
            .iter()
            .map(|d| network::argmax(d))
            .collect()
    }
}

/// Teacher-forced pass over one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainForward {
    /// Mean cross-entropy over the label steps.
    pub loss: f64,
    pub distributions: Vec<Vec<f64>>,
    pub masks: Vec<AttentionMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    /// Mean per-sample loss.
    pub loss: f64,
    /// One gradient per learnable tensor, in [`ParameterSet::learnable`] order.
    pub grads: Vec<Vec<f64>>,
    /// Train-mode batch statistics per encoder layer (empty in eval mode).
    pub stats: Vec<BatchNormStats>,
}

fn mask_of(
    tape: &Tape,
    config: &ModelConfig,
    mask: crate::tensor::Var,
) -> Result<AttentionMask, ModelError> {
    let (rows, cols) = config.feature_grid()?;
    Ok(AttentionMask {
        rows,
        cols,
        values: tape.data(mask).to_vec(),
    })
}

/// Runs the teacher-forced decoder for one sample and reports the loss.
pub fn forward_train(
    config: &ModelConfig,
    params: &ParameterSet,
    x: &InputImage,
    labels: &[usize],
    mode: NormMode,
) -> Result<TrainForward, ModelError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let (features, _) = network::encode_features(&mut tape, config, params, &bound, &[x], mode)?;
    let sf = network::sample_features(&mut tape, features, 0, &bound.attention)?;
    let (loss, steps) = network::sample_loss(&mut tape, config, &bound, sf, labels)?;
    Ok(TrainForward {
        loss: tape.data(loss)[0],
        distributions: steps.iter().map(|s| tape.data(s.probs).to_vec()).collect(),
        masks: steps
            .iter()
            .map(|s| mask_of(&tape, config, s.mask))
            .collect::<Result<_, _>>()?,
    })
}

/// Mean loss over `batch` and its gradient with respect to every learnable
/// tensor.
pub fn loss_and_gradients(
    config: &ModelConfig,
    params: &ParameterSet,
    batch: &[(&InputImage, &[usize])],
    mode: NormMode,
) -> Result<BatchGradients, ModelError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, true);
    let (loss, stats) = network::batch_loss(&mut tape, config, params, &bound, batch, mode)?;
    tape.backward(loss)?;
    let grads = bound
        .vars()
        .into_iter()
        .map(|v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    Ok(BatchGradients {
        loss: tape.data(loss)[0],
        grads,
        stats,
    })
}

/// Free-running prediction with batch norm in eval mode.
pub fn predict(
    config: &ModelConfig,
    params: &ParameterSet,
    x: &InputImage,
) -> Result<PredictionResult, ModelError> {
    predict_with_mode(config, params, x, NormMode::Eval)
}

pub fn predict_with_mode(
    config: &ModelConfig,
    params: &ParameterSet,
    x: &InputImage,
    mode: NormMode,
) -> Result<PredictionResult, ModelError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let (features, _) = network::encode_features(&mut tape, config, params, &bound, &[x], mode)?;
    let sf = network::sample_features(&mut tape, features, 0, &bound.attention)?;
    let (steps, stop) = network::decode(&mut tape, config, &bound, sf, TokenSource::FreeRunning)?;
    Ok(PredictionResult {
        distributions: steps.iter().map(|s| tape.data(s.probs).to_vec()).collect(),
        masks: steps
            .iter()
            .map(|s| mask_of(&tape, config, s.mask))
            .collect::<Result<_, _>>()?,
        stop,
    })
}

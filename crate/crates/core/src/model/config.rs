use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::{conv_output_extent, Conv2dParams};

/// How a cell's vocabulary index becomes input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CellEncoding {
    /// One channel holding `index / N`.
    Normalized,
    /// A learned `N × channels` table; empty cells are zero vectors.
    Embedding { channels: usize },
}

/// One dilated conv → batch norm → ReLU block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub filters: usize,
    pub kernel: usize,
    pub dilation: usize,
    #[serde(default = "one")]
    pub stride_h: usize,
    #[serde(default = "one")]
    pub stride_w: usize,
}

fn one() -> usize {
    1
}

impl EncoderLayer {
    /// Padding is `dilation·(kernel−1)/2` on both axes, which preserves
    /// extents at stride 1.
    pub fn conv_params(&self) -> Conv2dParams {
        let pad = self.dilation * (self.kernel - 1) / 2;
        Conv2dParams {
            dilation: self.dilation,
            stride: (self.stride_h, self.stride_w),
            padding: (pad, pad),
        }
    }
}

/// Extent of the input region that influences one feature location along an
/// axis, and where it starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub size: usize,
    /// Input distance between neighbouring feature locations.
    pub jump: usize,
    /// Input coordinate of the first location's leftmost tap (may be negative).
    pub offset: isize,
}

impl ReceptiveField {
    /// Inclusive input range seen by location `o`, clipped to `[0, extent)`.
    pub fn span(&self, o: usize, extent: usize) -> (usize, usize) {
        let start = self.offset + (o * self.jump) as isize;
        let end = start + self.size as isize - 1;
        let lo = start.max(0) as usize;
        let hi = (end.max(0) as usize).min(extent.saturating_sub(1));
        (lo, hi)
    }

    pub fn contains(&self, o: usize, coordinate: usize) -> bool {
        let start = self.offset + (o * self.jump) as isize;
        let c = coordinate as isize;
        c >= start && c < start + self.size as isize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Rows of the condition-free input (h − 1).
    pub input_height: usize,
    pub input_width: usize,
    /// N, highest vocabulary index.
    pub vocab_size: usize,
    /// K, condition classes plus END (the last class).
    pub classes: usize,
    /// L, longest predicted sequence.
    pub max_len: usize,
    pub encoder: Vec<EncoderLayer>,
    pub attention_hidden: usize,
    pub lstm_hidden: usize,
    #[serde(default = "normalized")]
    pub cell_encoding: CellEncoding,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    /// Display names per class, END last. Informational.
    #[serde(default)]
    pub class_names: Vec<String>,
    /// Row dropped from full six-row images before prediction.
    #[serde(default = "default_condition_row")]
    pub condition_row: usize,
}

fn normalized() -> CellEncoding {
    CellEncoding::Normalized
}
fn default_eps() -> f64 {
    1e-5
}
fn default_momentum() -> f64 {
    0.1
}
fn default_condition_row() -> usize {
    1
}

impl ModelConfig {
    /// Four layers of 3×3 kernels with width strides 1/2/2/2. Dilations are
    /// 1/2/2/2 on each layer's own grid, which spaces the taps 1/2/4/8 input
    /// columns apart; 1/2/4/8 on the strided grids would leave every eighth
    /// input column outside all receptive fields. Attention size 64.
    pub fn standard(
        input_height: usize,
        input_width: usize,
        vocab_size: usize,
        classes: usize,
    ) -> Self {
        let encoder = [(16, 1, 1), (32, 2, 2), (64, 2, 2), (64, 2, 2)]
            .into_iter()
            .map(|(filters, dilation, stride_w)| EncoderLayer {
                filters,
                kernel: 3,
                dilation,
                stride_h: 1,
                stride_w,
            })
            .collect();
        Self {
            input_height,
            input_width,
            vocab_size,
            classes,
            max_len: crate::pathway::DEFAULT_MAX_LABELS,
            encoder,
            attention_hidden: 64,
            lstm_hidden: 64,
            cell_encoding: CellEncoding::Normalized,
            bn_eps: default_eps(),
            bn_momentum: default_momentum(),
            class_names: Vec::new(),
            condition_row: default_condition_row(),
        }
    }

    /// Small model for checks and overfitting: two layers of 4 filters,
    /// hidden sizes 8.
    pub fn tiny(
        input_height: usize,
        input_width: usize,
        vocab_size: usize,
        classes: usize,
    ) -> Self {
        Self {
            encoder: vec![
                EncoderLayer {
                    filters: 4,
                    kernel: 3,
                    dilation: 1,
                    stride_h: 1,
                    stride_w: 1,
                },
                EncoderLayer {
                    filters: 4,
                    kernel: 3,
                    dilation: 2,
                    stride_h: 1,
                    stride_w: 2,
                },
            ],
            attention_hidden: 8,
            lstm_hidden: 8,
            ..Self::standard(input_height, input_width, vocab_size, classes)
        }
    }

    pub fn end_class(&self) -> usize {
        self.classes - 1
    }

    pub fn input_channels(&self) -> usize {
        match self.cell_encoding {
            CellEncoding::Normalized => 1,
            CellEncoding::Embedding { channels } => channels,
        }
    }

    /// F, channels of the last encoder layer.
    pub fn feature_channels(&self) -> usize {
        self.encoder
            .last()
            .map_or(self.input_channels(), |l| l.filters)
    }

    /// `(h′, w′)` of the final feature map.
    pub fn feature_grid(&self) -> Result<(usize, usize), ModelError> {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for layer in &self.encoder {
            let p = layer.conv_params();
            h = conv_output_extent(h, layer.kernel, p.dilation, p.stride.0, p.padding.0)?;
            w = conv_output_extent(w, layer.kernel, p.dilation, p.stride.1, p.padding.1)?;
        }
        Ok((h, w))
    }

    /// H = h′·w′ attention locations.
    pub fn locations(&self) -> Result<usize, ModelError> {
        self.feature_grid().map(|(h, w)| h * w)
    }

    /// Receptive field of a final feature location, `(rows, columns)`.
    pub fn receptive_field(&self) -> (ReceptiveField, ReceptiveField) {
        let mut rows = ReceptiveField {
            size: 1,
            jump: 1,
            offset: 0,
        };
        let mut cols = rows;
        for layer in &self.encoder {
            let p = layer.conv_params();
            for (rf, stride, pad) in [
                (&mut rows, p.stride.0, p.padding.0),
                (&mut cols, p.stride.1, p.padding.1),
            ] {
                rf.offset -= (pad * rf.jump) as isize;
                rf.size += (layer.kernel - 1) * layer.dilation * rf.jump;
                rf.jump *= stride;
            }
        }
        (rows, cols)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::Config(msg.into()));
        if self.input_height == 0 || self.input_width == 0 {
            return bad("input extents must be positive");
        }
        if self.vocab_size == 0 {
            return bad("vocabulary must not be empty");
        }
        if self.classes < 2 {
            return bad("need at least one condition class plus END");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if self.encoder.is_empty() {
            return bad("encoder needs at least one layer");
        }
        if self.encoder.iter().any(|l| {
            l.filters == 0 || l.kernel == 0 || l.dilation == 0 || l.stride_h == 0 || l.stride_w == 0
        }) {
            return bad("encoder extents must be positive");
        }
        if self.attention_hidden == 0 || self.lstm_hidden == 0 {
            return bad("hidden sizes must be positive");
        }
        if let CellEncoding::Embedding { channels: 0 } = self.cell_encoding {
            return bad("embedding needs at least one channel");
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("batch norm eps must be positive and momentum in [0,1]");
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.classes {
            return bad("class_names must list every class");
        }
        if self.locations()? == 0 {
            return bad("encoder leaves no feature locations");
        }
        Ok(())
    }
}

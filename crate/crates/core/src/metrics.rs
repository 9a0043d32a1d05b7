//! Evaluation: per-class precision/recall/F1 over composite sequence labels,
//! row-normalized confusion matrices, sequence overlap and attention-event
//! extraction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{AttentionMask, MaskProjection};
use crate::pathway::{CodeVocabulary, DimensionConfig, InputImage};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("contract error: {0}")]
    Contract(String),
}

fn aligned<T>(preds: &[T], truths: &[T]) -> Result<(), MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::Contract(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    Ok(())
}

/// `2PR/(P+R)`, or 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore<T> {
    pub class: T,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Precision or recall had a zero denominator and was reported as 0.
    pub undefined: bool,
}

impl<T> ClassScore<T> {
    /// Number of truths of this class.
    pub fn support(&self) -> usize {
        self.true_positives + self.false_negatives
    }
}

/// Per-class scores over every class seen in either list, in class order.
pub fn precision_recall_f1<T: Ord + Clone>(
    preds: &[T],
    truths: &[T],
) -> Result<Vec<ClassScore<T>>, MetricsError> {
    aligned(preds, truths)?;
    let mut counts: BTreeMap<&T, [usize; 3]> = BTreeMap::new();
    for (p, t) in preds.iter().zip(truths) {
        if p == t {
            counts.entry(p).or_default()[0] += 1;
        } else {
            counts.entry(p).or_default()[1] += 1;
            counts.entry(t).or_default()[2] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(class, [tp, fp, fn_])| {
            let ratio = |num: usize, den: usize| {
                if den == 0 {
                    None
                } else {
                    Some(num as f64 / den as f64)
                }
            };
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let (p, r) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
            ClassScore {
                class: class.clone(),
                true_positives: tp,
                false_positives: fp,
                false_negatives: fn_,
                precision: p,
                recall: r,
                f1: f1_score(p, r),
                undefined: precision.is_none() || recall.is_none(),
            }
        })
        .collect())
}

/// Rows are truths, columns predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix<T> {
    pub labels: Vec<T>,
    pub counts: Vec<Vec<usize>>,
    /// `100·count / row total`; all zero on unpopulated rows.
    pub percent: Vec<Vec<f64>>,
    pub populated: Vec<bool>,
}

/// Confusion matrix over the union of predicted and true labels.
pub fn confusion_matrix<T: Ord + Clone>(
    preds: &[T],
    truths: &[T],
) -> Result<ConfusionMatrix<T>, MetricsError> {
    let mut universe: Vec<T> = preds.iter().chain(truths).cloned().collect();
    universe.sort();
    universe.dedup();
    confusion_matrix_over(universe, preds, truths)
}

/// Confusion matrix over an explicit label universe.
pub fn confusion_matrix_over<T: Ord + Clone>(
    labels: Vec<T>,
    preds: &[T],
    truths: &[T],
) -> Result<ConfusionMatrix<T>, MetricsError> {
    aligned(preds, truths)?;
    let position = |x: &T| {
        labels
            .iter()
            .position(|l| l == x)
            .ok_or_else(|| MetricsError::Contract("label outside the universe".into()))
    };
    let n = labels.len();
    let mut counts = alloc::vec![alloc::vec![0usize; n]; n];
    for (p, t) in preds.iter().zip(truths) {
        counts[position(t)?][position(p)?] += 1;
    }
    let populated: Vec<bool> = counts
        .iter()
        .map(|row| row.iter().sum::<usize>() > 0)
        .collect();
    let percent = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| {
                    if total == 0 {
                        0.0
                    } else {
                        100.0 * c as f64 / total as f64
                    }
                })
                .collect()
        })
        .collect();
    Ok(ConfusionMatrix {
        labels,
        counts,
        percent,
        populated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    /// `2·|a∩b| / (|a|+|b|)`
    pub dice: f64,
    /// `|a∩b| / |a∪b|`
    pub iou: f64,
    /// Both sequences were empty; both scores are defined as 1.
    pub vacuous: bool,
}

/// Multiset overlap of two label sequences (order ignored).
pub fn sequence_overlap<T: Ord>(pred: &[T], truth: &[T]) -> Overlap {
    if pred.is_empty() && truth.is_empty() {
        return Overlap {
            dice: 1.0,
            iou: 1.0,
            vacuous: true,
        };
    }
    let mut counts: BTreeMap<&T, (usize, usize)> = BTreeMap::new();
    for x in pred {
        counts.entry(x).or_default().0 += 1;
    }
    for x in truth {
        counts.entry(x).or_default().1 += 1;
    }
    let inter: usize = counts.values().map(|&(a, b)| a.min(b)).sum();
    let union: usize = counts.values().map(|&(a, b)| a.max(b)).sum();
    Overlap {
        dice: 2.0 * inter as f64 / (pred.len() + truth.len()) as f64,
        iou: inter as f64 / union as f64,
        vacuous: false,
    }
}

/// One decoded pathway: its model input, the masks of its non-END steps
/// and how those masks map onto the input.
#[derive(Debug, Clone, Copy)]
pub struct AttentionRecord<'a> {
    pub input: &'a InputImage,
    pub masks: &'a [AttentionMask],
    pub projection: &'a MaskProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionOptions {
    pub threshold: f64,
    pub top_k: usize,
    /// Compare raw projected values with the threshold instead of
    /// `value / max(value)`.
    pub absolute: bool,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            top_k: 20,
            absolute: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionEvent {
    pub index: u32,
    pub code: String,
    pub system: String,
    pub dimension: String,
    pub count: usize,
}

fn project(projection: &MaskProjection, mask: &AttentionMask) -> Result<Vec<f64>, MetricsError> {
    projection
        .project(mask)
        .map_err(|e| MetricsError::Contract(format!("{e}")))
}

/// Counts event cells whose projected mask value passes the threshold,
/// aggregated per code across all records and steps, ranked by count then
/// vocabulary index.
pub fn top_attention_events(
    records: &[AttentionRecord<'_>],
    vocab: &CodeVocabulary,
    options: &AttentionOptions,
) -> Result<Vec<AttentionEvent>, MetricsError> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for record in records {
        let x = record.input;
        let p = record.projection;
        if (p.height, p.width) != (x.height, x.width) {
            return Err(MetricsError::Contract(format!(
                "projection targets {}×{}, input is {}×{}",
                p.height, p.width, x.height, x.width
            )));
        }
        for mask in record.masks {
            let up = project(p, mask)?;
            let cut = if options.absolute {
                options.threshold
            } else {
                options.threshold * up.iter().copied().fold(0.0, f64::max)
            };
            for (&cell, &value) in x.cells.iter().zip(&up) {
                if cell != 0 && value >= cut {
                    *counts.entry(cell).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(options.top_k);
    ranked
        .into_iter()
        .map(|(index, count)| {
            let entry = vocab.entry(index).ok_or_else(|| {
                MetricsError::Contract(format!("index {index} is not in the vocabulary"))
            })?;
            Ok(AttentionEvent {
                index,
                code: entry.code.clone(),
                system: entry.system.clone(),
                dimension: entry.dimension.clone(),
                count,
            })
        })
        .collect()
}

/// Share of a mask's projected mass that falls on the given input columns,
/// together with the share a uniform mask would put there.
pub fn column_mass(
    mask: &AttentionMask,
    projection: &MaskProjection,
    columns: &[usize],
) -> Result<(f64, f64), MetricsError> {
    let uniform = AttentionMask {
        rows: mask.rows,
        cols: mask.cols,
        values: alloc::vec![1.0 / (mask.rows * mask.cols) as f64; mask.rows * mask.cols],
    };
    let width = projection.width;
    let mut cols: Vec<usize> = columns.iter().copied().filter(|&c| c < width).collect();
    cols.sort_unstable();
    cols.dedup();
    let share = |m: &AttentionMask| -> Result<f64, MetricsError> {
        let up = project(projection, m)?;
        let total: f64 = up.iter().sum();
        let on: f64 = up
            .chunks(width)
            .map(|row| cols.iter().map(|&c| row[c]).sum::<f64>())
            .sum();
        Ok(if total > 0.0 { on / total } else { 0.0 })
    };
    Ok((share(mask)?, share(&uniform)?))
}

/// Composite name of a label sequence with END removed, e.g. `A→B`.
pub fn sequence_name(classes: &[usize], names: &[String], end: usize) -> String {
    let parts: Vec<&str> = classes
        .iter()
        .filter(|&&c| c != end)
        .map(|&c| names.get(c).map_or("?", String::as_str))
        .collect();
    if parts.is_empty() {
        String::from("(none)")
    } else {
        parts.join("→")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub sequence_accuracy: f64,
    pub classes: Vec<ClassScore<String>>,
    pub confusion: ConfusionMatrix<String>,
    /// Mean Dice overlap between predicted and true label multisets.
    pub mean_overlap: f64,
    /// Mean intersection-over-union of the same multisets.
    pub mean_iou: f64,
    pub vacuous_overlaps: usize,
    pub overlap_definition: String,
    #[serde(default)]
    pub attention_events: Vec<AttentionEvent>,
}

impl EvalReport {
    /// Builds the report from predicted and true class sequences (END may be
    /// present; it is dropped for naming and overlap).
    pub fn build(
        names: &[String],
        end: usize,
        preds: &[Vec<usize>],
        truths: &[Vec<usize>],
    ) -> Result<Self, MetricsError> {
        aligned(preds, truths)?;
        if preds.is_empty() {
            return Err(MetricsError::Contract("no samples to evaluate".into()));
        }
        let strip =
            |s: &Vec<usize>| -> Vec<usize> { s.iter().copied().filter(|&c| c != end).collect() };
        let p_names: Vec<String> = preds.iter().map(|s| sequence_name(s, names, end)).collect();
        let t_names: Vec<String> = truths
            .iter()
            .map(|s| sequence_name(s, names, end))
            .collect();
        let classes = precision_recall_f1(&p_names, &t_names)?;
        let confusion = confusion_matrix(&p_names, &t_names)?;
        let (mut dice, mut iou, mut vacuous) = (0.0, 0.0, 0);
        let mut exact = 0;
        for (p, t) in preds.iter().zip(truths) {
            let o = sequence_overlap(&strip(p), &strip(t));
            dice += o.dice;
            iou += o.iou;
            vacuous += usize::from(o.vacuous);
            exact += usize::from(strip(p) == strip(t));
        }
        let n = preds.len() as f64;
        Ok(Self {
            samples: preds.len(),
            sequence_accuracy: exact as f64 / n,
            classes,
            confusion,
            mean_overlap: dice / n,
            mean_iou: iou / n,
            vacuous_overlaps: vacuous,
            overlap_definition:
                "overlap = 2|pred ∩ true| / (|pred| + |true|) over label multisets \
                (1 on a perfect match); iou = |pred ∩ true| / |pred ∪ true|"
                    .into(),
            attention_events: Vec::new(),
        })
    }

    /// Aligned plain-text tables: per-class scores, then the confusion
    /// matrix in row percentages.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let width = self
            .classes
            .iter()
            .map(|c| c.class.chars().count())
            .chain(core::iter::once(8))
            .max()
            .unwrap_or(8);
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>6}  {:>6}  {:>7}",
            "sequence", "precision", "recall", "f1", "support"
        );
        for c in &self.classes {
            let flag = if c.undefined { " *" } else { "" };
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.3}  {:>6.3}  {:>6.3}  {:>7}{flag}",
                c.class,
                c.precision,
                c.recall,
                c.f1,
                c.support()
            );
        }
        let _ = writeln!(out);
        let cell = self
            .confusion
            .labels
            .iter()
            .map(|l| l.chars().count())
            .chain(core::iter::once(6))
            .max()
            .unwrap_or(6);
        let _ = write!(out, "{:<width$}", "truth \\ pred");
        for l in &self.confusion.labels {
            let _ = write!(out, "  {l:>cell$}");
        }
        let _ = writeln!(out);
        for (i, l) in self.confusion.labels.iter().enumerate() {
            let _ = write!(out, "{l:<width$}");
            for v in &self.confusion.percent[i] {
                let _ = write!(out, "  {:>cell$}", format!("{v:.1}%"));
            }
            if !self.confusion.populated[i] {
                let _ = write!(out, "  (no truths)");
            }
            let _ = writeln!(out);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "samples            {}", self.samples);
        let _ = writeln!(out, "sequence accuracy  {:.4}", self.sequence_accuracy);
        let _ = writeln!(out, "mean overlap       {:.4}", self.mean_overlap);
        let _ = writeln!(out, "mean iou           {:.4}", self.mean_iou);
        let _ = writeln!(out, "{}", self.overlap_definition);
        if !self.attention_events.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "top attention events");
            for (rank, e) in self.attention_events.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{:>3}  {:<24}  {:<14}  {}",
                    rank + 1,
                    e.code,
                    e.dimension,
                    e.count
                );
            }
        }
        out
    }
}

/// Row of the input image an event dimension lands in.
pub fn input_row_of(dims: &DimensionConfig, dimension: &str) -> Option<usize> {
    dims.row_of(dimension).and_then(|r| dims.input_row(r))
}

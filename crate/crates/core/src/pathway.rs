//! Clinical events, pathways and their 2D image encoding.
//!
//! A pathway is one patient's events ordered by time. Its image has one row
//! per dimension and one column per event; each occupied cell holds the
//! vocabulary index of the event's code and every other cell is 0.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Default image width.
pub const DEFAULT_WIDTH: usize = 400;
/// Number of dimensions (image rows).
pub const DIMENSIONS: usize = 6;
/// Default maximum label-sequence length, END included.
pub const DEFAULT_MAX_LABELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PathwayError {
    #[error("contract error: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("pathway of {patient_id} has {length} events, image width is {width}")]
    Length {
        patient_id: String,
        length: usize,
        width: usize,
    },
    #[error("code {system}:{code} is not in the vocabulary")]
    UnknownCode { system: String, code: String },
    #[error("dimension {0:?} is not configured")]
    UnknownDimension(String),
    #[error("vocabulary index {0} is not a condition class")]
    UnknownClass(u32),
    #[error("pathway {0} has no condition events")]
    Unlabeled(String),
    #[error("image is {got}, expected {expected}")]
    Shape { got: String, expected: String },
}

/// One clinical occurrence. `time` is days since the primary diagnosis, 0
/// when unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub patient_id: String,
    pub time: u32,
    pub code: String,
    pub system: String,
    pub dimension: String,
}

/// A single patient's events in non-decreasing time order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pathway {
    patient_id: String,
    events: Vec<Event>,
}

impl Pathway {
    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// An event-free pathway, rendered as an all-padding image.
    pub fn empty(patient_id: impl Into<String>) -> Self {
        Self {
            patient_id: patient_id.into(),
            events: Vec::new(),
        }
    }
}

/// Builds a pathway from one patient's events, stably sorted by time.
pub fn compose_pathway(mut events: Vec<Event>) -> Result<Pathway, PathwayError> {
    let patient_id = match events.first() {
        Some(e) => e.patient_id.clone(),
        None => {
            return Err(PathwayError::Contract(
                "pathway needs at least one event".into(),
            ))
        }
    };
    if let Some(other) = events.iter().find(|e| e.patient_id != patient_id) {
        return Err(PathwayError::Contract(alloc::format!(
            "events from patients {patient_id} and {} mixed in one pathway",
            other.patient_id
        )));
    }
    // slice::sort_by_key is stable
    events.sort_by_key(|e| e.time);
    Ok(Pathway { patient_id, events })
}

/// Groups events by patient (first-appearance order) and composes each group.
pub fn group_pathways(events: Vec<Event>) -> Vec<Pathway> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<Event>> = BTreeMap::new();
    for e in events {
        if !groups.contains_key(&e.patient_id) {
            order.push(e.patient_id.clone());
        }
        groups.entry(e.patient_id.clone()).or_default().push(e);
    }
    order
        .into_iter()
        .map(|id| compose_pathway(groups.remove(&id).unwrap()).expect("grouped by patient"))
        .collect()
}

/// Six named dimensions, one of which holds the condition labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDimensionConfig", into = "RawDimensionConfig")]
pub struct DimensionConfig {
    names: Vec<String>,
    condition: usize,
}

#[derive(Serialize, Deserialize)]
struct RawDimensionConfig {
    dimensions: Vec<String>,
    condition: String,
}

impl TryFrom<RawDimensionConfig> for DimensionConfig {
    type Error = PathwayError;

    fn try_from(raw: RawDimensionConfig) -> Result<Self, Self::Error> {
        let condition = raw
            .dimensions
            .iter()
            .position(|d| *d == raw.condition)
            .ok_or_else(|| {
                PathwayError::Config(alloc::format!(
                    "condition dimension {:?} is not one of the dimensions",
                    raw.condition
                ))
            })?;
        Self::new(raw.dimensions, condition)
    }
}

impl From<DimensionConfig> for RawDimensionConfig {
    fn from(d: DimensionConfig) -> Self {
        Self {
            condition: d.names[d.condition].clone(),
            dimensions: d.names,
        }
    }
}

impl Default for DimensionConfig {
    fn default() -> Self {
        let names = [
            "demographics",
            "conditions",
            "procedures",
            "medications",
            "observations",
            "encounters",
        ];
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            condition: 1,
        }
    }
}

impl DimensionConfig {
    pub fn new(names: Vec<String>, condition: usize) -> Result<Self, PathwayError> {
        if names.len() != DIMENSIONS {
            return Err(PathwayError::Config(alloc::format!(
                "expected {DIMENSIONS} dimensions, got {}",
                names.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || names[..i].contains(n) {
                return Err(PathwayError::Config(alloc::format!(
                    "dimension names must be non-empty and distinct ({n:?})"
                )));
            }
        }
        if condition >= names.len() {
            return Err(PathwayError::Config("condition row out of range".into()));
        }
        Ok(Self { names, condition })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn condition_row(&self) -> usize {
        self.condition
    }

    pub fn condition_name(&self) -> &str {
        &self.names[self.condition]
    }

    pub fn row_of(&self, dimension: &str) -> Option<usize> {
        self.names.iter().position(|n| n == dimension)
    }

    /// Image row of a row in the condition-free input.
    pub fn image_row(&self, input_row: usize) -> usize {
        if input_row >= self.condition {
            input_row + 1
        } else {
            input_row
        }
    }

    /// Input row of an image row, `None` for the condition row.
    pub fn input_row(&self, image_row: usize) -> Option<usize> {
        match image_row.cmp(&self.condition) {
            core::cmp::Ordering::Less => Some(image_row),
            core::cmp::Ordering::Equal => None,
            core::cmp::Ordering::Greater => Some(image_row - 1),
        }
    }

    /// Dimension name of an input row.
    pub fn input_dimension(&self, input_row: usize) -> &str {
        &self.names[self.image_row(input_row)]
    }
}

/// Code regrouping: `SYSTEM:code` or bare `code` keys mapped to group names.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RemapTable {
    qualified: BTreeMap<(String, String), String>,
    any_system: BTreeMap<String, String>,
}

impl RemapTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one mapping. `key` is `code` or `SYSTEM:code`.
    pub fn insert(&mut self, key: &str, group: &str) -> Result<(), PathwayError> {
        let bad = |why: &str| PathwayError::Config(alloc::format!("remap entry {key:?}: {why}"));
        if group.trim().is_empty() {
            return Err(bad("empty group"));
        }
        let target = match key.split_once(':') {
            Some((system, code)) => {
                if system.is_empty() || code.is_empty() || code.contains(':') {
                    return Err(bad("expected SYSTEM:code"));
                }
                self.qualified
                    .insert((system.to_string(), code.to_string()), group.to_string())
            }
            None if key.is_empty() => return Err(bad("empty code")),
            None => self.any_system.insert(key.to_string(), group.to_string()),
        };
        if target.is_some() {
            return Err(bad("duplicate key"));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.qualified.is_empty() && self.any_system.is_empty()
    }

    /// `(key, group)` pairs in the syntax accepted by [`RemapTable::insert`].
    pub fn entries(&self) -> Vec<(String, String)> {
        let qualified = self
            .qualified
            .iter()
            .map(|((s, c), g)| (alloc::format!("{s}:{c}"), g.clone()));
        let bare = self.any_system.iter().map(|(c, g)| (c.clone(), g.clone()));
        qualified.chain(bare).collect()
    }

    pub fn group_of(&self, system: &str, code: &str) -> Option<&str> {
        self.qualified
            .get(&(system.to_string(), code.to_string()))
            .or_else(|| self.any_system.get(code))
            .map(String::as_str)
    }
}

/// One vocabulary slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    /// Post-remap code (the group name for regrouped codes).
    pub code: String,
    pub system: String,
    pub dimension: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

/// Bijection between codes and indices `1..=N`; 0 is reserved for empty cells.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CodeVocabulary {
    entries: Vec<VocabEntry>,
    index: BTreeMap<(String, String), u32>,
    remap: RemapTable,
}

impl CodeVocabulary {
    pub fn new(remap: RemapTable) -> Self {
        Self {
            remap,
            ..Self::default()
        }
    }

    /// Rebuilds a vocabulary from entries listed in index order.
    pub fn from_entries(entries: Vec<VocabEntry>, remap: RemapTable) -> Result<Self, PathwayError> {
        let mut vocab = Self::new(remap);
        for e in entries {
            let key = (e.system.clone(), e.code.clone());
            if vocab.index.contains_key(&key) {
                return Err(PathwayError::Config(alloc::format!(
                    "duplicate vocabulary code {}:{}",
                    e.system,
                    e.code
                )));
            }
            vocab.entries.push(e);
            vocab.index.insert(key, vocab.entries.len() as u32);
        }
        Ok(vocab)
    }

    /// N, the number of real codes.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn remap(&self) -> &RemapTable {
        &self.remap
    }

    /// Entry for index `1..=N`.
    pub fn entry(&self, index: u32) -> Option<&VocabEntry> {
        (index as usize)
            .checked_sub(1)
            .and_then(|i| self.entries.get(i))
    }

    fn resolve<'a>(&'a self, system: &str, code: &'a str) -> (&'a str, bool) {
        match self.remap.group_of(system, code) {
            Some(g) => (g, true),
            None => (code, false),
        }
    }

    /// Index of a raw (pre-remap) code.
    pub fn lookup(&self, system: &str, code: &str) -> Option<u32> {
        let (key, _) = self.resolve(system, code);
        self.index
            .get(&(system.to_string(), key.to_string()))
            .copied()
    }

    pub fn index_of(&self, event: &Event) -> Option<u32> {
        self.lookup(&event.system, &event.code)
    }

    /// Registers a raw code and returns its index; existing codes keep theirs.
    pub fn insert(&mut self, system: &str, code: &str, dimension: &str) -> u32 {
        let (key, remapped) = self.resolve(system, code);
        let key = key.to_string();
        if let Some(&i) = self.index.get(&(system.to_string(), key.clone())) {
            return i;
        }
        self.entries.push(VocabEntry {
            code: key.clone(),
            system: system.to_string(),
            dimension: dimension.to_string(),
            group: remapped.then(|| key.clone()),
        });
        let i = self.entries.len() as u32;
        self.index.insert((system.to_string(), key), i);
        i
    }
}

/// Assigns indices to distinct post-remap codes in first-appearance order.
pub fn build_vocabulary<'a>(
    events: impl IntoIterator<Item = &'a Event>,
    remap: Option<&RemapTable>,
) -> CodeVocabulary {
    let mut vocab = CodeVocabulary::new(remap.cloned().unwrap_or_default());
    for e in events {
        vocab.insert(&e.system, &e.code, &e.dimension);
    }
    vocab
}

/// A `height × width` grid of vocabulary indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathwayImage {
    pub patient_id: String,
    height: usize,
    width: usize,
    cells: Vec<u32>,
}

impl PathwayImage {
    pub fn new(
        patient_id: impl Into<String>,
        height: usize,
        width: usize,
        cells: Vec<u32>,
    ) -> Result<Self, PathwayError> {
        if cells.len() != height * width {
            return Err(PathwayError::Shape {
                got: alloc::format!("{} cells", cells.len()),
                expected: alloc::format!("{height}×{width}"),
            });
        }
        Ok(Self {
            patient_id: patient_id.into(),
            height,
            width,
            cells,
        })
    }

    pub fn blank(patient_id: impl Into<String>, height: usize, width: usize) -> Self {
        Self {
            patient_id: patient_id.into(),
            height,
            width,
            cells: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u32) {
        self.cells[row * self.width + col] = value;
    }

    pub fn row(&self, row: usize) -> &[u32] {
        &self.cells[row * self.width..(row + 1) * self.width]
    }

    /// Columns holding at least one non-zero cell.
    pub fn occupied_columns(&self) -> usize {
        (0..self.width)
            .filter(|&c| (0..self.height).any(|r| self.get(r, c) != 0))
            .count()
    }

    /// One past the last occupied column; columns from here on are padding.
    pub fn content_width(&self) -> usize {
        (0..self.width)
            .rev()
            .find(|&c| (0..self.height).any(|r| self.get(r, c) != 0))
            .map_or(0, |c| c + 1)
    }

    pub fn max_index(&self) -> u32 {
        self.cells.iter().copied().max().unwrap_or(0)
    }
}

/// Places event `i` at column `i`, in its dimension's row.
pub fn render_image(
    pathway: &Pathway,
    vocab: &CodeVocabulary,
    dims: &DimensionConfig,
    width: usize,
) -> Result<PathwayImage, PathwayError> {
    if pathway.len() > width {
        return Err(PathwayError::Length {
            patient_id: pathway.patient_id.clone(),
            length: pathway.len(),
            width,
        });
    }
    let mut image = PathwayImage::blank(pathway.patient_id.clone(), DIMENSIONS, width);
    for (col, e) in pathway.events.iter().enumerate() {
        let row = dims
            .row_of(&e.dimension)
            .ok_or_else(|| PathwayError::UnknownDimension(e.dimension.clone()))?;
        let idx = vocab.index_of(e).ok_or_else(|| PathwayError::UnknownCode {
            system: e.system.clone(),
            code: e.code.clone(),
        })?;
        image.set(row, col, idx);
    }
    Ok(image)
}

/// Condition classes: every vocabulary code in the condition dimension, in
/// index order, followed by END.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    vocab_indices: Vec<u32>,
    names: Vec<String>,
}

pub const END_NAME: &str = "END";

impl ClassMap {
    pub fn from_vocabulary(vocab: &CodeVocabulary, dims: &DimensionConfig) -> Self {
        let (vocab_indices, names) = vocab
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.dimension == dims.condition_name())
            .map(|(i, e)| (i as u32 + 1, e.code.clone()))
            .unzip();
        Self {
            vocab_indices,
            names,
        }
    }

    /// K, condition classes plus END.
    pub fn num_classes(&self) -> usize {
        self.vocab_indices.len() + 1
    }

    pub fn end(&self) -> usize {
        self.vocab_indices.len()
    }

    pub fn class_of(&self, vocab_index: u32) -> Option<usize> {
        self.vocab_indices.iter().position(|&v| v == vocab_index)
    }

    pub fn vocab_index(&self, class: usize) -> Option<u32> {
        self.vocab_indices.get(class).copied()
    }

    pub fn name(&self, class: usize) -> &str {
        if class == self.end() {
            END_NAME
        } else {
            self.names.get(class).map_or("?", String::as_str)
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut all = self.names.clone();
        all.push(END_NAME.to_string());
        all
    }
}

/// Condition-free model input: `(h−1) × w` grid of vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputImage {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<u32>,
}

impl InputImage {
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.cells[row * self.width + col]
    }
}

/// A training or evaluation example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledInput {
    pub patient_id: String,
    pub input: InputImage,
    /// Class indices, at most `max_len` long, END-terminated when room remains.
    pub labels: Vec<usize>,
}

/// Removes the condition row from `image` (full `6×w` images only).
pub fn strip_condition_row(
    image: &PathwayImage,
    dims: &DimensionConfig,
) -> Result<InputImage, PathwayError> {
    if image.height() != DIMENSIONS {
        return Err(PathwayError::Shape {
            got: alloc::format!("{}×{}", image.height(), image.width()),
            expected: alloc::format!("{DIMENSIONS}×w"),
        });
    }
    let mut cells = Vec::with_capacity((DIMENSIONS - 1) * image.width());
    for r in (0..DIMENSIONS).filter(|&r| r != dims.condition_row()) {
        cells.extend_from_slice(image.row(r));
    }
    Ok(InputImage {
        height: DIMENSIONS - 1,
        width: image.width(),
        cells,
    })
}

/// Splits an image into the model input and its label sequence: the
/// condition row's non-zero entries in column order, first occurrences only,
/// truncated to `max_len`, then END if there is room.
pub fn extract_labels(
    image: &PathwayImage,
    dims: &DimensionConfig,
    classes: &ClassMap,
    max_len: usize,
) -> Result<LabeledInput, PathwayError> {
    if max_len == 0 {
        return Err(PathwayError::Config("label length must be positive".into()));
    }
    let input = strip_condition_row(image, dims)?;
    let mut labels: Vec<usize> = Vec::new();
    for &v in image.row(dims.condition_row()) {
        if v == 0 {
            continue;
        }
        let class = classes.class_of(v).ok_or(PathwayError::UnknownClass(v))?;
        if !labels.contains(&class) {
            labels.push(class);
        }
    }
    if labels.is_empty() {
        return Err(PathwayError::Unlabeled(image.patient_id.clone()));
    }
    labels.truncate(max_len);
    if labels.len() < max_len {
        labels.push(classes.end());
    }
    Ok(LabeledInput {
        patient_id: image.patient_id.clone(),
        input,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(p: &str, t: u32, code: &str, dim: &str) -> Event {
        Event {
            patient_id: p.into(),
            time: t,
            code: code.into(),
            system: "ICD9".into(),
            dimension: dim.into(),
        }
    }

    #[test]
    fn vocabulary_first_appearance() {
        let events: Vec<Event> = ["A", "B", "A", "C"]
            .iter()
            .map(|c| ev("p", 0, c, "procedures"))
            .collect();
        let v = build_vocabulary(&events, None);
        assert_eq!(v.len(), 3);
        assert_eq!(v.lookup("ICD9", "A"), Some(1));
        assert_eq!(v.lookup("ICD9", "B"), Some(2));
        assert_eq!(v.lookup("ICD9", "C"), Some(3));
        assert_eq!(v.lookup("LOINC", "A"), None);
        assert!(build_vocabulary(&[], None).is_empty());
    }

    #[test]
    fn vocabulary_remap_groups_codes() {
        let mut remap = RemapTable::new();
        remap.insert("A", "G").unwrap();
        remap.insert("ICD9:B", "G").unwrap();
        let events: Vec<Event> = ["A", "B", "C"]
            .iter()
            .map(|c| ev("p", 0, c, "conditions"))
            .collect();
        let v = build_vocabulary(&events, Some(&remap));
        assert_eq!(v.len(), 2);
        assert_eq!(v.lookup("ICD9", "B"), Some(1));
        assert_eq!(v.entry(1).unwrap().code, "G");
        assert_eq!(v.entry(1).unwrap().group.as_deref(), Some("G"));
        assert_eq!(v.entry(2).unwrap().code, "C");
        assert_eq!(v.entry(0), None);
    }

    #[test]
    fn remap_rejects_bad_keys() {
        let mut r = RemapTable::new();
        assert!(r.insert(":x", "G").is_err());
        assert!(r.insert("a:b:c", "G").is_err());
        assert!(r.insert("x", " ").is_err());
        r.insert("x", "G").unwrap();
        assert!(r.insert("x", "H").is_err());
    }

    #[test]
    fn compose_sorts_stably() {
        let p = compose_pathway(vec![
            ev("p", 2, "A", "x"),
            ev("p", 0, "B", "x"),
            ev("p", 1, "C", "x"),
        ])
        .unwrap();
        let t: Vec<u32> = p.events().iter().map(|e| e.time).collect();
        assert_eq!(t, vec![0, 1, 2]);

        let p = compose_pathway(vec![
            ev("p", 0, "B", "x"),
            ev("p", 0, "A", "x"),
            ev("p", 0, "C", "x"),
        ])
        .unwrap();
        let codes: Vec<&str> = p.events().iter().map(|e| e.code.as_str()).collect();
        assert_eq!(codes, vec!["B", "A", "C"]);

        assert_eq!(
            compose_pathway(vec![ev("p", 4, "A", "x")]).unwrap().len(),
            1
        );
        assert!(matches!(
            compose_pathway(vec![ev("p", 0, "A", "x"), ev("q", 0, "A", "x")]),
            Err(PathwayError::Contract(_))
        ));
    }

    #[test]
    fn render_places_events_by_column() {
        let dims = DimensionConfig::default();
        let p = compose_pathway(vec![
            ev("p", 0, "A", "procedures"),
            ev("p", 1, "B", "observations"),
        ])
        .unwrap();
        let v = build_vocabulary(p.events(), None);
        let img = render_image(&p, &v, &dims, 400).unwrap();
        assert_eq!((img.height(), img.width()), (6, 400));
        assert_eq!(img.get(2, 0), 1);
        assert_eq!(img.get(4, 1), 2);
        assert_eq!(img.cells().iter().filter(|&&c| c != 0).count(), 2);

        let empty = render_image(&Pathway::empty("e"), &v, &dims, 400).unwrap();
        assert!(empty.cells().iter().all(|&c| c == 0));
    }

    #[test]
    fn render_rejects_long_pathways_and_unknown_codes() {
        let dims = DimensionConfig::default();
        let events: Vec<Event> = (0..401).map(|i| ev("p", i, "A", "procedures")).collect();
        let p = compose_pathway(events).unwrap();
        let v = build_vocabulary(p.events(), None);
        assert!(matches!(
            render_image(&p, &v, &dims, 400),
            Err(PathwayError::Length { length: 401, .. })
        ));

        let p = compose_pathway(vec![ev("p", 0, "Z", "procedures")]).unwrap();
        assert!(matches!(
            render_image(&p, &v, &dims, 400),
            Err(PathwayError::UnknownCode { .. })
        ));
        let p = compose_pathway(vec![ev("p", 0, "A", "nowhere")]).unwrap();
        assert!(matches!(
            render_image(&p, &v, &dims, 400),
            Err(PathwayError::UnknownDimension(_))
        ));
    }

    fn labelled_setup() -> (DimensionConfig, CodeVocabulary, ClassMap) {
        let dims = DimensionConfig::default();
        let mut v = CodeVocabulary::default();
        v.insert("ICD9", "c1", "conditions");
        v.insert("ICD9", "x", "procedures");
        v.insert("ICD9", "c2", "conditions");
        let classes = ClassMap::from_vocabulary(&v, &dims);
        (dims, v, classes)
    }

    #[test]
    fn labels_from_condition_row() {
        let (dims, _, classes) = labelled_setup();
        assert_eq!(classes.num_classes(), 3);
        assert_eq!(classes.class_of(3), Some(1));
        let mut img = PathwayImage::blank("p", 6, 400);
        img.set(1, 0, 1);
        img.set(2, 1, 2);
        let li = extract_labels(&img, &dims, &classes, 2).unwrap();
        assert_eq!((li.input.height, li.input.width), (5, 400));
        assert_eq!(li.labels, vec![0, classes.end()]);
        // procedures row becomes input row 1
        assert_eq!(li.input.get(1, 1), 2);

        img.set(1, 5, 3);
        img.set(1, 7, 1);
        let li = extract_labels(&img, &dims, &classes, 2).unwrap();
        assert_eq!(li.labels, vec![0, 1]);
        let li = extract_labels(&img, &dims, &classes, 3).unwrap();
        assert_eq!(li.labels, vec![0, 1, classes.end()]);
    }

    #[test]
    fn unlabeled_and_unknown_condition() {
        let (dims, _, classes) = labelled_setup();
        let img = PathwayImage::blank("p", 6, 10);
        assert!(matches!(
            extract_labels(&img, &dims, &classes, 2),
            Err(PathwayError::Unlabeled(_))
        ));
        let mut img = PathwayImage::blank("p", 6, 10);
        img.set(1, 0, 2);
        assert_eq!(
            extract_labels(&img, &dims, &classes, 2),
            Err(PathwayError::UnknownClass(2))
        );
    }

    #[test]
    fn dimension_config_validation() {
        let names = |n: usize| (0..n).map(|i| alloc::format!("d{i}")).collect::<Vec<_>>();
        assert!(DimensionConfig::new(names(5), 0).is_err());
        assert!(DimensionConfig::new(names(6), 6).is_err());
        let mut dup = names(6);
        dup[3] = "d0".into();
        assert!(DimensionConfig::new(dup, 0).is_err());
        let d = DimensionConfig::new(names(6), 2).unwrap();
        assert_eq!(d.input_row(2), None);
        assert_eq!(d.input_row(3), Some(2));
        assert_eq!(d.image_row(2), 3);
        assert_eq!(d.input_dimension(1), "d1");
    }

    #[test]
    fn group_pathways_keeps_patient_order() {
        let events = vec![
            ev("b", 3, "A", "x"),
            ev("a", 1, "B", "x"),
            ev("b", 1, "C", "x"),
        ];
        let ps = group_pathways(events);
        assert_eq!(ps[0].patient_id(), "b");
        assert_eq!(ps[0].events()[0].code, "C");
        assert_eq!(ps[1].patient_id(), "a");
    }
}

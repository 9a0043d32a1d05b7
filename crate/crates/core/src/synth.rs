//! Deterministic synthetic cohorts with planted condition signals.
//!
//! Every pathway starts with a main condition, optionally followed by a
//! second one. Each label class plants a short contiguous run of its signal
//! codes in the observation/medication rows; everything else is background
//! noise drawn from a shared pool. The manifest records where every planted
//! cell landed so attention can be scored against it.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pathway::{
    compose_pathway, extract_labels, render_image, ClassMap, CodeVocabulary, DimensionConfig,
    Event, LabeledInput, Pathway, PathwayError, PathwayImage, RemapTable, DEFAULT_MAX_LABELS,
    DEFAULT_WIDTH, DIMENSIONS,
};

pub const SYSTEM: &str = "SYN";
const SIGNAL_DIMENSIONS: [&str; 2] = ["observations", "medications"];
const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("cohort spec error: {0}")]
    Spec(String),
    #[error("sparsity is undefined: no event cells")]
    NoEvents,
    #[error(transparent)]
    Pathway(#[from] PathwayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Relative sampling weight (main classes only).
    #[serde(default = "unit_weight")]
    pub weight: f64,
    pub signal_codes: Vec<String>,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub main_classes: Vec<ClassSpec>,
    #[serde(default)]
    pub second_classes: Vec<ClassSpec>,
    /// Chance that a pathway carries a second condition.
    #[serde(default)]
    pub second_probability: f64,
    /// Chance that a label class plants its signal run.
    #[serde(default = "unit_weight")]
    pub planting_probability: f64,
    /// Signal runs planted per label when planting happens.
    #[serde(default = "default_runs")]
    pub signal_runs: usize,
    pub background_pool: usize,
    /// Target empty:event cell ratio outside the condition row.
    #[serde(default = "default_ratio")]
    pub sparsity_ratio: f64,
    #[serde(default = "default_width")]
    pub width: usize,
    /// Per-pathway relative length jitter around the sparsity-implied length.
    #[serde(default = "default_jitter")]
    pub length_jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_runs() -> usize {
    1
}
fn default_ratio() -> f64 {
    14.0
}
fn default_width() -> usize {
    DEFAULT_WIDTH
}
fn default_jitter() -> f64 {
    0.05
}

fn class(name: &str, weight: f64, codes: usize) -> ClassSpec {
    ClassSpec {
        name: name.into(),
        weight,
        signal_codes: (0..codes).map(|i| format!("{name}_S{i}")).collect(),
    }
}

impl CohortSpec {
    /// Three equally weighted main conditions, two second conditions each
    /// with four signal codes, full planting.
    pub fn planted(n_patients: usize, seed: u64) -> Self {
        Self {
            n_patients,
            main_classes: ["MAIN_A", "MAIN_B", "MAIN_C"]
                .iter()
                .map(|n| class(n, 1.0, 4))
                .collect(),
            second_classes: ["SECOND_X", "SECOND_Y"]
                .iter()
                .map(|n| class(n, 1.0, 4))
                .collect(),
            second_probability: 0.5,
            planting_probability: 1.0,
            signal_runs: default_runs(),
            background_pool: 300,
            sparsity_ratio: default_ratio(),
            width: DEFAULT_WIDTH,
            length_jitter: default_jitter(),
            seed,
        }
    }

    fn all_classes(&self) -> impl Iterator<Item = &ClassSpec> {
        self.main_classes.iter().chain(&self.second_classes)
    }

    fn background_code(i: usize) -> String {
        format!("BG{i:05}")
    }

    /// Number of non-condition events implied by the target ratio:
    /// `(5w − n)/n = r`.
    pub fn target_events(&self) -> f64 {
        ((DIMENSIONS - 1) * self.width) as f64 / (self.sparsity_ratio + 1.0)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.main_classes.is_empty() {
            return bad("need at least one main class".into());
        }
        for (what, p) in [
            ("planting_probability", self.planting_probability),
            ("second_probability", self.second_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{what} must lie in [0, 1], got {p}"));
            }
        }
        if self.second_probability > 0.0 && self.second_classes.is_empty() {
            return bad("second_probability > 0 needs second classes".into());
        }
        if !(self.sparsity_ratio > 0.0) || !self.sparsity_ratio.is_finite() {
            return bad("sparsity_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.length_jitter) {
            return bad("length_jitter must lie in [0, 1)".into());
        }
        if self.background_pool == 0 {
            return bad("background pool must not be empty".into());
        }
        if self
            .main_classes
            .iter()
            .any(|c| !(c.weight > 0.0) || !c.weight.is_finite())
        {
            return bad("main class weights must be positive".into());
        }
        let mut names = BTreeSet::new();
        let mut signals = BTreeSet::new();
        for c in self.all_classes() {
            if !names.insert(c.name.as_str()) {
                return bad(format!("duplicate class {}", c.name));
            }
            if c.signal_codes.is_empty() {
                return bad(format!("class {} has no signal codes", c.name));
            }
            for code in &c.signal_codes {
                if !signals.insert(code.as_str()) {
                    return bad(format!("signal code {code} is used twice"));
                }
            }
        }
        for code in &signals {
            if names.contains(code) {
                return bad(format!("signal code {code} collides with a class name"));
            }
        }
        for i in 0..self.background_pool {
            let code = Self::background_code(i);
            if signals.contains(code.as_str()) || names.contains(code.as_str()) {
                return bad(format!("code {code} is both background and signal/class"));
            }
        }
        // a run of up to 3 columns per label plus the conditions themselves
        let needed = DEFAULT_MAX_LABELS * 3 + 1;
        let shortest = libm::floor(self.target_events() * (1.0 - self.length_jitter)) as usize;
        if shortest < needed || shortest + DEFAULT_MAX_LABELS > self.width {
            return bad(format!(
                "width {} and ratio {} leave {shortest} event columns; need {needed}..={}",
                self.width,
                self.sparsity_ratio,
                self.width - DEFAULT_MAX_LABELS
            ));
        }
        Ok(())
    }
}

/// One planted cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    /// Row in the full six-row image.
    pub row: usize,
    pub column: usize,
    pub code: String,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub dims: DimensionConfig,
    pub vocab: CodeVocabulary,
    pub classes: ClassMap,
    pub pathways: Vec<Pathway>,
    pub images: Vec<PathwayImage>,
    pub examples: Vec<LabeledInput>,
    pub manifest: Vec<ManifestEntry>,
}

impl Cohort {
    /// Manifest entries of one patient.
    pub fn planted_for<'a>(
        &'a self,
        patient_id: &'a str,
    ) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.manifest
            .iter()
            .filter(move |m| m.patient_id == patient_id)
    }

    /// Vocabulary indices of every signal code.
    pub fn signal_indices(&self) -> BTreeSet<u32> {
        self.manifest
            .iter()
            .filter_map(|m| self.vocab.lookup(SYSTEM, &m.code))
            .collect()
    }
}

fn build_vocabulary(spec: &CohortSpec, dims: &DimensionConfig) -> CodeVocabulary {
    let mut vocab = CodeVocabulary::new(RemapTable::new());
    for c in spec.all_classes() {
        vocab.insert(SYSTEM, &c.name, dims.condition_name());
    }
    for c in spec.all_classes() {
        for (i, code) in c.signal_codes.iter().enumerate() {
            vocab.insert(SYSTEM, code, SIGNAL_DIMENSIONS[i % 2]);
        }
    }
    for i in 0..spec.background_pool {
        vocab.insert(
            SYSTEM,
            &CohortSpec::background_code(i),
            &background_dimension(dims, i),
        );
    }
    vocab
}

/// Background codes cycle through the five non-condition rows.
fn background_dimension(dims: &DimensionConfig, i: usize) -> String {
    dims.input_dimension(i % (DIMENSIONS - 1)).into()
}

fn signal_dimension(spec: &CohortSpec, code: &str) -> &'static str {
    let i = spec
        .all_classes()
        .find_map(|c| c.signal_codes.iter().position(|s| s == code))
        .unwrap_or(0);
    SIGNAL_DIMENSIONS[i % 2]
}

fn pick_weighted(rng: &mut ChaCha8Rng, classes: &[ClassSpec]) -> usize {
    let total: f64 = classes.iter().map(|c| c.weight).sum();
    let mut x = rng.random::<f64>() * total;
    for (i, c) in classes.iter().enumerate() {
        if x < c.weight {
            return i;
        }
        x -= c.weight;
    }
    classes.len() - 1
}

/// Column plan for one pathway, before it is turned into events.
enum Slot<'a> {
    Condition(&'a ClassSpec),
    Signal(&'a ClassSpec, &'a str),
    Background(usize),
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort, SynthError> {
    spec.validate()?;
    let dims = DimensionConfig::default();
    let vocab = build_vocabulary(spec, &dims);
    let classes = ClassMap::from_vocabulary(&vocab, &dims);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let target = spec.target_events();

    let mut pathways = Vec::with_capacity(spec.n_patients);
    let mut images = Vec::with_capacity(spec.n_patients);
    let mut examples = Vec::with_capacity(spec.n_patients);
    let mut manifest = Vec::new();
    let digits = format!("{}", spec.n_patients.saturating_sub(1)).len();

    for p in 0..spec.n_patients {
        let patient_id = format!("P{p:0digits$}");
        let main = &spec.main_classes[pick_weighted(&mut rng, &spec.main_classes)];
        let second = (rng.random::<f64>() < spec.second_probability)
            .then(|| &spec.second_classes[rng.random_range(0..spec.second_classes.len())]);
        let labels: Vec<&ClassSpec> = core::iter::once(main).chain(second).collect();

        let jitter = 1.0 + spec.length_jitter * (2.0 * rng.random::<f64>() - 1.0);
        let n_events = crate::math::round(target * jitter) as usize;
        let length = (n_events + labels.len()).min(spec.width);
        let n_events = length - labels.len();

        let mut slots: Vec<Slot> = Vec::with_capacity(length);
        slots.push(Slot::Condition(main));
        for _ in 0..n_events {
            slots.push(Slot::Background(rng.random_range(0..spec.background_pool)));
        }
        if let Some(second) = second {
            let at = rng.random_range(1..=slots.len());
            slots.insert(at, Slot::Condition(second));
        }

        let mut taken = alloc::vec![false; slots.len()];
        for (i, s) in slots.iter().enumerate() {
            taken[i] = matches!(s, Slot::Condition(_));
        }
        for class in &labels {
            if rng.random::<f64>() >= spec.planting_probability {
                continue;
            }
            for _ in 0..spec.signal_runs {
                let run = rng.random_range(1..=3usize);
                let mut placed = false;
                for _ in 0..PLACEMENT_ATTEMPTS {
                    let start = rng.random_range(0..=slots.len() - run);
                    if taken[start..start + run].iter().any(|&t| t) {
                        continue;
                    }
                    for col in start..start + run {
                        let code =
                            &class.signal_codes[rng.random_range(0..class.signal_codes.len())];
                        slots[col] = Slot::Signal(class, code);
                        taken[col] = true;
                    }
                    placed = true;
                    break;
                }
                if !placed {
                    return Err(SynthError::Spec(format!(
                        "could not place a signal run in pathway {patient_id} of length {length}"
                    )));
                }
            }
        }

        let events: Vec<Event> = slots
            .iter()
            .enumerate()
            .map(|(col, slot)| {
                let (code, dimension) = match slot {
                    Slot::Condition(c) => (c.name.clone(), String::from(dims.condition_name())),
                    Slot::Signal(_, code) => (
                        String::from(*code),
                        String::from(signal_dimension(spec, code)),
                    ),
                    Slot::Background(i) => (
                        CohortSpec::background_code(*i),
                        background_dimension(&dims, *i),
                    ),
                };
                Event {
                    patient_id: patient_id.clone(),
                    time: col as u32,
                    code,
                    system: SYSTEM.into(),
                    dimension,
                }
            })
            .collect();
        for (col, slot) in slots.iter().enumerate() {
            if let Slot::Signal(class, code) = slot {
                manifest.push(ManifestEntry {
                    patient_id: patient_id.clone(),
                    row: dims
                        .row_of(signal_dimension(spec, code))
                        .expect("signal dimension"),
                    column: col,
                    code: String::from(*code),
                    class: class.name.clone(),
                });
            }
        }

        let pathway = compose_pathway(events)?;
        let image = render_image(&pathway, &vocab, &dims, spec.width)?;
        examples.push(extract_labels(&image, &dims, &classes, DEFAULT_MAX_LABELS)?);
        images.push(image);
        pathways.push(pathway);
    }

    Ok(Cohort {
        dims,
        vocab,
        classes,
        pathways,
        images,
        examples,
        manifest,
    })
}

/// Empty-to-event cell ratio over all images, condition row excluded.
pub fn sparsity_report(images: &[PathwayImage], dims: &DimensionConfig) -> Result<f64, SynthError> {
    if images.is_empty() {
        return Err(SynthError::Spec("sparsity needs at least one image".into()));
    }
    let (mut empty, mut events) = (0usize, 0usize);
    for image in images {
        for r in (0..image.height()).filter(|&r| r != dims.condition_row()) {
            let filled = image.row(r).iter().filter(|&&v| v != 0).count();
            events += filled;
            empty += image.width() - filled;
        }
    }
    if events == 0 {
        return Err(SynthError::NoEvents);
    }
    Ok(empty as f64 / events as f64)
}

//! On-disk dataset layout shared by `compose`, `synth`, `train` and `eval`:
//!
//! ```text
//! DIR/images/00000.pwim …   one PWIM image per pathway
//! DIR/index.json            [{file, patient_id}]
//! DIR/vocab.json            {"1": {code, system, dimension, group}, …}
//! DIR/dims.json             {dimensions: [...], condition: "..."}
//! DIR/remap.json            optional {"code" | "SYSTEM:code": group}
//! DIR/manifest.json         planted cells (synthetic cohorts only)
//! DIR/row_errors.json       rejected CSV rows / pathways (compose only)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use spotlight_core::pathway::{
    extract_labels, ClassMap, CodeVocabulary, DimensionConfig, LabeledInput, PathwayImage,
    RemapTable, VocabEntry,
};

use crate::error::{Error, Result};
use crate::pwim;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_remap(path: &Path) -> Result<RemapTable> {
    let raw: BTreeMap<String, String> = read_json(path)?;
    let mut table = RemapTable::new();
    for (key, group) in raw {
        table.insert(&key, &group)?;
    }
    Ok(table)
}

pub fn remap_to_json(table: &RemapTable) -> BTreeMap<String, String> {
    table.entries().into_iter().collect()
}

pub fn vocab_to_json(vocab: &CodeVocabulary) -> BTreeMap<u32, VocabEntry> {
    vocab
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (i as u32 + 1, e.clone()))
        .collect()
}

pub fn vocab_from_json(
    raw: BTreeMap<u32, VocabEntry>,
    remap: RemapTable,
) -> Result<CodeVocabulary> {
    for (expected, &index) in (1u32..).zip(raw.keys()) {
        if index != expected {
            return Err(Error::Format(format!(
                "vocabulary indices must be 1..N without gaps, found {index}"
            )));
        }
    }
    Ok(CodeVocabulary::from_entries(
        raw.into_values().collect(),
        remap,
    )?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub patient_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: DimensionConfig,
    pub vocab: CodeVocabulary,
    pub images: Vec<PathwayImage>,
}

/// A pathway that could not become a training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub patient_id: String,
    pub reason: String,
}

impl Dataset {
    pub fn classes(&self) -> ClassMap {
        ClassMap::from_vocabulary(&self.vocab, &self.dims)
    }

    pub fn width(&self) -> Option<usize> {
        self.images.first().map(PathwayImage::width)
    }

    /// Labeled examples; unlabeled pathways are skipped and reported.
    pub fn examples(&self, max_len: usize) -> Result<(Vec<LabeledInput>, Vec<Skipped>)> {
        let classes = self.classes();
        let mut examples = Vec::with_capacity(self.images.len());
        let mut skipped = Vec::new();
        for image in &self.images {
            match extract_labels(image, &self.dims, &classes, max_len) {
                Ok(ex) => examples.push(ex),
                Err(e @ spotlight_core::pathway::PathwayError::Unlabeled(_)) => {
                    skipped.push(Skipped {
                        patient_id: image.patient_id.clone(),
                        reason: e.to_string(),
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok((examples, skipped))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        let digits = self.images.len().saturating_sub(1).to_string().len().max(5);
        let mut index = Vec::with_capacity(self.images.len());
        for (i, image) in self.images.iter().enumerate() {
            let file = format!("images/{i:0digits$}.pwim");
            pwim::write(&dir.join(&file), image)?;
            index.push(IndexEntry {
                file,
                patient_id: image.patient_id.clone(),
            });
        }
        write_json(&dir.join("index.json"), &index)?;
        write_json(&dir.join("vocab.json"), &vocab_to_json(&self.vocab))?;
        write_json(&dir.join("dims.json"), &self.dims)?;
        if !self.vocab.remap().is_empty() {
            write_json(&dir.join("remap.json"), &remap_to_json(self.vocab.remap()))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let dims: DimensionConfig = read_json(&dir.join("dims.json"))?;
        let remap_path = dir.join("remap.json");
        let remap = if remap_path.exists() {
            read_remap(&remap_path)?
        } else {
            RemapTable::new()
        };
        let vocab = vocab_from_json(read_json(&dir.join("vocab.json"))?, remap)?;
        let index: Vec<IndexEntry> = read_json(&dir.join("index.json"))?;
        let mut images = Vec::with_capacity(index.len());
        for entry in index {
            let path: PathBuf = dir.join(&entry.file);
            let mut image = pwim::read(&path)?;
            image.patient_id = entry.patient_id;
            if let Some(first) = images
                .first()
                .map(|i: &PathwayImage| (i.height(), i.width()))
            {
                if first != (image.height(), image.width()) {
                    return Err(Error::Dimension(format!(
                        "{} is {}×{}, earlier images are {}×{}",
                        path.display(),
                        image.height(),
                        image.width(),
                        first.0,
                        first.1
                    )));
                }
            }
            images.push(image);
        }
        Ok(Self {
            dims,
            vocab,
            images,
        })
    }
}

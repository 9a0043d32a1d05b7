//! Event CSV ingestion with configurable column names.

use std::io::Read;

use serde::{Deserialize, Serialize};
use spotlight_core::pathway::{DimensionConfig, Event};

use crate::error::{Error, Result};

/// Names of the CSV columns holding each event field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub patient_id: String,
    pub time: String,
    pub code: String,
    pub system: String,
    pub dimension: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            patient_id: "patient_id".into(),
            time: "time".into(),
            code: "code".into(),
            system: "system".into(),
            dimension: "dimension".into(),
        }
    }
}

/// A rejected row; `line` is 1-based and counts the header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ingested {
    /// Grouped by patient (first-appearance order), stably sorted by time.
    pub events: Vec<Event>,
    pub row_errors: Vec<RowError>,
}

/// Parses a time cell; blank means unknown and maps to 0.
fn parse_time(raw: &str) -> std::result::Result<u32, String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(0);
    }
    raw.parse::<u32>()
        .map_err(|_| format!("unparseable time {raw:?} (expected whole days ≥ 0)"))
}

pub fn ingest_events<R: Read>(
    source: R,
    columns: &ColumnMap,
    dims: &DimensionConfig,
) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(source);
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => {
            return Err(Error::Format(e.to_string()))
        }
        Err(e) => return Err(Error::Format(format!("event CSV header: {e}"))),
    };
    if headers.is_empty() {
        return Ok(Ingested::default());
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Config(format!("event CSV has no column {name:?}")))
    };
    let idx = [
        find(&columns.patient_id)?,
        find(&columns.time)?,
        find(&columns.code)?,
        find(&columns.system)?,
        find(&columns.dimension)?,
    ];

    let mut out = Ingested::default();
    let mut patients: Vec<String> = Vec::new();
    let mut by_patient: Vec<Vec<Event>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(format!("event CSV: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).map(str::trim);
        let fields: Option<Vec<&str>> = idx.iter().map(|&i| field(i)).collect();
        let Some([patient, time, code, system, dimension]) =
            fields.as_deref().map(|f| [f[0], f[1], f[2], f[3], f[4]])
        else {
            out.row_errors.push(RowError {
                line,
                message: format!(
                    "row has {} fields, header has {}",
                    record.len(),
                    headers.len()
                ),
            });
            continue;
        };
        let time = match parse_time(time) {
            Ok(t) => t,
            Err(message) => {
                out.row_errors.push(RowError { line, message });
                continue;
            }
        };
        if patient.is_empty() || code.is_empty() {
            out.row_errors.push(RowError {
                line,
                message: "empty patient id or code".into(),
            });
            continue;
        }
        if dims.row_of(dimension).is_none() {
            out.row_errors.push(RowError {
                line,
                message: format!("dimension {dimension:?} is not configured"),
            });
            continue;
        }
        let slot = match patients.iter().position(|p| p == patient) {
            Some(i) => i,
            None => {
                patients.push(patient.to_string());
                by_patient.push(Vec::new());
                by_patient.len() - 1
            }
        };
        by_patient[slot].push(Event {
            patient_id: patient.to_string(),
            time,
            code: code.to_string(),
            system: system.to_string(),
            dimension: dimension.to_string(),
        });
    }
    for mut group in by_patient {
        group.sort_by_key(|e| e.time);
        out.events.extend(group);
    }
    Ok(out)
}

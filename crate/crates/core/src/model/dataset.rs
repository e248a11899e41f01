//! Canonical dataset and detections files (JSON, UTF-8) and their validation.
//!
//! Dataset file:
//! ```json
//! { "dataset": "name", "classes": ["valve", "pump"],
//!   "diagrams": [ { "id": "d1", "image": "images/d1.png", "width": 1024, "height": 768,
//!     "symbols": [ { "id": "s1", "class": "valve", "bbox": [10, 20, 32, 32], "tag": "WX-98701" } ] } ] }
//! ```
//!
//! Detections file: same envelope, with a `detections` list per diagram
//! holding `{ "id", "class", "bbox", "score", "provenance" }` records.

use super::{Dataset, DetectionSet};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

/// Errors raised while loading or writing canonical files.
#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("dataset validation failed:\n{0}")]
    Validation(ValidationReport),
}

/// A single invariant violation, identifying the diagram and, when
/// applicable, the symbol or detection it concerns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub diagram_id: String,
    pub symbol_id: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.symbol_id {
            Some(sid) => write!(f, "diagram '{}', symbol '{}': {}", self.diagram_id, sid, self.message),
            None => write!(f, "diagram '{}': {}", self.diagram_id, self.message),
        }
    }
}

/// Every invariant violation found in a dataset; empty iff all hold.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub entries: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, diagram_id: &str, symbol_id: Option<&str>, message: impl Into<String>) {
        self.entries.push(Violation {
            diagram_id: diagram_id.to_string(),
            symbol_id: symbol_id.map(str::to_string),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for entry in &self.entries {
            writeln!(f, "  - {entry}")?;
        }
        Ok(())
    }
}

/// Checks every dataset invariant and reports all violations as data.
pub fn validate_dataset(dataset: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let class_set: HashSet<&str> = dataset.classes.iter().map(String::as_str).collect();
    let mut diagram_ids = HashSet::new();

    for diagram in &dataset.diagrams {
        if !diagram_ids.insert(diagram.id.as_str()) {
            report.push(&diagram.id, None, "duplicate diagram id");
        }
        if diagram.width == 0 || diagram.height == 0 {
            report.push(
                &diagram.id,
                None,
                format!("image dimensions must be positive, got {}x{}", diagram.width, diagram.height),
            );
        }
        let mut symbol_ids = HashSet::new();
        for symbol in &diagram.symbols {
            if !symbol_ids.insert(symbol.id.as_str()) {
                report.push(&diagram.id, Some(&symbol.id), "duplicate symbol id");
            }
            if symbol.class_label.is_empty() {
                report.push(&diagram.id, Some(&symbol.id), "empty class label");
            } else if !class_set.contains(symbol.class_label.as_str()) {
                report.push(
                    &diagram.id,
                    Some(&symbol.id),
                    format!("class '{}' not in dataset class list", symbol.class_label),
                );
            }
            if symbol.tag.as_deref() == Some("") {
                report.push(
                    &diagram.id,
                    Some(&symbol.id),
                    "tag must be null when absent, not an empty string",
                );
            }
            let b = symbol.bbox;
            if b.w == 0 || b.h == 0 {
                report.push(&diagram.id, Some(&symbol.id), format!("degenerate bbox {b}"));
            } else if !b.fits_within(diagram.width, diagram.height) {
                report.push(
                    &diagram.id,
                    Some(&symbol.id),
                    format!("bbox {b} exceeds image bounds {}x{}", diagram.width, diagram.height),
                );
            }
        }
    }
    report
}

/// Loads a canonical dataset file, validating every invariant.
///
/// Fails on malformed JSON or on any invariant violation; the error names
/// the offending diagram/symbol ids.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let dataset: Dataset = serde_json::from_str(&text).map_err(|err| DatasetError::Parse {
        path: path.to_path_buf(),
        detail: err.to_string(),
    })?;
    let report = validate_dataset(&dataset);
    if !report.is_empty() {
        return Err(DatasetError::Validation(report));
    }
    Ok(dataset)
}

/// Writes a dataset in the canonical schema (pretty-printed JSON).
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_json(path.as_ref(), dataset)
}

/// Detections file envelope: mirrors the dataset envelope with per-diagram
/// detection lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsFile {
    #[serde(rename = "dataset")]
    pub name: String,
    pub classes: Vec<String>,
    pub diagrams: Vec<DetectionSet>,
}

/// Loads a detections file, checking id uniqueness and score ranges.
pub fn load_detections(path: impl AsRef<Path>) -> Result<DetectionsFile, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: DetectionsFile = serde_json::from_str(&text).map_err(|err| DatasetError::Parse {
        path: path.to_path_buf(),
        detail: err.to_string(),
    })?;
    let mut report = ValidationReport::default();
    for set in &file.diagrams {
        let mut ids = HashSet::new();
        for det in &set.detections {
            if !ids.insert(det.id.as_str()) {
                report.push(&set.diagram_id, Some(&det.id), "duplicate detection id");
            }
            if !(0.0..=1.0).contains(&det.score) {
                report.push(
                    &set.diagram_id,
                    Some(&det.id),
                    format!("score {} outside [0,1]", det.score),
                );
            }
        }
    }
    if !report.is_empty() {
        return Err(DatasetError::Validation(report));
    }
    Ok(file)
}

/// Writes detection sets in the canonical detections schema.
pub fn save_detections(file: &DetectionsFile, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_json(path.as_ref(), file)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(value).map_err(|err| DatasetError::Parse {
        path: path.to_path_buf(),
        detail: err.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Convenience for building a detections envelope from per-diagram sets.
pub fn detections_file(dataset: &Dataset, diagrams: Vec<DetectionSet>) -> DetectionsFile {
    DetectionsFile {
        name: dataset.name.clone(),
        classes: dataset.classes.clone(),
        diagrams,
    }
}

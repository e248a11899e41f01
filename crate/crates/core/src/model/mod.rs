//! Canonical data model: diagrams, ground-truth symbol annotations, and
//! detection sets, plus box geometry and dataset ingestion.

mod bbox;
pub mod dataset;

pub use bbox::{iou, BoundingBox, DegenerateBox};
pub use dataset::{
    load_dataset, load_detections, save_dataset, save_detections, validate_dataset, DatasetError,
    ValidationReport, Violation,
};

use serde::{Deserialize, Serialize};

/// A ground-truth symbol annotation: class, box, and the optional tag text
/// printed next to the symbol (e.g. "WX-98701").
///
/// `tag: None` means the symbol has no printed tag; an empty string is never
/// used for absence and is rejected at validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolAnnotation {
    pub id: String,
    #[serde(rename = "class")]
    pub class_label: String,
    pub bbox: BoundingBox,
    pub tag: Option<String>,
}

/// One diagram: image reference, pixel dimensions, and its symbol annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagram {
    pub id: String,
    /// Image path, relative to the dataset file's directory.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub symbols: Vec<SymbolAnnotation>,
}

impl Diagram {
    /// Looks up a ground-truth symbol by id.
    pub fn symbol(&self, id: &str) -> Option<&SymbolAnnotation> {
        self.symbols.iter().find(|s| s.id == id)
    }
}

/// A complete dataset: class vocabulary plus diagrams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    #[serde(rename = "dataset")]
    pub name: String,
    pub classes: Vec<String>,
    pub diagrams: Vec<Diagram>,
}

impl Dataset {
    pub fn diagram(&self, id: &str) -> Option<&Diagram> {
        self.diagrams.iter().find(|d| d.id == id)
    }
}

/// Where a detection record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Present before refinement (base detector output, possibly corrupted).
    Base,
    /// Added by the refinement stage from a missing-object claim.
    Recovered,
    /// Replaced a loose or misclassified box during refinement.
    Relocalized,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Base => f.write_str("base"),
            Provenance::Recovered => f.write_str("recovered"),
            Provenance::Relocalized => f.write_str("relocalized"),
        }
    }
}

/// One detection: class, box, confidence score in `[0,1]`, and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    #[serde(rename = "class")]
    pub class_label: String,
    pub bbox: BoundingBox,
    pub score: f64,
    pub provenance: Provenance,
}

/// All detections for one diagram. Detection ids are unique within the set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub diagram_id: String,
    pub detections: Vec<DetectionRecord>,
}

impl DetectionSet {
    pub fn detection(&self, id: &str) -> Option<&DetectionRecord> {
        self.detections.iter().find(|d| d.id == id)
    }
}

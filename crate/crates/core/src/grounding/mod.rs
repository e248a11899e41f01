//! Multimodal prompt assembly for the judge and detector roles.
//!
//! Each tile is judged under one grounding mode: the overlay image alone,
//! the overlay plus the detected symbols' tag strings, plus their box
//! coordinates in text form, both at once, or an image with the detected
//! objects erased. Localized prompts cover per-box QA and region detection.
//!
//! Templates are plain text with named placeholders ({TAGS}, {COORDS},
//! {TILE_W}, {TILE_H}, {CLASS_LIST}, {CLASS}, {CROP_W}, {CROP_H}, {COLOR},
//! {HINT}); the built-in set can be overridden from a directory, and the
//! active version string is recorded in every report.

use crate::imaging::{render_overlay, erase_boxes, OverlayStyle, Tile, TileIndex};
use crate::model::{BoundingBox, DetectionRecord, DetectionSet};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::path::Path;

/// Which cues the judge receives for a tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundingMode {
    /// Overlay image only.
    VisualOnly,
    /// Overlay image plus the in-tile symbol tag list.
    VisualPlusTags,
    /// Overlay image plus textual box coordinates.
    VisualPlusCoords,
    /// Overlay image plus tags and coordinates ("as many cues as possible").
    VisualTagsCoords,
    /// Detected objects erased; the judge names what might be missing.
    ErasedObjects,
}

impl GroundingMode {
    pub const ALL: [GroundingMode; 5] = [
        GroundingMode::VisualOnly,
        GroundingMode::VisualPlusTags,
        GroundingMode::VisualPlusCoords,
        GroundingMode::VisualTagsCoords,
        GroundingMode::ErasedObjects,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            GroundingMode::VisualOnly => "visual-only",
            GroundingMode::VisualPlusTags => "visual-plus-tags",
            GroundingMode::VisualPlusCoords => "visual-plus-coords",
            GroundingMode::VisualTagsCoords => "visual-tags-coords",
            GroundingMode::ErasedObjects => "erased-objects",
        }
    }
}

impl std::fmt::Display for GroundingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for GroundingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .find(|m| m.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown grounding mode '{s}'"))
    }
}

/// How box coordinates are written into the coordinate block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordStyle {
    /// Tile-local integer pixels (exact; the default).
    #[default]
    Pixels,
    /// Coordinates scaled to a 0-1000 grid over the tile.
    Normalized1000,
}

/// Identifies and bounds-checks the structured reply expected for a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum ResponseSchema {
    /// `{"claims": [{"bbox", "class", "tag", "note"}]}` in tile-local pixels.
    MissingJudge { tile_w: u32, tile_h: u32 },
    /// `{"valid": bool, "tight": bool, "class": string}`.
    BoxQa { classes: Vec<String> },
    /// `{"detections": [{"class", "bbox", "score"?}]}` in crop-local pixels.
    RegionDetect { crop_w: u32, crop_h: u32 },
}

impl ResponseSchema {
    pub fn id(&self) -> &'static str {
        match self {
            ResponseSchema::MissingJudge { .. } => "missing-judge",
            ResponseSchema::BoxQa { .. } => "box-qa",
            ResponseSchema::RegionDetect { .. } => "region-detect",
        }
    }
}

/// An assembled multimodal request: images, prompt text, and the expected
/// reply schema, keyed back to its tile or detection for resumability.
#[derive(Debug, Clone)]
pub struct PromptBundle {
    pub diagram_id: String,
    /// Grid position for tile-wise judging; `None` for localized prompts.
    pub tile_index: Option<TileIndex>,
    /// Detection id or claim key this bundle evaluates, when localized.
    pub target_id: Option<String>,
    /// Diagram-space window of `images[0]`.
    pub window: BoundingBox,
    pub images: Vec<RgbImage>,
    pub text: String,
    pub schema: ResponseSchema,
}

impl PromptBundle {
    /// Stable key for logs and resumable error reports:
    /// `<diagram>/<tile or target>`.
    pub fn key(&self) -> String {
        match (&self.tile_index, &self.target_id) {
            (Some(tile), _) => format!("{}/{}", self.diagram_id, tile),
            (None, Some(target)) => format!("{}/{}", self.diagram_id, target),
            (None, None) => self.diagram_id.clone(),
        }
    }
}

/// The active prompt template set plus its version identifier.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    missing_judge: String,
    missing_judge_erased: String,
    box_qa: String,
    region_detect: String,
    version: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptTemplates {
    /// The templates compiled into the binary.
    pub fn builtin() -> Self {
        Self {
            missing_judge: include_str!("templates/missing_judge.txt").to_string(),
            missing_judge_erased: include_str!("templates/missing_judge_erased.txt").to_string(),
            box_qa: include_str!("templates/box_qa.txt").to_string(),
            region_detect: include_str!("templates/region_detect.txt").to_string(),
            version: "builtin-v1".to_string(),
        }
    }

    /// Loads overriding templates from a directory holding
    /// `missing_judge.txt`, `missing_judge_erased.txt`, `box_qa.txt`, and
    /// `region_detect.txt`. The version becomes `custom-<hash>` so reports
    /// stay auditable.
    pub fn from_dir(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| std::fs::read_to_string(dir.join(name));
        let missing_judge = read("missing_judge.txt")?;
        let missing_judge_erased = read("missing_judge_erased.txt")?;
        let box_qa = read("box_qa.txt")?;
        let region_detect = read("region_detect.txt")?;
        let mut hasher = Sha256::new();
        for part in [&missing_judge, &missing_judge_erased, &box_qa, &region_detect] {
            hasher.update(part.as_bytes());
            hasher.update([0]);
        }
        let digest = hasher.finalize();
        let version = format!("custom-{:02x}{:02x}{:02x}{:02x}", digest[0], digest[1], digest[2], digest[3]);
        Ok(Self {
            missing_judge,
            missing_judge_erased,
            box_qa,
            region_detect,
            version,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }
}

/// Human-readable color reference used inside prompt text.
fn color_name(color: [u8; 3]) -> String {
    match color {
        [255, 0, 0] => "red".to_string(),
        [0, 255, 0] => "green".to_string(),
        [0, 0, 255] => "blue".to_string(),
        [r, g, b] => format!("rgb({r},{g},{b})"),
    }
}

/// True when a detection belongs to a tile: its box center falls inside the
/// tile window (half-open extent).
fn in_tile(det: &DetectionRecord, window: &BoundingBox) -> bool {
    let (cx, cy) = det.bbox.center();
    window.contains_point(cx, cy)
}

/// Tags of in-tile detections, lexicographically sorted and deduplicated.
///
/// Detection records carry no tag field; `tag_lookup` joins tags from the
/// ground-truth annotations (a tag survives corruption unless its symbol was
/// omitted). Detections without a tag contribute nothing.
pub fn collect_tags(
    detections: &DetectionSet,
    window: &BoundingBox,
    tag_lookup: &dyn Fn(&str) -> Option<String>,
) -> Vec<String> {
    let set: BTreeSet<String> = detections
        .detections
        .iter()
        .filter(|d| in_tile(d, window))
        .filter_map(|d| tag_lookup(&d.id))
        .collect();
    set.into_iter().collect()
}

/// One line of the coordinate block plus its header: tile dimensions first,
/// then `<class>: [x,y,w,h]` per in-tile detection in tile-local integers,
/// sorted by (y, x).
pub fn serialize_coords(
    detections: &DetectionSet,
    window: &BoundingBox,
    style: CoordStyle,
) -> String {
    let mut rows: Vec<(i64, i64, String)> = detections
        .detections
        .iter()
        .filter(|d| in_tile(d, window))
        .map(|d| {
            let x = d.bbox.x as i64 - window.x as i64;
            let y = d.bbox.y as i64 - window.y as i64;
            let (sx, sy, sw, sh) = match style {
                CoordStyle::Pixels => (x, y, d.bbox.w as i64, d.bbox.h as i64),
                CoordStyle::Normalized1000 => (
                    scale_to_grid(x, window.w),
                    scale_to_grid(y, window.h),
                    scale_to_grid(d.bbox.w as i64, window.w),
                    scale_to_grid(d.bbox.h as i64, window.h),
                ),
            };
            (y, x, format!("{}: [{},{},{},{}]", d.class_label, sx, sy, sw, sh))
        })
        .collect();
    rows.sort_by(|a, b| (a.0, a.1, &a.2).cmp(&(b.0, b.1, &b.2)));

    let header = match style {
        CoordStyle::Pixels => format!("Tile dimensions: {}x{} pixels.", window.w, window.h),
        CoordStyle::Normalized1000 => format!(
            "Tile dimensions: {}x{} pixels; coordinates below are normalized to a 0-1000 grid.",
            window.w, window.h
        ),
    };
    let mut out = header;
    for (_, _, line) in rows {
        out.push('\n');
        out.push_str(&line);
    }
    out
}

fn scale_to_grid(v: i64, extent: u32) -> i64 {
    if extent == 0 {
        return 0;
    }
    ((v as f64) * 1000.0 / extent as f64).round() as i64
}

/// Parses `serialize_coords` pixel-style output back into
/// `(class, [x, y, w, h])` rows. Exact inverse for the pixel style.
pub fn parse_coords(block: &str) -> Vec<(String, [i64; 4])> {
    let mut out = Vec::new();
    for line in block.lines().skip(1) {
        let Some((class, rest)) = line.split_once(": [") else {
            continue;
        };
        let Some(numbers) = rest.strip_suffix(']') else {
            continue;
        };
        let parts: Vec<i64> = numbers
            .split(',')
            .filter_map(|n| n.trim().parse().ok())
            .collect();
        if parts.len() == 4 {
            out.push((class.to_string(), [parts[0], parts[1], parts[2], parts[3]]));
        }
    }
    out
}

/// The tag section inserted at {TAGS}; empty string when no tags exist.
pub fn tag_section(tags: &[String]) -> String {
    if tags.is_empty() {
        return String::new();
    }
    let mut section =
        String::from("The following symbol tags appear next to detected symbols in this tile:\n");
    for tag in tags {
        section.push_str("- ");
        section.push_str(tag);
        section.push('\n');
    }
    section.push('\n');
    section
}

/// The coordinate section inserted at {COORDS}.
pub fn coord_section(detections: &DetectionSet, window: &BoundingBox, style: CoordStyle) -> String {
    let mut section = String::from("Detected bounding boxes in this tile:\n");
    section.push_str(&serialize_coords(detections, window, style));
    section.push_str("\n\n");
    section
}

/// Builds the tile-wise missing-object judge prompt for one grounding mode.
///
/// Identical inputs produce byte-identical text and images. The text of
/// `VisualTagsCoords` contains the tag section of `VisualPlusTags` and the
/// coordinate section of `VisualPlusCoords` verbatim.
#[allow(clippy::too_many_arguments)]
pub fn build_missing_judge_prompt(
    tile: &Tile,
    diagram_id: &str,
    detections: &DetectionSet,
    tag_lookup: &dyn Fn(&str) -> Option<String>,
    mode: GroundingMode,
    style: &OverlayStyle,
    classes: &[String],
    templates: &PromptTemplates,
    coord_style: CoordStyle,
) -> PromptBundle {
    let in_tile_boxes: Vec<BoundingBox> = detections
        .detections
        .iter()
        .filter(|d| {
            // Draw/erase any box that touches the tile, not only centered ones.
            d.bbox.intersection_area(&tile.window) > 0.0
        })
        .map(|d| d.bbox)
        .collect();

    let (image, template) = match mode {
        GroundingMode::ErasedObjects => (
            erase_boxes(tile, &in_tile_boxes),
            templates.missing_judge_erased.as_str(),
        ),
        _ => (
            render_overlay(tile, &in_tile_boxes, style),
            templates.missing_judge.as_str(),
        ),
    };

    let tags = match mode {
        GroundingMode::VisualPlusTags | GroundingMode::VisualTagsCoords => {
            tag_section(&collect_tags(detections, &tile.window, tag_lookup))
        }
        _ => String::new(),
    };
    let coords = match mode {
        GroundingMode::VisualPlusCoords | GroundingMode::VisualTagsCoords => {
            coord_section(detections, &tile.window, coord_style)
        }
        _ => String::new(),
    };

    let text = template
        .replace("{TILE_W}", &tile.window.w.to_string())
        .replace("{TILE_H}", &tile.window.h.to_string())
        .replace("{CLASS_LIST}", &classes.join(", "))
        .replace("{COLOR}", &color_name(style.color))
        .replace("{TAGS}", &tags)
        .replace("{COORDS}", &coords);

    PromptBundle {
        diagram_id: diagram_id.to_string(),
        tile_index: Some(tile.index),
        target_id: None,
        window: tile.window,
        images: vec![image],
        text,
        schema: ResponseSchema::MissingJudge {
            tile_w: tile.window.w,
            tile_h: tile.window.h,
        },
    }
}

/// Builds the localized three-question QA prompt for one detected box.
///
/// `crop` and `crop_window` come from `crop_region` around the detection;
/// the detection's box is outlined on the crop so the questions can refer
/// to it.
pub fn build_box_qa_prompt(
    crop: &RgbImage,
    crop_window: &BoundingBox,
    diagram_id: &str,
    detection: &DetectionRecord,
    classes: &[String],
    style: &OverlayStyle,
    templates: &PromptTemplates,
) -> PromptBundle {
    let tile = Tile {
        index: TileIndex { row: 0, col: 0 },
        window: *crop_window,
        image: crop.clone(),
    };
    let image = render_overlay(&tile, &[detection.bbox], style);
    let text = templates
        .box_qa
        .replace("{CROP_W}", &crop_window.w.to_string())
        .replace("{CROP_H}", &crop_window.h.to_string())
        .replace("{COLOR}", &color_name(style.color))
        .replace("{CLASS}", &detection.class_label)
        .replace("{CLASS_LIST}", &classes.join(", "));
    PromptBundle {
        diagram_id: diagram_id.to_string(),
        tile_index: None,
        target_id: Some(detection.id.clone()),
        window: *crop_window,
        images: vec![image],
        text,
        schema: ResponseSchema::BoxQa {
            classes: classes.to_vec(),
        },
    }
}

/// Builds the localized region-detection prompt used to recover symbols.
pub fn build_region_detect_prompt(
    crop: &RgbImage,
    crop_window: &BoundingBox,
    diagram_id: &str,
    target_id: &str,
    suspected_class: Option<&str>,
    classes: &[String],
    templates: &PromptTemplates,
) -> PromptBundle {
    let hint = match suspected_class {
        Some(class) => format!("A reviewer suspects a missing \"{class}\" in this region. "),
        None => String::new(),
    };
    let text = templates
        .region_detect
        .replace("{CROP_W}", &crop_window.w.to_string())
        .replace("{CROP_H}", &crop_window.h.to_string())
        .replace("{HINT}", &hint)
        .replace("{CLASS_LIST}", &classes.join(", "));
    PromptBundle {
        diagram_id: diagram_id.to_string(),
        tile_index: None,
        target_id: Some(target_id.to_string()),
        window: *crop_window,
        images: vec![crop.clone()],
        text,
        schema: ResponseSchema::RegionDetect {
            crop_w: crop_window.w,
            crop_h: crop_window.h,
        },
    }
}
